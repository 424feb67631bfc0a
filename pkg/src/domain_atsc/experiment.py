"""Desk-scale cross-domain adaptation experiment on synthetic domains.

Protocol: pre-train a base encoder on general text, finetune its LM on target-domain text, then
train ATSC on the source domain and test on the target domain.  The baseline skips the LM
finetuning step.  ATSC training is repeated for every seed on both encoders.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

from .evaluation import DEFAULT_SEEDS, accuracy, aggregate_runs, learning_curve, CurvePoint
from .lmdata import MaskingPolicy, generate_examples
from .model import EncoderConfig, EncoderModel
from .seeding import derive_seed
from .synthetic import atsc_dataset, domain_corpus, general_corpus
from .text import SINGLE_DOMAINS, AtscExample, Domain, ReviewDoc, Vocab, build_vocab
from .training import AtscRunSpec, FinetuneRunSpec, lm_finetune, predict_labels, train_atsc

log = logging.getLogger(__name__)


@dataclass
class AdaptationConfig:
    source: Domain = Domain.LAPTOPS
    target: Domain = Domain.RESTAURANTS
    seed: int = 0
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    general_docs: int = 1200
    domain_docs: int = 600
    atsc_train: int = 300
    atsc_test: int = 300
    max_len: int = 64
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ff_dim: int = 128
    batch_size: int = 32
    pretrain_epochs: int = 40
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 30
    finetune_lr: float = 1e-3
    atsc_epochs: int = 10
    atsc_lr: float = 3e-4
    snapshots: tuple[int, ...] = ()


@dataclass
class World:
    vocab: Vocab
    general: list[ReviewDoc]
    corpora: dict[Domain, list[ReviewDoc]]
    datasets: dict[Domain, tuple[list[AtscExample], list[AtscExample]]]


def build_world(cfg: AdaptationConfig) -> World:
    general = general_corpus(cfg.general_docs, derive_seed(cfg.seed, "general"))
    corpora = {d: domain_corpus(d, cfg.domain_docs, derive_seed(cfg.seed, f"corpus-{d.value}"))
               for d in SINGLE_DOMAINS}
    # test sets use only domain-specific sentiment words, so the target test measures whether the
    # encoder has learned what those words mean
    datasets = {d: (atsc_dataset(d, cfg.atsc_train, derive_seed(cfg.seed, f"train-{d.value}"), "train", "mixed"),
                    atsc_dataset(d, cfg.atsc_test, derive_seed(cfg.seed, f"test-{d.value}"), "test", "specific"))
                for d in SINGLE_DOMAINS}
    sentences = [s for doc in general + [x for c in corpora.values() for x in c] for s in doc.sentences]
    sentences += [ex.tokens for pair in datasets.values() for part in pair for ex in part]
    return World(build_vocab(sentences), general, corpora, datasets)


def encoder_config(cfg: AdaptationConfig, vocab: Vocab) -> EncoderConfig:
    return EncoderConfig(cfg.num_layers, cfg.hidden_dim, cfg.num_heads, cfg.ff_dim, vocab.size, cfg.max_len)


def lm_shards(docs: Sequence[ReviewDoc], vocab: Vocab, cfg: AdaptationConfig, name: str, epochs: int):
    policy = MaskingPolicy()
    return [generate_examples(docs, vocab, policy, derive_seed(cfg.seed, f"{name}-shard-{e}"), cfg.max_len)
            for e in range(epochs)]


def pretrain_base(world: World, cfg: AdaptationConfig) -> EncoderModel:
    model = EncoderModel(encoder_config(cfg, world.vocab), seed=derive_seed(cfg.seed, "init"))
    spec = FinetuneRunSpec(Domain.LAPTOPS, epochs=cfg.pretrain_epochs, batch_size=cfg.batch_size,
                           lr=cfg.pretrain_lr, seed=derive_seed(cfg.seed, "pretrain"))
    shards = lm_shards(world.general, world.vocab, cfg, "general", cfg.pretrain_epochs)
    return lm_finetune(model, spec, shards, world.vocab).model


def finetune_lm(base: EncoderModel, world: World, cfg: AdaptationConfig, domain: Domain,
                snapshots: Sequence[int] = ()):
    docs = world.corpora[domain] if domain is not Domain.JOINT else [
        d for dom in SINGLE_DOMAINS for d in world.corpora[dom]]
    spec = FinetuneRunSpec(domain, epochs=cfg.finetune_epochs, batch_size=cfg.batch_size,
                           lr=cfg.finetune_lr, snapshots=tuple(snapshots),
                           seed=derive_seed(cfg.seed, f"finetune-{domain.value}"))
    shards = lm_shards(docs, world.vocab, cfg, f"ft-{domain.value}", cfg.finetune_epochs)
    return lm_finetune(base, spec, shards, world.vocab)


class SyntheticTrainer:
    """Trainer callable for run_matrix / learning_curve on the synthetic world."""

    def __init__(self, vocab: Vocab, cfg: AdaptationConfig):
        self.vocab = vocab
        self.cfg = cfg

    def __call__(self, lm_key, lm_model, d_train, train, seed):
        spec = AtscRunSpec(d_train, epochs=self.cfg.atsc_epochs, batch_size=self.cfg.batch_size,
                           lr=self.cfg.atsc_lr, seed=seed, val_fraction=0.0, max_len=self.cfg.max_len)
        model = train_atsc(lm_model, spec, train, self.vocab).model
        return _Predictor(model, self.vocab)


class _Predictor:
    def __init__(self, model, vocab):
        self.model, self.vocab = model, vocab

    def __call__(self, examples):
        return predict_labels(self.model, examples, self.vocab)


@dataclass
class AdaptationResult:
    baseline: list[float] = field(default_factory=list)
    adapted: list[float] = field(default_factory=list)
    seconds: float = 0.0
    curve: list[CurvePoint] = field(default_factory=list)

    @property
    def improvement(self) -> float:
        return sum(self.adapted) / len(self.adapted) - sum(self.baseline) / len(self.baseline)

    def summary(self) -> str:
        (bm, bs), (am, as_) = aggregate_runs(self.baseline), aggregate_runs(self.adapted)
        return (f"baseline {100 * bm:.2f}±{100 * bs:.2f}  adapted {100 * am:.2f}±{100 * as_:.2f}  "
                f"gain {100 * self.improvement:+.2f} points over {len(self.adapted)} seeds ({self.seconds:.0f}s)")


def run_adaptation(cfg: AdaptationConfig) -> AdaptationResult:
    """source-trained ATSC evaluated on the target test set, with and without target LM finetuning."""
    t0 = time.time()
    world = build_world(cfg)
    base = pretrain_base(world, cfg)
    ft = finetune_lm(base, world, cfg, cfg.target, cfg.snapshots)
    train = world.datasets[cfg.source][0]
    test = world.datasets[cfg.target][1]
    golds = [int(ex.label) for ex in test]
    trainer = SyntheticTrainer(world.vocab, cfg)
    result = AdaptationResult()
    for seed in cfg.seeds:
        result.baseline.append(accuracy(trainer(None, base, cfg.source, train, seed)(test), golds))
        result.adapted.append(accuracy(trainer(cfg.target, ft.model, cfg.source, train, seed)(test), golds))
        log.info("seed %d: baseline %.3f adapted %.3f", seed, result.baseline[-1], result.adapted[-1])
    if cfg.snapshots:
        snaps = [(s.sentences_seen, s.load()) for s in ft.snapshots]
        result.curve = learning_curve(snaps, train, test, cfg.seeds, trainer, cfg.source)
    result.seconds = time.time() - t0
    return result
