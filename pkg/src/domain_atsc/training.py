"""Two-step procedure: LM finetuning on a domain corpus, then supervised ATSC training."""
from __future__ import annotations

import copy
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import checkpoint_bytes
from .errors import EmptyDataset, TestSplitLeak, VocabMismatch
from .lmdata import MaskedPairExample, MaskingPolicy, encode_pair, mask_examples, read_shard
from .model import EncoderModel, backward, classify_atsc, collate_lm, lm_loss_parts, loss_atsc
from .optim import AdamState, adam_step
from .seeding import derive_seed
from .text import AtscExample, Domain, Vocab

log = logging.getLogger(__name__)

# Full-scale corpus budgets: (sentences, epochs); each works out to roughly 30M sentence presentations.
FULL_SCALE_LM_BUDGETS = {
    Domain.LAPTOPS: (1_007_209, 30),
    Domain.RESTAURANTS: (10_000_000, 3),
    Domain.JOINT: (2_007_213, 15),
}
FULL_SCALE_LR = 3e-5
FULL_SCALE_BATCH_SIZE = 32
FULL_SCALE_ATSC_EPOCHS = 7
FULL_SCALE_MAX_LEN = 256


def configure_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


@dataclass
class FinetuneRunSpec:
    domain: Domain
    epochs: int = 1
    batch_size: int = FULL_SCALE_BATCH_SIZE
    lr: float = 1e-3
    max_sentences: int | None = None
    snapshots: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        self.domain = Domain.parse(self.domain)
        self.snapshots = tuple(self.snapshots)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if any(b <= a for a, b in zip(self.snapshots, self.snapshots[1:])):
            raise ValueError("snapshot counts must be strictly increasing")

    @classmethod
    def full_scale(cls, domain: Domain | str, seed: int = 0) -> "FinetuneRunSpec":
        domain = Domain.parse(domain)
        return cls(domain, epochs=FULL_SCALE_LM_BUDGETS[domain][1], batch_size=FULL_SCALE_BATCH_SIZE, lr=FULL_SCALE_LR, seed=seed)


@dataclass
class AtscRunSpec:
    train_domain: Domain
    epochs: int = FULL_SCALE_ATSC_EPOCHS
    batch_size: int = FULL_SCALE_BATCH_SIZE
    lr: float = FULL_SCALE_LR
    seed: int = 0
    init_checkpoint: str = "base"
    val_fraction: float = 0.1
    max_len: int = 128
    reinit_head: bool = True

    def __post_init__(self) -> None:
        self.train_domain = Domain.parse(self.train_domain)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class StepLog:
    step: int
    sentences_seen: int
    loss: float
    lr: float
    mlm_loss: float
    nsp_loss: float

    def line(self) -> str:
        return f"{self.step}\t{self.sentences_seen}\t{self.loss:.10g}\t{self.lr:g}\t{self.mlm_loss:.10g}\t{self.nsp_loss:.10g}"


@dataclass
class Snapshot:
    sentences_seen: int
    step: int
    data: bytes  # serialized checkpoint

    def load(self) -> EncoderModel:
        from .checkpoint import load_checkpoint_bytes
        return load_checkpoint_bytes(self.data).model


@dataclass
class FinetuneResult:
    model: EncoderModel
    state: AdamState
    snapshots: list[Snapshot]
    log: list[StepLog]


def load_shards(paths: Sequence[str | Path], vocab: Vocab) -> tuple[list[list[MaskedPairExample]], MaskingPolicy]:
    shards, policy = [], MaskingPolicy()
    for path in paths:
        header, examples = read_shard(path)
        if header.get("vocab_hash") != vocab.hash:
            raise VocabMismatch(f"{path} was built with vocab {header.get('vocab_hash')}, expected {vocab.hash}")
        policy = MaskingPolicy.from_description(header["policy"])
        shards.append(examples)
    return shards, policy


def unmask(examples: Sequence[MaskedPairExample]) -> list[MaskedPairExample]:
    out = []
    for ex in examples:
        ids = list(ex.input_ids)
        for pos, label in zip(ex.mlm_positions, ex.mlm_labels):
            ids[pos] = label
        out.append(MaskedPairExample(ids, list(ex.segment_ids), [], [], ex.nsp_label, ex.num_sentences,
                                     ex.num_tokens, ex.doc_id, ex.position))
    return out


def lm_finetune(model: EncoderModel, spec: FinetuneRunSpec, shards: Sequence, vocab: Vocab,
                policy: MaskingPolicy | None = None, run_dir: str | Path | None = None) -> FinetuneResult:
    """Self-supervised MLM + NSP training with checkpoints at scheduled sentence counts.

    `shards` holds example lists or shard paths.  Epoch e uses shard e when it exists; later epochs
    re-mask an earlier shard with a fresh seed.  A snapshot scheduled at count c is written after the
    first step whose cumulative sentence count reaches c, plus one final snapshot.
    """
    if shards and isinstance(shards[0], (str, Path)):
        shards, shard_policy = load_shards(shards, vocab)
        policy = policy or shard_policy
    policy = policy or MaskingPolicy()
    if not shards or not any(shards):
        raise EmptyDataset("no LM examples")
    if vocab.size != model.config.vocab_size:
        raise VocabMismatch(f"vocab has {vocab.size} entries, model expects {model.config.vocab_size}")
    for shard in shards:
        for ex in shard:
            if max(ex.input_ids) >= vocab.size or max(ex.mlm_labels, default=0) >= vocab.size:
                raise VocabMismatch("shard token id outside model vocabulary")

    configure_determinism()
    torch.manual_seed(derive_seed(spec.seed, "lm-dropout"))
    model = copy.deepcopy(model)
    model.train()
    state = AdamState(lr=spec.lr)
    meta = {"vocab_hash": vocab.hash}
    pending = list(spec.snapshots)
    snapshots: list[Snapshot] = []
    steps: list[StepLog] = []
    seen, step = 0, 0
    out_dir = Path(run_dir) if run_dir else None
    if out_dir:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    def emit() -> None:
        snap = Snapshot(seen, step, checkpoint_bytes(model, state, meta))
        snapshots.append(snap)
        if out_dir:
            (out_dir / "checkpoints" / f"snapshot_{seen:012d}.ckpt").write_bytes(snap.data)

    while pending and pending[0] <= 0:
        pending.pop(0)
        emit()
    done = False
    for epoch in range(spec.epochs):
        if epoch < len(shards):
            examples = list(shards[epoch])
        else:
            examples = mask_examples(unmask(shards[epoch % len(shards)]), policy, vocab,
                                     derive_seed(spec.seed, f"mask-epoch-{epoch}"))
        random.Random(derive_seed(spec.seed, f"lm-order-{epoch}")).shuffle(examples)
        for start in range(0, len(examples), spec.batch_size):
            batch = examples[start:start + spec.batch_size]
            if not any(ex.mlm_positions for ex in batch):
                log.warning("skipping batch without masked positions at step %d", step)
                continue
            collated = collate_lm(batch)
            mlm, nsp = lm_loss_parts(model, collated)
            loss = mlm + nsp
            adam_step(model, backward(model, loss), state)
            step += 1
            seen += collated.num_sentences
            steps.append(StepLog(step, seen, loss.item(), state.lr, mlm.item(), nsp.item()))
            while pending and pending[0] <= seen:
                pending.pop(0)
                emit()
            if spec.max_sentences is not None and seen >= spec.max_sentences:
                done = True
                break
        if done:
            break
    if not snapshots or snapshots[-1].step != step:
        emit()
    model.eval()
    if out_dir:
        write_metrics(out_dir / "metrics.tsv", steps, spec.seed)
    return FinetuneResult(model, state, snapshots, steps)


def write_metrics(path: Path, steps: Sequence[StepLog], seed: int) -> None:
    with open(path, "w") as fh:
        fh.write(f"# seed={seed}\nstep\tsentences_seen\tloss\tlr\tmlm_loss\tnsp_loss\n")
        for s in steps:
            fh.write(s.line() + "\n")


def encode_atsc_input(example: AtscExample, vocab: Vocab, max_len: int = 128) -> tuple[list[int], list[int]]:
    """[CLS] sentence [SEP] target [SEP], unpadded."""
    return encode_pair(vocab.encode(example.tokens), vocab.encode(example.target), vocab, max_len, pad=False)


def collate_atsc(encoded: Sequence[tuple[list[int], list[int]]]) -> tuple[torch.Tensor, ...]:
    width = max(len(ids) for ids, _ in encoded)
    ids = torch.zeros(len(encoded), width, dtype=torch.long)
    segs = torch.zeros(len(encoded), width, dtype=torch.long)
    mask = torch.zeros(len(encoded), width, dtype=torch.bool)
    for r, (i, s) in enumerate(encoded):
        ids[r, :len(i)] = torch.tensor(i)
        segs[r, :len(s)] = torch.tensor(s)
        segs[r, len(s):] = s[-1]
        mask[r, :len(i)] = True
    return ids, segs, mask


def predict_proba(model: EncoderModel, examples: Sequence[AtscExample], vocab: Vocab,
                  batch_size: int = 128, max_len: int | None = None) -> np.ndarray:
    max_len = max_len or model.config.max_len
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            enc = [encode_atsc_input(ex, vocab, max_len) for ex in examples[start:start + batch_size]]
            ids, segs, mask = collate_atsc(enc)
            out.append(classify_atsc(model, model(ids, segs, mask)).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 3))


def predict_labels(model: EncoderModel, examples: Sequence[AtscExample], vocab: Vocab, **kw) -> list[int]:
    # np.argmax picks the first maximum: ties go to the lowest class index
    return [int(i) for i in np.argmax(predict_proba(model, examples, vocab, **kw), axis=1)]


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float | None

    def line(self) -> str:
        val = "nan" if self.val_accuracy is None else f"{self.val_accuracy:.10g}"
        return f"{self.epoch}\t{self.train_loss:.10g}\t{self.train_accuracy:.10g}\t{val}"


@dataclass
class AtscTrainResult:
    model: EncoderModel
    epochs: list[EpochMetrics] = field(default_factory=list)
    train_examples: int = 0
    val_examples: int = 0
    final_train_accuracy: float = 0.0

    def metrics_log(self) -> str:
        return "".join(m.line() + "\n" for m in self.epochs)


def split_validation(dataset: Sequence[AtscExample], fraction: float, seed: int):
    idx = list(range(len(dataset)))
    random.Random(seed).shuffle(idx)
    n_val = int(round(fraction * len(dataset)))
    if n_val >= len(dataset):
        n_val = len(dataset) - 1
    val = sorted(idx[:n_val])
    train = sorted(idx[n_val:])
    return [dataset[i] for i in train], [dataset[i] for i in val]


def train_atsc(model: EncoderModel, spec: AtscRunSpec, dataset: Sequence[AtscExample], vocab: Vocab,
               run_dir: str | Path | None = None) -> AtscTrainResult:
    """Supervised sequence-pair classification; returns the last-epoch model and per-epoch metrics."""
    if not dataset:
        raise EmptyDataset("ATSC training set is empty")
    leaked = [ex for ex in dataset if ex.split == "test"]
    if leaked:
        raise TestSplitLeak(f"{len(leaked)} test-split examples passed to train_atsc")
    configure_determinism()
    torch.manual_seed(derive_seed(spec.seed, "atsc-dropout"))
    model = copy.deepcopy(model)
    if spec.reinit_head:
        gen = torch.Generator().manual_seed(derive_seed(spec.seed, "cls-head"))
        with torch.no_grad():
            model.cls_head.weight.copy_(torch.randn(model.cls_head.weight.shape, generator=gen) * 0.02)
            model.cls_head.bias.zero_()
    train, val = split_validation(dataset, spec.val_fraction, derive_seed(spec.seed, "val-split"))
    encoded = [encode_atsc_input(ex, vocab, spec.max_len) for ex in train]
    labels = [int(ex.label) for ex in train]
    state = AdamState(lr=spec.lr)
    order_rng = random.Random(derive_seed(spec.seed, "atsc-order"))
    result = AtscTrainResult(model, train_examples=len(train), val_examples=len(val))
    for epoch in range(1, spec.epochs + 1):
        model.train()
        order = list(range(len(train)))
        order_rng.shuffle(order)
        total, correct, loss_sum = 0, 0, 0.0
        for start in range(0, len(order), spec.batch_size):
            rows = order[start:start + spec.batch_size]
            ids, segs, mask = collate_atsc([encoded[r] for r in rows])
            y = torch.tensor([labels[r] for r in rows])
            p = classify_atsc(model, model(ids, segs, mask))
            loss = loss_atsc(p, y)
            adam_step(model, backward(model, loss), state)
            loss_sum += loss.item() * len(rows)
            correct += int((p.argmax(-1) == y).sum())
            total += len(rows)
        val_acc = None
        if val:
            preds = predict_labels(model, val, vocab, max_len=spec.max_len)
            val_acc = sum(int(p == ex.label) for p, ex in zip(preds, val)) / len(val)
        result.epochs.append(EpochMetrics(epoch, loss_sum / total, correct / total, val_acc))
    preds = predict_labels(model, train, vocab, max_len=spec.max_len)
    result.final_train_accuracy = sum(int(p == y) for p, y in zip(preds, labels)) / len(train)
    if run_dir:
        out = Path(run_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_kv(out / "spec.txt", asdict(spec))
        (out / "metrics.tsv").write_text(f"# seed={spec.seed}\nepoch\ttrain_loss\ttrain_accuracy\tval_accuracy\n"
                                         + result.metrics_log())
    return result


def write_kv(path: Path, values: dict) -> None:
    lines = [f"{k}={v.value if isinstance(v, Domain) else v}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")
