"""Command-line front end.

Every command writes into a run directory (`--run-dir`), echoes its resolved configuration there as
`config.txt` and marks the directory complete when it finishes.  A complete run directory is never
overwritten unless `--force` is given.  Options come from built-in defaults, then an optional
`--config` file of key=value lines, then explicit flags.

Exit codes: 0 success, 1 failure while running, 2 usage error or missing input.
"""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import AtscError, MissingArtifact
from .evaluation import run_matrix, learning_curve
from .lmdata import MaskingPolicy, generate_examples, write_shard
from .model import EncoderConfig, EncoderModel
from .seeding import derive_seed
from .synthetic import atsc_dataset, domain_corpus, review_text
from .text import (SINGLE_DOMAINS, AtscExample, Domain, Vocab, build_vocab, parse_semeval_xml,
                   prepare_corpus, read_reviews, semeval_sentences, word_tokens, write_docs,
                   write_semeval_xml)
from .training import (FULL_SCALE_ATSC_EPOCHS, FULL_SCALE_BATCH_SIZE, FULL_SCALE_LR, FULL_SCALE_MAX_LEN, AtscRunSpec,
                       FinetuneRunSpec, lm_finetune, predict_labels, train_atsc)

log = logging.getLogger("domain_atsc")

COMPLETE_MARKER = "COMPLETE"


class UsageError(Exception):
    """Bad configuration or missing input; maps to exit code 2."""


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str = ""


def _bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    """'0-8' or '0,1,2' or '' -> tuple of ints."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _paths(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in str(text).split(",") if p.strip())


def _domain(text: str) -> str:
    return Domain.parse(text).value


def _opt_str(text: str) -> str | None:
    return str(text) or None


def _opt_int(text: str) -> int | None:
    return int(text) if str(text).strip() not in ("", "none", "None") else None


COMMON = [Option("seed", int, 0, "top-level seed; every sub-component seed derives from it")]
MODEL_OPTIONS = [
    Option("layers", int, 2), Option("hidden", int, 64), Option("heads", int, 2),
    Option("ff", int, 128), Option("max-len", int, 128),
]

COMMANDS: dict[str, list[Option]] = {
    "prepare-corpus": COMMON + [
        Option("input", _paths, (), "review JSONL file(s) with a 'text' field"),
        Option("domain", _domain, "restaurants"),
        Option("sentences", _opt_int, None, "sentence budget for sampling whole reviews"),
        Option("eval-xml", _paths, (), "SemEval XML files whose sentences are removed from the corpus"),
        Option("vocab", _opt_str, None, "existing vocabulary file; built from the corpus when absent"),
        Option("vocab-size", int, 8192),
        Option("max-len", int, FULL_SCALE_MAX_LEN),
        Option("epochs", int, 1, "number of independently masked shards"),
        Option("num-shards", int, 1), Option("workers", int, 1),
    ],
    "init-model": COMMON + MODEL_OPTIONS + [Option("vocab", str, "")],
    "lm-finetune": COMMON + [
        Option("init", str, "", "checkpoint to start from"), Option("vocab", str, ""),
        Option("shards", _paths, ()), Option("domain", _domain, "restaurants"),
        Option("epochs", int, 1), Option("batch-size", int, FULL_SCALE_BATCH_SIZE), Option("lr", float, FULL_SCALE_LR),
        Option("max-sentences", _opt_int, None), Option("snapshots", _ints, (), "sentence counts to snapshot at"),
    ],
    "train-atsc": COMMON + [
        Option("init", str, ""), Option("vocab", str, ""), Option("train", _paths, ()),
        Option("domain", _domain, "restaurants"), Option("epochs", int, FULL_SCALE_ATSC_EPOCHS),
        Option("batch-size", int, FULL_SCALE_BATCH_SIZE), Option("lr", float, FULL_SCALE_LR),
        Option("val-fraction", float, 0.1), Option("max-len", int, 128),
    ],
    "eval-matrix": COMMON + [
        Option("lm", _paths, (), "domain=checkpoint entries; 'base' names the encoder without LM finetuning"),
        Option("vocab", str, ""),
        Option("train-laptops", str, ""), Option("test-laptops", str, ""),
        Option("train-restaurants", str, ""), Option("test-restaurants", str, ""),
        Option("seeds", _ints, tuple(range(9))), Option("epochs", int, FULL_SCALE_ATSC_EPOCHS),
        Option("batch-size", int, FULL_SCALE_BATCH_SIZE), Option("lr", float, FULL_SCALE_LR),
        Option("max-len", int, 128), Option("workers", int, 1),
        Option("stub", _bool, False, "replace training with a seeded random predictor (pipeline smoke test)"),
    ],
    "learning-curve": COMMON + [
        Option("snapshots-dir", str, "", "checkpoints/ directory written by lm-finetune"),
        Option("vocab", str, ""), Option("train", _paths, ()), Option("test", _paths, ()),
        Option("name", str, "curve"), Option("seeds", _ints, tuple(range(9))),
        Option("epochs", int, FULL_SCALE_ATSC_EPOCHS), Option("batch-size", int, FULL_SCALE_BATCH_SIZE),
        Option("lr", float, FULL_SCALE_LR), Option("max-len", int, 128),
    ],
    "explain": COMMON + [
        Option("checkpoint", str, ""), Option("vocab", str, ""),
        Option("sentence", str, ""), Option("target", str, ""),
        Option("input", str, "", "SemEval XML file; every aspect term is explained"),
        Option("max-len", int, 128),
    ],
    "report": COMMON + [
        Option("runs", _paths, (), "eval-matrix run directories"),
        Option("curves", _paths, (), "learning-curve run directories"),
        Option("title", str, ""),
    ],
    "make-synthetic": COMMON + [
        Option("domain", _domain, "restaurants"), Option("reviews", int, 200),
        Option("train", int, 120), Option("test", int, 60),
    ],
}


def _flag(name: str) -> str:
    return "--" + name


def _key(name: str) -> str:
    return name.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domain-atsc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--run-dir", required=True, help="output directory")
        p.add_argument("--config", help="key=value file; explicit flags take precedence")
        p.add_argument("--force", action="store_true", help="overwrite a completed run directory")
        p.add_argument("-v", "--verbose", action="store_true")
        for opt in options:
            default = opt.default
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            # SUPPRESS keeps unspecified flags out of the namespace so config files can fill them
            extra = {"nargs": "?", "const": "true"} if opt.type is _bool else {}
            p.add_argument(_flag(opt.name), dest=_key(opt.name), default=argparse.SUPPRESS,
                           help=f"{opt.help} (default: {shown})".strip(), **extra)
    return parser


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    values = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, _, value = line.partition("=")
        values[_key(key.strip())] = value.strip()
    return values


def resolve_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    options = {_key(o.name): o for o in COMMANDS[command]}
    resolved = {k: o.default for k, o in options.items()}
    raw: dict[str, str] = {}
    if args.config:
        raw.update(read_config_file(args.config))
    unknown = sorted(set(raw) - set(options))
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    raw.update({k: v for k, v in vars(args).items() if k in options})
    for key, value in raw.items():
        try:
            resolved[key] = options[key].type(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    return resolved


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    return "" if value is None else str(value)


def write_config(run_dir: Path, command: str, config: dict[str, Any]) -> None:
    lines = [f"command={command}"] + [f"{k}={_format_value(v)}" for k, v in sorted(config.items())]
    (run_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _existing(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_vocab(cfg) -> Vocab:
    return Vocab.load(_existing(cfg["vocab"], "vocab"))


def _load_model(path: str, what: str = "init") -> EncoderModel:
    return load_checkpoint(_existing(path, what)).model


def _read_xml(paths: Sequence[str], what: str, domain: Domain | None = None, split: str | None = None):
    if not paths:
        raise UsageError(f"--{what} is required")
    examples: list[AtscExample] = []
    for p in paths:
        ex, _ = parse_semeval_xml(_existing(p, what), split=split, domain=domain)
        examples.extend(ex)
    return examples


# ---------------------------------------------------------------- commands


def cmd_prepare_corpus(cfg, run_dir: Path) -> None:
    domain = Domain.parse(cfg["domain"])
    if not cfg["input"]:
        raise UsageError("--input is required")
    docs = []
    for p in cfg["input"]:
        docs.extend(read_reviews(_existing(p, "input"), domain))
    eval_sentences: set[str] = set()
    for p in cfg["eval_xml"]:
        eval_sentences |= semeval_sentences(_existing(p, "eval-xml"))
    kept, manifest = prepare_corpus(docs, eval_sentences, cfg["sentences"], derive_seed(cfg["seed"], "sample"))
    manifest.seed = cfg["seed"]
    write_docs(run_dir / "corpus.jsonl", kept)
    if cfg["vocab"]:
        vocab = Vocab.load(_existing(cfg["vocab"], "vocab"))
    else:
        # evaluation sentences join the vocabulary so ATSC inputs are not mapped to [UNK]
        sentences = [s for d in kept for s in d.sentences] + [s.split() for s in sorted(eval_sentences)]
        vocab = build_vocab(sentences, cfg["vocab_size"])
    vocab.save(run_dir / "vocab.txt")
    policy = MaskingPolicy()
    shard_stats = []
    for epoch in range(cfg["epochs"]):
        seed = derive_seed(cfg["seed"], f"shard-{epoch}")
        examples = generate_examples(kept, vocab, policy, seed, cfg["max_len"], cfg["num_shards"], cfg["workers"])
        stats = write_shard(run_dir / f"shard_{epoch:03d}.bin", examples, vocab, cfg["max_len"], policy, seed)
        shard_stats.append({"file": f"shard_{epoch:03d}.bin", **stats})
    out = {**manifest.to_dict(), "eval_sentences": len(eval_sentences), "vocab_size": vocab.size,
           "vocab_hash": vocab.hash, "shards": shard_stats}
    (run_dir / "manifest.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    log.info("kept %d reviews / %d sentences", manifest.doc_count, manifest.sentence_count)


def cmd_init_model(cfg, run_dir: Path) -> None:
    vocab = _load_vocab(cfg)
    config = EncoderConfig(cfg["layers"], cfg["hidden"], cfg["heads"], cfg["ff"], vocab.size, cfg["max_len"])
    model = EncoderModel(config, seed=derive_seed(cfg["seed"], "init"))
    save_checkpoint(run_dir / "model.ckpt", model, meta={"vocab_hash": vocab.hash, "seed": cfg["seed"]})


def cmd_lm_finetune(cfg, run_dir: Path) -> None:
    vocab = _load_vocab(cfg)
    model = _load_model(cfg["init"])
    if not cfg["shards"]:
        raise UsageError("--shards is required")
    shards = [_existing(p, "shards") for p in cfg["shards"]]
    spec = FinetuneRunSpec(cfg["domain"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                           max_sentences=cfg["max_sentences"], snapshots=cfg["snapshots"], seed=cfg["seed"])
    result = lm_finetune(model, spec, shards, vocab, run_dir=run_dir)
    save_checkpoint(run_dir / "model.ckpt", result.model, result.state,
                    meta={"vocab_hash": vocab.hash, "seed": cfg["seed"], "domain": spec.domain.value})


def cmd_train_atsc(cfg, run_dir: Path) -> None:
    vocab = _load_vocab(cfg)
    model = _load_model(cfg["init"])
    domain = Domain.parse(cfg["domain"])
    dataset = _read_xml(cfg["train"], "train", split="train")
    spec = AtscRunSpec(domain, epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
                       init_checkpoint=cfg["init"], val_fraction=cfg["val_fraction"], max_len=cfg["max_len"])
    result = train_atsc(model, spec, dataset, vocab, run_dir=run_dir)
    save_checkpoint(run_dir / "model.ckpt", result.model,
                    meta={"vocab_hash": vocab.hash, "seed": cfg["seed"], "domain": domain.value})


class CheckpointTrainer:
    """Trainer for run_matrix / learning_curve backed by train_atsc."""

    def __init__(self, vocab: Vocab, epochs: int, batch_size: int, lr: float, max_len: int):
        self.vocab, self.epochs, self.batch_size, self.lr, self.max_len = vocab, epochs, batch_size, lr, max_len

    def __call__(self, lm_key, lm_model, d_train, train, seed):
        spec = AtscRunSpec(d_train, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=seed,
                           val_fraction=0.0, max_len=self.max_len)
        return ModelPredictor(train_atsc(lm_model, spec, train, self.vocab).model, self.vocab, self.max_len)


class ModelPredictor:
    def __init__(self, model, vocab, max_len):
        self.model, self.vocab, self.max_len = model, vocab, max_len

    def __call__(self, examples):
        return predict_labels(self.model, examples, self.vocab, max_len=self.max_len)


class StubTrainer:
    """Seeded random predictions; exercises the matrix plumbing without any training."""

    def __call__(self, lm_key, lm_model, d_train, train, seed):
        name = "base" if lm_key is None else Domain.parse(lm_key).value
        return StubPredictor(derive_seed(seed, f"stub-{name}-{Domain.parse(d_train).value}"))


class StubPredictor:
    def __init__(self, seed: int):
        self.seed = seed

    def __call__(self, examples):
        return [random.Random(f"{self.seed}:{ex.sentence_id}:{ex.target_start}").randrange(3) for ex in examples]


def _lm_entries(cfg, stub: bool) -> dict[Domain | None, object]:
    entries = {}
    for item in cfg["lm"]:
        key, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--lm entries look like domain=path, got {item!r}")
        domain = None if key.strip() == "base" else Domain.parse(key)
        entries[domain] = path.strip() if stub else _load_model(path.strip(), "lm")
    if not entries:
        if not stub:
            raise UsageError("--lm is required")
        entries = {d: None for d in (Domain.LAPTOPS, Domain.RESTAURANTS, Domain.JOINT)}
    return entries


def _matrix_datasets(cfg, stub: bool):
    names = ("train_laptops", "test_laptops", "train_restaurants", "test_restaurants")
    if stub and not any(cfg[n] for n in names):
        return {d: (atsc_dataset(d, 30, derive_seed(cfg["seed"], f"stub-train-{d.value}"), "train"),
                    atsc_dataset(d, 30, derive_seed(cfg["seed"], f"stub-test-{d.value}"), "test"))
                for d in SINGLE_DOMAINS}
    out = {}
    for d in SINGLE_DOMAINS:
        train = _read_xml([cfg[f"train_{d.value}"]], f"train-{d.value}", d, "train")
        test = _read_xml([cfg[f"test_{d.value}"]], f"test-{d.value}", d, "test")
        out[d] = (train, test)
    return out


def cmd_eval_matrix(cfg, run_dir: Path) -> None:
    from .reporting import render_table, write_runs_tsv, write_summary_tsv

    stub = cfg["stub"]
    lms = _lm_entries(cfg, stub)
    datasets = _matrix_datasets(cfg, stub)
    if stub:
        trainer = StubTrainer()
        # the stub never touches model weights; keep the keys so every LM row is produced
        lms = {k: "stub" for k in lms}
    else:
        trainer = CheckpointTrainer(_load_vocab(cfg), cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["max_len"])
    matrix = run_matrix(lms, datasets, cfg["seeds"], trainer, workers=cfg["workers"])
    write_runs_tsv(run_dir / "runs.tsv", matrix, seed=cfg["seed"])
    write_summary_tsv(run_dir / "summary.tsv", matrix, seed=cfg["seed"])
    (run_dir / "table.txt").write_text(f"# seed={cfg['seed']}\n" + render_table(matrix))


def cmd_learning_curve(cfg, run_dir: Path) -> None:
    from .reporting import write_curve_tsv

    snap_dir = _existing(cfg["snapshots_dir"], "snapshots-dir")
    files = sorted(snap_dir.glob("snapshot_*.ckpt"))
    if not files:
        raise UsageError(f"no snapshot_*.ckpt files in {snap_dir}")
    snapshots = [(int(f.stem.split("_")[1]), load_checkpoint(f).model) for f in files]
    train = _read_xml(cfg["train"], "train", split="train")
    test = _read_xml(cfg["test"], "test", split="test")
    trainer = CheckpointTrainer(_load_vocab(cfg), cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["max_len"])
    points = learning_curve(snapshots, train, test, cfg["seeds"], trainer)
    write_curve_tsv(run_dir / "curve.tsv", {cfg["name"]: points}, seed=cfg["seed"])


def _target_span(tokens: list[str], target: str) -> tuple[int, int]:
    want = word_tokens(target)
    for i in range(len(tokens) - len(want) + 1):
        if tokens[i:i + len(want)] == want:
            return i, len(want)
    raise UsageError(f"target {target!r} does not occur in the sentence")


def cmd_explain(cfg, run_dir: Path) -> None:
    from .interpret import ModelScorer, reduce_input, render_trace

    vocab = _load_vocab(cfg)
    model = _load_model(cfg["checkpoint"], "checkpoint")
    model.eval()
    if cfg["input"]:
        items = [(ex.sentence_id, ex.tokens, ex.target_span) for ex in _read_xml([cfg["input"]], "input")]
    elif cfg["sentence"]:
        tokens = word_tokens(cfg["sentence"])
        if not cfg["target"]:
            raise UsageError("--target is required with --sentence")
        items = [("sentence", tokens, _target_span(tokens, cfg["target"]))]
    else:
        raise UsageError("give --sentence/--target or --input")
    scorer = ModelScorer(model, vocab, cfg["max_len"])
    with open(run_dir / "traces.txt", "w") as fh:
        fh.write(f"# seed={cfg['seed']}\n")
        for example_id, tokens, span in items:
            fh.write(render_trace(reduce_input(scorer, tokens, span), example_id))


def cmd_report(cfg, run_dir: Path) -> None:
    from .evaluation import MatrixResult
    from .reporting import read_curve_tsv, read_runs_tsv, render_curve_svg, render_table

    if not cfg["runs"] and not cfg["curves"]:
        raise UsageError("give --runs and/or --curves")
    cells = {}
    for d in cfg["runs"]:
        for res in read_runs_tsv(Path(d) / "runs.tsv").results:
            key = (res.spec.d_lm, res.spec.d_train, res.spec.d_test)
            if key in cells:
                cells[key].seeds += res.seeds
                cells[key].accuracies += res.accuracies
                cells[key].macro_f1s += res.macro_f1s
            else:
                cells[key] = res
    if cells:
        table = render_table(MatrixResult(list(cells.values())))
        (run_dir / "table.txt").write_text(f"# seed={cfg['seed']}\n" + table)
        print(table, end="")
    series = {}
    for d in cfg["curves"]:
        series.update(read_curve_tsv(Path(d) / "curve.tsv"))
    if series:
        svg = render_curve_svg(series, title=cfg["title"])
        (run_dir / "curve.svg").write_text(svg.replace("<svg ", f"<!-- seed={cfg['seed']} -->\n<svg ", 1))


def cmd_make_synthetic(cfg, run_dir: Path) -> None:
    domain = Domain.parse(cfg["domain"])
    docs = domain_corpus(domain, cfg["reviews"], derive_seed(cfg["seed"], "reviews"))
    with open(run_dir / "reviews.jsonl", "w") as fh:
        for doc in docs:
            fh.write(json.dumps({"id": doc.doc_id, "text": review_text(doc)}) + "\n")
    for split in ("train", "test"):
        examples = atsc_dataset(domain, cfg[split], derive_seed(cfg["seed"], split), split)
        rows = []
        for ex in examples:
            text = " ".join(ex.tokens)
            start = len(" ".join(ex.tokens[:ex.target_start])) + (1 if ex.target_start else 0)
            term = " ".join(ex.target)
            rows.append((text, [(term, ex.label.name.lower(), start, start + len(term))]))
        write_semeval_xml(run_dir / f"{domain.value}_{split}.xml", rows)


HANDLERS = {
    "prepare-corpus": cmd_prepare_corpus, "init-model": cmd_init_model, "lm-finetune": cmd_lm_finetune,
    "train-atsc": cmd_train_atsc, "eval-matrix": cmd_eval_matrix, "learning-curve": cmd_learning_curve,
    "explain": cmd_explain, "report": cmd_report, "make-synthetic": cmd_make_synthetic,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run_dir = Path(args.run_dir)
    try:
        config = resolve_config(args.command, args)
        if (run_dir / COMPLETE_MARKER).exists() and not args.force:
            raise UsageError(f"{run_dir} holds a completed run; pass --force to overwrite")
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / COMPLETE_MARKER).unlink(missing_ok=True)
        write_config(run_dir, args.command, config)
        HANDLERS[args.command](config, run_dir)
    except (UsageError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AtscError, ValueError) as exc:
        print(f"error: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    (run_dir / COMPLETE_MARKER).write_text(f"{args.command}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
