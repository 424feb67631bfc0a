"""Input reduction: per-word importance and greedy word removal with the aspect target pinned."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import IndexInTarget, IndexOutOfRange
from .text import AtscExample, Domain, Polarity, Vocab

# scorer(tokens, (target_start, target_len)) -> probabilities over (positive, negative, neutral)
Scorer = Callable[[Sequence[str], tuple[int, int]], Sequence[float]]


class ModelScorer:
    """Adapts an encoder + vocab to the scorer interface."""

    def __init__(self, model, vocab: Vocab, max_len: int | None = None):
        self.model = model
        self.vocab = vocab
        self.max_len = max_len

    def __call__(self, tokens: Sequence[str], target_span: tuple[int, int]) -> np.ndarray:
        from .training import predict_proba

        ex = AtscExample(list(tokens), target_span[0], target_span[1], Polarity.NEUTRAL, Domain.LAPTOPS)
        return predict_proba(self.model, [ex], self.vocab, max_len=self.max_len)[0]


def _delete(tokens: Sequence[str], target_span: tuple[int, int], i: int) -> tuple[list[str], tuple[int, int]]:
    start, length = target_span
    return list(tokens[:i]) + list(tokens[i + 1:]), (start - 1 if i < start else start, length)


def importance(model: Scorer, tokens: Sequence[str], target_span: tuple[int, int], i: int,
               label: int | None = None) -> float:
    """p(y|x) - p(y|x without token i); y defaults to the model's label on the full input."""
    start, length = target_span
    if not 0 <= i < len(tokens):
        raise IndexOutOfRange(f"index {i} outside 0..{len(tokens) - 1}")
    if start <= i < start + length:
        raise IndexInTarget(f"index {i} is part of the aspect target")
    p = np.asarray(model(tokens, target_span), dtype=float)
    y = int(np.argmax(p)) if label is None else label
    reduced, span = _delete(tokens, target_span, i)
    return float(p[y] - np.asarray(model(reduced, span), dtype=float)[y])


@dataclass
class ReductionStep:
    removed_index: int  # index into the original token list
    importance: float
    probability: float  # p(y) after the removal


@dataclass
class ReductionTrace:
    tokens: list[str]
    target_span: tuple[int, int]
    label: int
    probability: float
    steps: list[ReductionStep] = field(default_factory=list)
    reduced_set: list[int] = field(default_factory=list)
    flipped_label: int | None = None

    @property
    def low_confidence(self) -> bool:
        return self.probability < 0.5

    @property
    def target_indices(self) -> range:
        return range(self.target_span[0], self.target_span[0] + self.target_span[1])

    def surviving_tokens(self) -> list[str]:
        return [self.tokens[i] for i in self.reduced_set]


def reduce_input(model: Scorer, tokens: Sequence[str], target_span: tuple[int, int]) -> ReductionTrace:
    """Repeatedly delete the least important non-target word until the label changes.

    Importance is recomputed against the current reduced sentence at every iteration; equal
    importances go to the leftmost word.  If the label never changes the trace ends with only the
    target left and `flipped_label` is None.
    """
    tokens = list(tokens)
    start, length = target_span
    p = np.asarray(model(tokens, target_span), dtype=float)
    y = int(np.argmax(p))
    trace = ReductionTrace(tokens, (start, length), y, float(p[y]))
    survivors = list(range(len(tokens)))
    target = set(range(start, start + length))
    while True:
        removable = [k for k in survivors if k not in target]
        if not removable:
            break
        cur = [tokens[k] for k in survivors]
        span = (survivors.index(start), length)
        p_cur = float(np.asarray(model(cur, span), dtype=float)[y])
        best = None
        for k in removable:
            reduced, rspan = _delete(cur, span, survivors.index(k))
            q = np.asarray(model(reduced, rspan), dtype=float)
            g = p_cur - float(q[y])
            if best is None or g < best[1]:
                best = (k, g, q)
        k, g, q = best
        trace.steps.append(ReductionStep(k, g, float(q[y])))
        before = list(survivors)
        survivors.remove(k)
        new_label = int(np.argmax(q))
        if new_label != y:
            trace.reduced_set = before
            trace.flipped_label = new_label
            return trace
    trace.reduced_set = survivors
    return trace


def render_trace(trace: ReductionTrace, example_id: str = "") -> str:
    """Text record; surviving words are wrapped in underscores."""
    keep = set(trace.reduced_set)
    marked = " ".join(f"_{t}_" if i in keep else t for i, t in enumerate(trace.tokens))
    t0, tl = trace.target_span
    flipped = "none" if trace.flipped_label is None else Polarity(trace.flipped_label).name.lower()
    lines = [
        f"example: {example_id}",
        f"sentence: {' '.join(trace.tokens)}",
        f"target: {' '.join(trace.tokens[t0:t0 + tl])}",
        f"target_span: {t0} {tl}",
        f"label: {Polarity(trace.label).name.lower()}",
        f"probability: {trace.probability!r}",
        f"low_confidence: {str(trace.low_confidence).lower()}",
        "steps:",
    ]
    for n, s in enumerate(trace.steps, 1):
        lines.append(f"  {n}\t{s.removed_index}\t{trace.tokens[s.removed_index]}\t{s.importance!r}\t{s.probability!r}")
    lines += [f"reduced: {marked}", f"reduced_set: {' '.join(map(str, trace.reduced_set))}",
              f"flipped_label: {flipped}", ""]
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> list[ReductionTrace]:
    traces = []
    for block in text.strip().split("\n\n"):
        fields: dict[str, str] = {}
        steps = []
        for line in block.split("\n"):
            if line.startswith("  "):
                _, idx, _, g, prob = line.strip().split("\t")
                steps.append(ReductionStep(int(idx), float(g), float(prob)))
            elif ": " in line or line.endswith(":"):
                key, _, value = line.partition(":")
                fields[key] = value.strip()
        start, length = map(int, fields["target_span"].split())
        flipped = None if fields["flipped_label"] == "none" else int(Polarity.parse(fields["flipped_label"]))
        traces.append(ReductionTrace(fields["sentence"].split(" "), (start, length), int(Polarity.parse(fields["label"])),
                                     float(fields["probability"]), steps,
                                     [int(i) for i in fields["reduced_set"].split()], flipped))
    return traces
