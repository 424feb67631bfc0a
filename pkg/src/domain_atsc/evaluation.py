"""Metrics, the LM-domain x train-domain x test-domain matrix, seed aggregation and learning curves."""
from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .errors import EmptyInput, InsufficientRuns, MissingArtifact, MissingBaseline
from .text import SINGLE_DOMAINS, AtscExample, Domain, Polarity

NUM_CLASSES = len(Polarity)
DEFAULT_SEEDS = tuple(range(9))


def accuracy(predictions: Sequence[int], golds: Sequence[int]) -> float:
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    if not golds:
        raise EmptyInput("no examples")
    return sum(int(p) == int(g) for p, g in zip(predictions, golds)) / len(golds)


def confusion_matrix(predictions: Sequence[int], golds: Sequence[int]) -> list[list[int]]:
    """cm[gold][pred] counts."""
    cm = [[0] * NUM_CLASSES for _ in range(NUM_CLASSES)]
    for p, g in zip(predictions, golds):
        cm[int(g)][int(p)] += 1
    return cm


def macro_f1(predictions: Sequence[int], golds: Sequence[int]) -> float:
    """Unweighted mean of the three per-class F1 scores; an undefined F1 counts as 0."""
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    if not golds:
        raise EmptyInput("no examples")
    cm = confusion_matrix(predictions, golds)
    scores = []
    for c in range(NUM_CLASSES):
        tp = cm[c][c]
        pred_c = sum(cm[g][c] for g in range(NUM_CLASSES))
        gold_c = sum(cm[c])
        # 2tp / (|pred| + |gold|) is F1 without going through precision and recall
        scores.append(0.0 if pred_c + gold_c == 0 else 2 * tp / (pred_c + gold_c))
    return sum(scores) / NUM_CLASSES


class Category(str, enum.Enum):
    IN_DOMAIN = "InDomain"
    CROSS_DOMAIN = "CrossDomain"
    CROSS_DOMAIN_ADAPTATION = "CrossDomainAdaptation"
    JOINT_DOMAIN = "JointDomain"


def categorize_scenario(d_lm: Domain | str | None, d_train: Domain | str, d_test: Domain | str) -> Category:
    """`d_lm=None` stands for the encoder without LM finetuning (never an adaptation cell)."""
    d_lm = Domain.parse(d_lm) if d_lm is not None else None
    d_train, d_test = Domain.parse(d_train), Domain.parse(d_test)
    if d_test is Domain.JOINT:
        raise ValueError("test domain must be laptops or restaurants")
    if d_train is Domain.JOINT:
        return Category.JOINT_DOMAIN
    if d_train is d_test:
        return Category.IN_DOMAIN
    if d_lm is d_test:
        return Category.CROSS_DOMAIN_ADAPTATION
    return Category.CROSS_DOMAIN


@dataclass(frozen=True)
class ScenarioSpec:
    d_lm: Domain | None
    d_train: Domain
    d_test: Domain

    @property
    def category(self) -> Category:
        return categorize_scenario(self.d_lm, self.d_train, self.d_test)

    @property
    def lm_name(self) -> str:
        return "base" if self.d_lm is None else self.d_lm.value


def aggregate_runs(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample (n - 1) standard deviation."""
    n = len(values)
    if n < 2:
        raise InsufficientRuns(f"need at least 2 runs for a standard deviation, got {n}")
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    seeds: list[int] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    macro_f1s: list[float] = field(default_factory=list)

    def _agg(self, values: list[float]) -> tuple[float, float | None]:
        if len(values) >= 2:
            return aggregate_runs(values)
        if not values:
            raise EmptyInput("scenario has no runs")
        return values[0], None

    @property
    def accuracy(self) -> tuple[float, float | None]:
        return self._agg(self.accuracies)

    @property
    def macro_f1(self) -> tuple[float, float | None]:
        return self._agg(self.macro_f1s)


# trainer(lm_key, lm_model, d_train, train_examples, seed) -> predictor(examples) -> labels
Predictor = Callable[[Sequence[AtscExample]], Sequence[int]]
Trainer = Callable[..., Predictor]


def training_set(datasets: Mapping[Domain, tuple[Sequence[AtscExample], Sequence[AtscExample]]],
                 d_train: Domain) -> list[AtscExample]:
    if d_train is Domain.JOINT:
        # combined training data; shuffling happens inside the trainer
        return [ex for d in SINGLE_DOMAINS for ex in datasets[d][0]]
    return list(datasets[d_train][0])


def _run_cell(args) -> list[tuple[Domain, float, float]]:
    trainer, lm_key, lm_model, d_train, train, tests, seed = args
    predictor = trainer(lm_key, lm_model, d_train, train, seed)
    out = []
    for d_test, examples in tests:
        golds = [int(ex.label) for ex in examples]
        preds = [int(p) for p in predictor(examples)]
        out.append((d_test, accuracy(preds, golds), macro_f1(preds, golds)))
    return out


@dataclass
class MatrixResult:
    results: list[ScenarioResult]

    def rows(self) -> list[tuple]:
        out = []
        for r in self.results:
            for seed, acc, f1 in zip(r.seeds, r.accuracies, r.macro_f1s):
                out.append((r.spec.lm_name, r.spec.d_train.value, r.spec.d_test.value,
                            r.spec.category.value, seed, acc, f1))
        return out

    def get(self, d_lm: Domain | None, d_train: Domain, d_test: Domain) -> ScenarioResult:
        for r in self.results:
            if (r.spec.d_lm, r.spec.d_train, r.spec.d_test) == (d_lm, d_train, d_test):
                return r
        raise KeyError((d_lm, d_train, d_test))


def run_matrix(lm_models: Mapping[Domain | None, object],
               datasets: Mapping[Domain, tuple[Sequence[AtscExample], Sequence[AtscExample]]],
               seeds: Sequence[int], trainer: Trainer,
               train_domains: Sequence[Domain] = (Domain.LAPTOPS, Domain.RESTAURANTS, Domain.JOINT),
               workers: int = 1) -> MatrixResult:
    """Train every (LM, train domain) pair per seed and test it on both single domains.

    With the three finetuned LMs this yields the 3 x 3 x 2 = 18 cells of the results table; a
    `None` key adds rows for the encoder without LM finetuning.
    """
    for d in SINGLE_DOMAINS:
        if d not in datasets:
            raise MissingArtifact(f"no dataset for {d.value}")
    for key, model in lm_models.items():
        if model is None:
            raise MissingArtifact(f"no checkpoint for LM {key}")
    tests = [(d, list(datasets[d][1])) for d in SINGLE_DOMAINS]
    jobs, keys = [], []
    for lm_key, lm_model in lm_models.items():
        for d_train in train_domains:
            train = training_set(datasets, d_train)
            for seed in seeds:
                jobs.append((trainer, lm_key, lm_model, d_train, train, tests, seed))
                keys.append((lm_key, d_train, seed))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outputs = list(ex.map(_run_cell, jobs))
    else:
        outputs = [_run_cell(job) for job in jobs]
    cells: dict[tuple, ScenarioResult] = {}
    for (lm_key, d_train, seed), out in zip(keys, outputs):
        for d_test, acc, f1 in out:
            spec = ScenarioSpec(lm_key, d_train, d_test)
            res = cells.setdefault((lm_key, d_train, d_test), ScenarioResult(spec))
            res.seeds.append(seed)
            res.accuracies.append(acc)
            res.macro_f1s.append(f1)
    return MatrixResult(list(cells.values()))


@dataclass
class CurvePoint:
    sentences_seen: int
    mean_delta: float
    std_delta: float
    deltas: list[float]


def learning_curve(snapshots: Sequence[tuple[int, object]], train: Sequence[AtscExample],
                   test: Sequence[AtscExample], seeds: Sequence[int], trainer: Trainer,
                   d_train: Domain | None = None) -> list[CurvePoint]:
    """Accuracy gain of each snapshot over the 0-sentence snapshot, paired per seed."""
    snapshots = sorted(snapshots, key=lambda s: s[0])
    if not snapshots or snapshots[0][0] != 0:
        raise MissingBaseline("learning curve needs a snapshot at 0 sentences")
    d_train = d_train or (train[0].domain if train else Domain.LAPTOPS)
    golds = [int(ex.label) for ex in test]

    def acc(model, seed) -> float:
        return accuracy(trainer("snapshot", model, d_train, train, seed)(test), golds)

    base = {seed: acc(snapshots[0][1], seed) for seed in seeds}
    points = []
    for count, model in snapshots:
        deltas = [0.0 if count == 0 else acc(model, s) - base[s] for s in seeds]
        mean = math.fsum(deltas) / len(deltas)
        std = aggregate_runs(deltas)[1] if len(deltas) >= 2 else 0.0
        points.append(CurvePoint(count, mean, std, deltas))
    return points


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2
            i = j + 1
        return r
    rx, ry = ranks(x), ranks(y)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sx = math.sqrt(sum((a - mx) ** 2 for a in rx))
    sy = math.sqrt(sum((b - my) ** 2 for b in ry))
    return 0.0 if sx == 0 or sy == 0 else cov / (sx * sy)
