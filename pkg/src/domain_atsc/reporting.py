"""TSV files, the results table and the learning-curve SVG."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .errors import MissingArtifact
from .evaluation import Category, CurvePoint, MatrixResult, ScenarioResult, ScenarioSpec, categorize_scenario
from .text import SINGLE_DOMAINS, Domain

RUN_COLUMNS = ("d_lm", "d_train", "d_test", "category", "seed", "accuracy", "macro_f1")
SUMMARY_COLUMNS = ("d_lm", "d_train", "d_test", "category", "runs", "acc_mean", "acc_std", "mf1_mean", "mf1_std")

# Reference numbers from the published results table, in percent: per test domain the
# (In, Cross, Joint) cells as (Acc, MF1).  Reported for comparison, never computed here.
REFERENCE_RESULTS = {
    "SDGCN-BERT": {Domain.LAPTOPS: ((81.35, 78.34), None, None), Domain.RESTAURANTS: ((83.57, 76.47), None, None)},
    "AEN-BERT": {Domain.LAPTOPS: ((79.93, 76.31), None, None), Domain.RESTAURANTS: ((83.12, 73.76), None, None)},
    "BERT-SPC": {Domain.LAPTOPS: ((78.99, 75.03), None, None), Domain.RESTAURANTS: ((84.46, 76.98), None, None)},
    "BERT-PT": {Domain.LAPTOPS: ((78.07, 75.08), None, None), Domain.RESTAURANTS: ((84.95, 76.96), None, None)},
    "XLNet-base": {Domain.LAPTOPS: ((79.89, 77.78), (77.78, 72.24), (80.88, 76.92)),
                   Domain.RESTAURANTS: ((85.84, 78.35), (82.41, 72.98), (86.15, 78.93))},
    "BERT-base": {Domain.LAPTOPS: ((77.69, 72.60), (75.86, 70.78), (78.81, 74.47)),
                  Domain.RESTAURANTS: ((84.92, 76.93), (80.07, 69.93), (85.03, 77.35))},
    "BERT-ADA Lapt": {Domain.LAPTOPS: ((79.19, 74.18), (77.92, 72.99), (80.23, 75.77)),
                      Domain.RESTAURANTS: ((85.51, 78.09), (80.68, 72.93), (86.22, 79.79))},
    "BERT-ADA Rest": {Domain.LAPTOPS: ((78.60, 74.09), (76.16, 70.46), (79.14, 74.93)),
                      Domain.RESTAURANTS: ((87.14, 80.05), (83.68, 72.91), (87.89, 81.05))},
    "BERT-ADA Joint": {Domain.LAPTOPS: ((78.96, 74.18), (75.91, 69.84), (79.94, 78.74)),
                       Domain.RESTAURANTS: ((86.35, 78.89), (82.23, 73.03), (87.69, 81.20))},
}


def _other(d: Domain) -> Domain:
    return Domain.RESTAURANTS if d is Domain.LAPTOPS else Domain.LAPTOPS


def column_layout() -> list[tuple[Domain, str, Domain]]:
    """(test domain, train type, train domain) in results-table order."""
    cols = []
    for d_test in SINGLE_DOMAINS:
        cols += [(d_test, "In", d_test), (d_test, "Cross", _other(d_test)), (d_test, "Joint", Domain.JOINT)]
    return cols


def _fmt(value: float | None) -> str:
    return "" if value is None or (isinstance(value, float) and math.isnan(value)) else repr(float(value))


def write_runs_tsv(path: str | Path, matrix: MatrixResult, seed: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for row in matrix.rows():
            w.writerow([*row[:5], repr(row[5]), repr(row[6])])


def write_summary_tsv(path: str | Path, matrix: MatrixResult, seed: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in matrix.results:
            (am, asd), (fm, fsd) = r.accuracy, r.macro_f1
            w.writerow([r.spec.lm_name, r.spec.d_train.value, r.spec.d_test.value, r.spec.category.value,
                        len(r.seeds), _fmt(am), _fmt(asd), _fmt(fm), _fmt(fsd)])


def read_runs_tsv(path: str | Path) -> MatrixResult:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing {path}")
    cells: dict[tuple, ScenarioResult] = {}
    with open(path) as fh:
        rows = csv.DictReader((line for line in fh if not line.startswith("#")), delimiter="\t")
        for row in rows:
            d_lm = None if row["d_lm"] == "base" else Domain.parse(row["d_lm"])
            spec = ScenarioSpec(d_lm, Domain.parse(row["d_train"]), Domain.parse(row["d_test"]))
            res = cells.setdefault((spec.d_lm, spec.d_train, spec.d_test), ScenarioResult(spec))
            res.seeds.append(int(row["seed"]))
            res.accuracies.append(float(row["accuracy"]))
            res.macro_f1s.append(float(row["macro_f1"]))
    return MatrixResult(list(cells.values()))


def _cell_text(res: ScenarioResult | None) -> str:
    if res is None:
        return "-"
    (am, asd), (fm, fsd) = res.accuracy, res.macro_f1
    pm = lambda m, s: f"{100 * m:.2f}" + ("" if s is None else f"±{100 * s:.2f}")
    flag = "*" if res.spec.category is Category.CROSS_DOMAIN_ADAPTATION else ""
    return f"{flag}{pm(am, asd)} / {pm(fm, fsd)}"


def render_table(matrix: MatrixResult, include_reference: bool = True) -> str:
    """Plain-text table: rows are LM domains, columns In / Cross / Joint per test domain.

    Cells read "Acc / MF1" in percent (mean±std over seeds); `*` marks cross-domain adaptation
    cells, i.e. the LM was finetuned on the test domain.
    """
    lm_keys = []
    for r in matrix.results:
        if r.spec.d_lm not in lm_keys:
            lm_keys.append(r.spec.d_lm)
    lm_keys.sort(key=lambda k: -1 if k is None else [Domain.LAPTOPS, Domain.RESTAURANTS, Domain.JOINT].index(k))
    cols = column_layout()
    header = ["LM \\ test:train"] + [f"{t.short}:{kind}({tr.short})" for t, kind, tr in cols]
    lines = [header]
    for key in lm_keys:
        row = ["base" if key is None else f"ADA {key.short}"]
        for d_test, _, d_train in cols:
            try:
                res = matrix.get(key, d_train, d_test)
            except KeyError:
                res = None
            if res is not None:
                assert res.spec.category is categorize_scenario(key, d_train, d_test)
            row.append(_cell_text(res))
        lines.append(row)
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    out = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines]
    out.insert(1, "-" * len(out[0]))
    if include_reference:
        out += ["", "Reference values (published full-scale results, not computed here):"]
        for name, per_test in REFERENCE_RESULTS.items():
            cells = []
            for d_test in SINGLE_DOMAINS:
                for v in per_test[d_test]:
                    cells.append("-" if v is None else f"{v[0]:.2f} / {v[1]:.2f}")
            out.append(f"  [ref] {name}: " + " | ".join(cells))
    return "\n".join(out) + "\n"


def write_curve_tsv(path: str | Path, series: Mapping[str, Sequence[CurvePoint]], seed: int | None = None) -> None:
    with open(path, "w") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        fh.write("series\tsentences_seen\tmean_delta\tstd_delta\tdeltas\n")
        for name, points in series.items():
            for p in points:
                fh.write(f"{name}\t{p.sentences_seen}\t{p.mean_delta!r}\t{p.std_delta!r}\t"
                         + ",".join(repr(d) for d in p.deltas) + "\n")


def read_curve_tsv(path: str | Path) -> dict[str, list[CurvePoint]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing {path}")
    series: dict[str, list[CurvePoint]] = {}
    with open(path) as fh:
        for row in csv.DictReader((l for l in fh if not l.startswith("#")), delimiter="\t"):
            deltas = [float(x) for x in row["deltas"].split(",") if x]
            series.setdefault(row["series"], []).append(
                CurvePoint(int(row["sentences_seen"]), float(row["mean_delta"]), float(row["std_delta"]), deltas))
    return series


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def render_curve_svg(series: Mapping[str, Sequence[CurvePoint]], title: str = "",
                     width: int = 640, height: int = 400) -> str:
    """Mean accuracy gain vs. sentences seen, one line per series with a mean±std band and per-run marks."""
    margin = 60
    xs = [p.sentences_seen for pts in series.values() for p in pts] or [0, 1]
    ys = [v for pts in series.values() for p in pts
          for v in (p.mean_delta - p.std_delta, p.mean_delta + p.std_delta, *p.deltas)] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = min(ys + [0.0]), max(ys + [0.0])
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.01, y1 + 0.01

    def px(x: float) -> float:
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def py(y: float) -> float:
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<line x1="{margin}" y1="{py(0.0):.2f}" x2="{width - margin}" y2="{py(0.0):.2f}" stroke="#999"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="#000"/>',
             f'<text x="{width / 2:.1f}" y="{height - 15}" text-anchor="middle" font-size="12">sentences seen in LM finetuning</text>',
             f'<text x="15" y="{height / 2:.1f}" transform="rotate(-90 15 {height / 2:.1f})" text-anchor="middle" font-size="12">accuracy gain</text>',
             f'<text x="{margin}" y="{height - margin + 15}" font-size="10">{x0}</text>',
             f'<text x="{width - margin}" y="{height - margin + 15}" font-size="10" text-anchor="end">{x1}</text>',
             f'<text x="{margin - 5}" y="{py(y0):.2f}" font-size="10" text-anchor="end">{y0:.3f}</text>',
             f'<text x="{margin - 5}" y="{py(y1):.2f}" font-size="10" text-anchor="end">{y1:.3f}</text>']
    for k, (name, pts) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = sorted(pts, key=lambda p: p.sentences_seen)
        upper = [f"{px(p.sentences_seen):.2f},{py(p.mean_delta + p.std_delta):.2f}" for p in pts]
        lower = [f"{px(p.sentences_seen):.2f},{py(p.mean_delta - p.std_delta):.2f}" for p in reversed(pts)]
        mean = [f"{px(p.sentences_seen):.2f},{py(p.mean_delta):.2f}" for p in pts]
        parts.append(f'<g class="series" data-name="{escape(name)}">')
        parts.append(f'<polygon class="band" points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        parts.append(f'<polyline class="mean" points="{" ".join(mean)}" fill="none" stroke="{color}" stroke-width="2"/>')
        for p in pts:
            parts.append(f'<rect class="marker" x="{px(p.sentences_seen) - 3:.2f}" y="{py(p.mean_delta) - 3:.2f}" '
                         f'width="6" height="6" fill="{color}"/>')
            for d in p.deltas:
                cx, cy = px(p.sentences_seen), py(d)
                parts.append(f'<path class="run" d="M{cx - 3:.2f},{cy - 3:.2f}L{cx + 3:.2f},{cy + 3:.2f}'
                             f'M{cx - 3:.2f},{cy + 3:.2f}L{cx + 3:.2f},{cy - 3:.2f}" stroke="{color}"/>')
        parts.append(f'<text x="{width - margin + 5}" y="{margin + 15 * k}" font-size="11" fill="{color}">{escape(name)}</text>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
