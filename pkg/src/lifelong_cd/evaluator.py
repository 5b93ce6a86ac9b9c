"""Pixelwise precision / recall / F-score and comparison reports."""
import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import imaging
from .errors import InsufficientDataError, InvalidInputError

PER_IMAGE = "per_image"
AGGREGATE = "aggregate"

CSV_FIELDS = ("run_id", "method", "workspace", "group", "tp", "fp", "fn", "tn", "P", "R", "F")


@dataclass(frozen=True)
class MetricsRecord:
    tp: int
    fp: int
    fn: int
    tn: int
    scope: str = PER_IMAGE
    run_id: str = ""
    method_tag: str = ""
    workspace: str = ""
    group: str = ""

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f_score(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def pixel_metrics(pred, gt, **tags):
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return MetricsRecord(tp, fp, fn, tn, PER_IMAGE, **tags)


def aggregate(records, **tags):
    """Micro aggregate: sum the pixel counts, then derive the rates."""
    if not records:
        raise InsufficientDataError("nothing to aggregate")
    first = records[0]
    base = dict(run_id=first.run_id, method_tag=first.method_tag, workspace=first.workspace,
                group=first.group)
    base.update(tags)
    return MetricsRecord(sum(r.tp for r in records), sum(r.fp for r in records),
                         sum(r.fn for r in records), sum(r.tn for r in records), AGGREGATE, **base)


def macro_f(records):
    if not records:
        raise InsufficientDataError("nothing to average")
    return float(np.mean([r.f_score for r in records]))


@dataclass
class ComparisonReport:
    cells: list
    methods: list
    fscores: dict
    macro: dict
    differences: dict
    wins: dict

    def to_markdown(self, title="F-score comparison"):
        out = io.StringIO()
        out.write(f"# {title}\n\n")
        out.write("| cell | " + " | ".join(self.methods) + " |\n")
        out.write("|---|" + "---:|" * len(self.methods) + "\n")
        for c in self.cells:
            vals = []
            for m in self.methods:
                f = self.fscores.get((c, m))
                vals.append("missing" if f is None else f"{100 * f:.1f}")
            out.write(f"| {c} | " + " | ".join(vals) + " |\n")
        if self.macro:
            out.write("\nPer-image macro mean F:\n\n")
            out.write("| cell | " + " | ".join(self.methods) + " |\n")
            out.write("|---|" + "---:|" * len(self.methods) + "\n")
            for c in self.cells:
                vals = ["missing" if self.macro.get((c, m)) is None else f"{100 * self.macro[(c, m)]:.1f}"
                        for m in self.methods]
                out.write(f"| {c} | " + " | ".join(vals) + " |\n")
        for (a, b), diffs in self.differences.items():
            out.write(f"\n## {b} vs {a}\n\n| cell | {a} | {b} | difference |\n|---|---:|---:|---:|\n")
            for c in self.cells:
                d = diffs.get(c)
                if d is None:
                    out.write(f"| {c} | missing | missing | missing |\n")
                    continue
                fa, fb = self.fscores[(c, a)], self.fscores[(c, b)]
                txt = f"{d:+.1f}"
                if d > 0:
                    txt = f"**{txt}**"
                out.write(f"| {c} | {100 * fa:.1f} | {100 * fb:.1f} | {txt} |\n")
            w = self.wins[(a, b)]
            out.write(f"\n{b} >= {a} in {w['ge']}/{w['n']} cells, strictly better in {w['gt']}; "
                      f"mean difference {w['mean']:+.2f} points\n")
        return out.getvalue()


def f_difference(base, other):
    """Difference in F-score percentage points, rounded to one decimal like a results table."""
    return round(100 * other.f_score - 100 * base.f_score, 1)


def compare_report(runs, pairs=None, macro=None):
    """Tabulate F-scores per cell and method, with pairwise differences and win counts.

    ``runs`` maps method tag to {cell: aggregate MetricsRecord}; ``pairs`` lists
    (baseline, method) comparisons, by default every method against the first.
    """
    methods = list(runs)
    if len(methods) < 2:
        raise InvalidInputError("a comparison needs at least two methods")
    cells = []
    for m in methods:
        for c in runs[m]:
            if c not in cells:
                cells.append(c)
    fscores = {(c, m): runs[m][c].f_score for m in methods for c in runs[m]}
    if pairs is None:
        pairs = [(methods[0], m) for m in methods[1:]]
    differences, wins = {}, {}
    for a, b in pairs:
        diffs = {c: f_difference(runs[a][c], runs[b][c]) for c in cells
                 if c in runs[a] and c in runs[b]}
        differences[(a, b)] = diffs
        exact = [runs[b][c].f_score - runs[a][c].f_score for c in diffs]
        wins[(a, b)] = {
            "n": len(diffs),
            "ge": sum(d >= 0 for d in exact),
            "gt": sum(d > 0 for d in exact),
            "mean": float(np.mean(list(diffs.values()))) if diffs else 0.0,
        }
    return ComparisonReport(cells, methods, fscores, dict(macro or {}), differences, wins)


def metrics_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.run_id, r.method_tag, r.workspace, r.group, r.tp, r.fp, r.fn, r.tn,
                    f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f_score:.6f}"])
    return buf.getvalue()


def write_metrics_csv(path, records):
    imaging.atomic_write_text(path, metrics_csv(records))


def read_metrics_csv(path):
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(MetricsRecord(int(row["tp"]), int(row["fp"]), int(row["fn"]), int(row["tn"]),
                                     AGGREGATE, row["run_id"], row["method"], row["workspace"],
                                     row["group"]))
    return out


def plot_report(report, directory):
    """Grouped bar chart of F-scores per cell; skipped when matplotlib is unavailable."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    x = np.arange(len(report.cells))
    width = 0.8 / len(report.methods)
    fig, ax = plt.subplots(figsize=(max(6, len(report.cells)), 3.5))
    for i, m in enumerate(report.methods):
        vals = [100 * report.fscores.get((c, m), np.nan) for c in report.cells]
        ax.bar(x + i * width, vals, width, label=m)
    ax.set_xticks(x + width * (len(report.methods) - 1) / 2)
    ax.set_xticklabels(report.cells)
    ax.set_ylabel("F-score")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = directory / "fscores.png"
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def tagged(record, **tags):
    return replace(record, **tags)
