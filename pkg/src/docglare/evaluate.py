"""Block-level detection metrics, threshold sweeps and timing benchmarks."""
from __future__ import annotations

import csv
import io
import json
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_THRESHOLD = 0.9
THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(21))


def threshold_heatmap(heatmap, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where the probability is strictly above ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold {t} outside [0, 1]")
    return (np.asarray(heatmap) > t).astype(np.uint8)


def confusion(pred, target) -> tuple[int, int, int]:
    pred, target = np.asarray(pred).astype(bool), np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    tp = int((pred & target).sum())
    return tp, int((pred & ~target).sum()), int((~pred & target).sum())


def prf_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    if tp + fp == 0:
        precision = 1.0 if fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f


def prf(pred, target) -> tuple[float, float, float]:
    """Precision, recall and F-measure of a binary block prediction."""
    return prf_from_counts(*confusion(pred, target))


@dataclass
class SweepRow:
    threshold: float
    precision: float
    recall: float
    f_measure: float


@dataclass
class EvalReport:
    rows: list[SweepRow] = field(default_factory=list)
    parameter_count: int = 0
    timings: dict[str, float] = field(default_factory=dict)
    environment: str = ""

    @property
    def best(self) -> SweepRow:
        # ties go to the lowest threshold
        return max(self.rows, key=lambda r: (r.f_measure, -r.threshold))

    @property
    def best_f(self) -> float:
        return self.best.f_measure

    def at(self, t: float) -> SweepRow:
        for r in self.rows:
            if abs(r.threshold - t) < 1e-9:
                return r
        raise KeyError(t)

    def to_dict(self) -> dict:
        d = {"rows": [asdict(r) for r in self.rows], "parameter_count": self.parameter_count,
             "timings": dict(self.timings), "environment": self.environment}
        if self.rows:
            d["best_f"] = self.best.f_measure
            d["best_threshold"] = self.best.threshold
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls([SweepRow(**r) for r in d["rows"]], d["parameter_count"],
                   d["timings"], d["environment"])

    def to_table(self) -> str:
        lines = [f"{'threshold':>9}  {'precision':>9}  {'recall':>9}  {'f':>9}"]
        for r in self.rows:
            lines.append(f"{r.threshold:9.2f}  {r.precision:9.4f}  {r.recall:9.4f}  {r.f_measure:9.4f}")
        if self.rows:
            b = self.best
            lines.append(f"best F {b.f_measure:.4f} at threshold {b.threshold:.2f}")
        if self.parameter_count:
            lines.append(f"parameters {self.parameter_count}")
        for k, v in self.timings.items():
            lines.append(f"{k} {v:.1f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall", "f_measure"])
        for r in self.rows:
            w.writerow([r.threshold, r.precision, r.recall, r.f_measure])
        return buf.getvalue()


def sweep(heatmaps, targets, thresholds=THRESHOLDS) -> EvalReport:
    """Micro-averaged P/R/F over one or many (heatmap, target) grids per threshold."""
    if isinstance(heatmaps, np.ndarray):
        heatmaps, targets = [heatmaps], [targets]
    h = np.concatenate([np.asarray(x, np.float64).ravel() for x in heatmaps])
    t = np.concatenate([np.asarray(x).ravel() for x in targets])
    if h.shape != t.shape:
        raise ValueError("heatmaps and targets differ in size")
    rows = []
    for thr in thresholds:
        p, r, f = prf(threshold_heatmap(h, thr), t)
        rows.append(SweepRow(float(thr), p, r, f))
    return EvalReport(rows)


def environment() -> str:
    return f"{platform.processor() or platform.machine()} | {platform.platform()} | " \
           f"python {platform.python_version()} | numpy {np.__version__}"


@dataclass
class BenchResult:
    feature_ms: float
    forward_ms: float
    total_ms: float
    runs: list[dict]
    environment: str
    output: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"feature_ms": self.feature_ms, "forward_ms": self.forward_ms,
                "total_ms": self.total_ms, "runs": self.runs, "environment": self.environment}


def bench(extract, forward, img, repeats: int = 5) -> BenchResult:
    """Median wall-clock per stage of ``forward(extract(img))``.

    Outputs of all runs must be bit-identical; otherwise a RuntimeError is raised.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    runs, first = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        feats = extract(img)
        t1 = time.perf_counter()
        out = forward(feats)
        t2 = time.perf_counter()
        fe, fw = (t1 - t0) * 1e3, (t2 - t1) * 1e3
        runs.append({"feature_ms": fe, "forward_ms": fw, "total_ms": fe + fw})
        if first is None:
            first = np.array(out, copy=True)
        elif not np.array_equal(first, out):
            raise RuntimeError("benchmark outputs differ between runs")
    # stage times come from the median-total run so they add up
    mid = sorted(runs, key=lambda r: r["total_ms"])[len(runs) // 2]
    return BenchResult(mid["feature_ms"], mid["forward_ms"], mid["total_ms"], runs, environment(), first)
