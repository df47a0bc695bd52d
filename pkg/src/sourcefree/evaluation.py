"""Open-set prediction, per-class metrics, SSM diagnostics, one-shot recognition and the category-gap grid."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from sourcefree.errors import ConfigurationError, DataError
from sourcefree.labels import LabelSpace, make_label_space

log = logging.getLogger(__name__)

UNKNOWN = "unknown"


def predict_with_unknown(logits, num_positive: int):
    """Argmax over all K outputs (ties to the lowest index); negative outputs mean ``"unknown"``."""
    k = int(np.argmax(np.asarray(logits)))
    return k if k < num_positive else UNKNOWN


def predict_indices(logits, num_positive: int) -> np.ndarray:
    """Vectorised :func:`predict_with_unknown`: output index per row, -1 for unknown."""
    k = np.argmax(np.asarray(logits), axis=-1)
    return np.where(k < num_positive, k, -1)


@dataclass
class PredictionRecord:
    sample_id: str
    predicted: int | str  # universe class id or "unknown"
    true_label: int
    ssm: tuple[float, float] | None = None


def records_from_logits(logits, true_labels, label_space: LabelSpace, ids=None, ssm=None) -> list[PredictionRecord]:
    """Map output indices to universe class ids (output ``k`` is ``source_labels[k]``)."""
    idx = predict_indices(logits, label_space.num_source)
    ids = ids if ids is not None else [str(k) for k in range(len(idx))]
    out = []
    for n, (k, y) in enumerate(zip(idx, true_labels)):
        pred = label_space.source_labels[k] if k >= 0 else UNKNOWN
        s = (float(ssm[0][n]), float(ssm[1][n])) if ssm is not None else None
        out.append(PredictionRecord(ids[n], pred, int(y), s))
    return out


@dataclass
class MetricReport:
    t_avg: float
    t_unk: float | None  # None when the target has no private samples
    per_class: dict = field(default_factory=dict)  # class id or "unknown" -> accuracy
    counts: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, int, float]]:
        return [(str(k), self.counts[k], self.per_class[k]) for k in self.per_class]

    def to_dict(self) -> dict:
        return {
            "t_avg": self.t_avg,
            "t_unk": self.t_unk,
            "classes": [{"class": c, "count": n, "accuracy": a} for c, n, a in self.rows()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        def key(c):
            return c if c == UNKNOWN else int(c)

        per = {key(r["class"]): r["accuracy"] for r in d["classes"]}
        counts = {key(r["class"]): r["count"] for r in d["classes"]}
        return cls(d["t_avg"], d["t_unk"], per, counts)


def evaluate(predictions: Sequence[PredictionRecord], label_space: LabelSpace) -> MetricReport:
    """Per-class accuracy over shared classes present in the target plus one pooled ``unknown`` row.

    Target-private truths are remapped to ``unknown``; classes without samples
    are left out of the average.
    """
    if not label_space.target_labels:
        raise ConfigurationError("evaluation needs the target label set")
    shared = set(label_space.shared)
    private = set(label_space.target_private)
    hits: dict = {}
    counts: dict = {}
    for r in predictions:
        if r.true_label in private:
            truth = UNKNOWN
        elif r.true_label in shared:
            truth = r.true_label
        else:
            raise DataError(f"sample {r.sample_id}: label {r.true_label} is outside the target label set")
        counts[truth] = counts.get(truth, 0) + 1
        hits[truth] = hits.get(truth, 0) + int(r.predicted == truth)
    order = [c for c in label_space.shared if c in counts] + ([UNKNOWN] if UNKNOWN in counts else [])
    per_class = {c: hits[c] / counts[c] for c in order}
    if not per_class:
        raise DataError("no evaluable target samples")
    t_avg = sum(per_class.values()) / len(per_class)
    return MetricReport(t_avg, per_class.get(UNKNOWN), per_class, {c: counts[c] for c in order})


def write_report(report: MetricReport, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
    """``<stem>.json`` (structured) and ``<stem>.csv`` (class,count,accuracy)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / f"{stem}.json"
    js.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path = out_dir / f"{stem}.csv"
    lines = ["class,count,accuracy"] + [f"{c},{n},{a:.6f}" for c, n, a in report.rows()]
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return js, csv_path


def confusion_table(predictions: Sequence[PredictionRecord], label_space: LabelSpace) -> tuple[list, list, np.ndarray]:
    """Counts of (true label, prediction); rows follow the target label order."""
    rows = list(label_space.target_labels)
    cols = list(label_space.source_labels) + [UNKNOWN]
    table = np.zeros((len(rows), len(cols)), dtype=np.int64)
    ri = {c: k for k, c in enumerate(rows)}
    ci = {c: k for k, c in enumerate(cols)}
    for r in predictions:
        table[ri[r.true_label], ci[r.predicted]] += 1
    return rows, cols, table


@dataclass
class SsmHistogram:
    edges: np.ndarray
    counts: dict[str, np.ndarray]
    means: dict[str, float]


def ssm_histogram(populations: Mapping[str, Iterable[float]], bins: int = 20) -> SsmHistogram:
    """Counts over fixed bins spanning [1, e] plus population means."""
    edges = np.linspace(1.0, math.e, bins + 1)
    counts, means = {}, {}
    for name, values in populations.items():
        v = np.asarray(list(values), dtype=np.float64)
        counts[name] = np.histogram(np.clip(v, 1.0, math.e), bins=edges)[0]
        means[name] = float(v.mean()) if v.size else float("nan")
    return SsmHistogram(edges, counts, means)


def nearest_center_accuracy(centers, center_labels, probes, probe_labels) -> float:
    """Assign each probe the label of its Euclidean-nearest center."""
    center_labels = list(center_labels)
    if len(set(center_labels)) != len(center_labels):
        raise ConfigurationError("one-shot samples must cover each class exactly once")
    centers = np.asarray(centers, dtype=np.float64)
    probes = np.asarray(probes, dtype=np.float64)
    d = ((probes[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    assigned = np.asarray(center_labels)[np.argmin(d, axis=1)]
    return float((assigned == np.asarray(probe_labels)).mean())


def one_shot_recognition(model, support_x, support_y, probe_x, probe_y) -> float:
    """Nearest one-shot center in the adapted embedding ``Ft(M(x))``."""
    import torch

    with torch.no_grad():
        centers = model.embed(support_x).double().numpy()
        probes = model.embed(probe_x).double().numpy()
    return nearest_center_accuracy(centers, np.asarray(support_y), probes, np.asarray(probe_y))


def gap_label_space(universe: int, source_private: int, target_private: int) -> LabelSpace | None:
    """Universe classes laid out as [source-private | shared | target-private]; None when infeasible."""
    shared = universe - source_private - target_private
    if source_private < 0 or target_private < 0 or shared < 0 or source_private + shared < 2:
        return None
    source = range(0, source_private + shared)
    target = range(source_private, universe)
    return make_label_space(source, target)


@dataclass
class GridResult:
    source_private: list[int]
    target_private: list[int]
    t_avg: np.ndarray  # rows: source-private counts, cols: target-private counts; nan where infeasible
    reports: dict = field(default_factory=dict)  # (i, j) -> MetricReport or None

    def to_rows(self) -> list[list[str]]:
        header = ["source_private\\target_private"] + [str(t) for t in self.target_private]
        rows = [header]
        for i, s in enumerate(self.source_private):
            rows.append([str(s)] + ["infeasible" if math.isnan(v) else f"{v:.6f}" for v in self.t_avg[i]])
        return rows


def category_gap_grid(
    universe: int,
    source_private: Sequence[int],
    target_private: Sequence[int],
    runner: Callable[[LabelSpace, int], MetricReport],
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> GridResult:
    """Run ``runner(label_space, cell_seed)`` for every feasible cell.

    With ``out_dir`` each finished cell is stored as ``cell_<sp>_<tp>.json``
    and reused on the next call, so an interrupted grid resumes where it
    stopped.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    grid = np.full((len(source_private), len(target_private)), np.nan)
    reports = {}
    for i, sp in enumerate(source_private):
        for j, tp in enumerate(target_private):
            ls = gap_label_space(universe, sp, tp)
            if ls is None:
                reports[(sp, tp)] = None
                continue
            cell = out / f"cell_{sp}_{tp}.json" if out is not None else None
            if cell is not None and cell.exists():
                report = MetricReport.from_dict(json.loads(cell.read_text(encoding="utf-8")))
                log.info("cell (%d, %d) already done", sp, tp)
            else:
                report = runner(ls, seed)
                if cell is not None:
                    tmp = cell.with_suffix(".tmp")
                    tmp.write_text(json.dumps(report.to_dict(), sort_keys=True), encoding="utf-8")
                    tmp.replace(cell)
            reports[(sp, tp)] = report
            grid[i, j] = report.t_avg
    return GridResult(list(source_private), list(target_private), grid, reports)
