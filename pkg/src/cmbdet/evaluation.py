"""Detection matching and metrics: sensitivity, precision, FP_avg, PR/AUC-PR, Dice, LA, EFP_avg.

AUC-PR uses the step rule ``sum_i (R_i - R_{i-1}) * P_i`` over the threshold
sweep ordered by increasing recall, starting from recall 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import DetectionCandidate
from .volume_io import CMBAnnotation, REGION_CODES, REGION_NAMES, Volume3D

CLASSES = REGION_NAMES[1:]


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (candidate index, annotation index)
    match_radius_mm: float = 5.0

    def __post_init__(self):
        assert self.tp == len(self.pairs)


def _centers(items) -> np.ndarray:
    pts = [it.center if hasattr(it, "center") else it for it in items]
    return np.asarray(pts, dtype=float).reshape(-1, 3)


def match_detections(cands: Sequence[DetectionCandidate], annotations, radius_mm: float = 5.0,
                     spacing=(1.0, 1.0, 1.0)) -> MatchResult:
    """Greedy score-ordered matching to the nearest unmatched annotation within ``radius_mm``.

    Candidate indices in ``pairs`` refer to the input order. Score ties break on
    the lexicographic center; distance ties break on the lower annotation index.
    """
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].score, tuple(cands[i].center)))
    sp = np.asarray(spacing, dtype=float)
    c_mm = _centers(cands) * sp
    a_mm = _centers(annotations) * sp
    taken = np.zeros(len(a_mm), dtype=bool)
    pairs = []
    for i in order:
        if not len(a_mm):
            break
        d = np.linalg.norm(a_mm - c_mm[i], axis=1)
        d[taken] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius_mm:
            taken[j] = True
            pairs.append((i, j))
    tp = len(pairs)
    return MatchResult(tp, len(cands) - tp, len(a_mm) - tp, pairs, radius_mm)


def detection_metrics(matches: Sequence[MatchResult]) -> tuple[float, float | None, float]:
    if not matches:
        raise ValueError("need at least one subject")
    tp = sum(m.tp for m in matches)
    fp = sum(m.fp for m in matches)
    fn = sum(m.fn for m in matches)
    sens = tp / (tp + fn) if tp + fn else 0.0
    prec = tp / (tp + fp) if tp + fp else None
    return sens, prec, fp / len(matches)


@dataclass
class CurvePoint:
    threshold: float
    precision: float
    recall: float
    fp_avg: float
    tp: int
    fp: int
    fn: int


def pr_curve(subject_cands: Sequence[Sequence[DetectionCandidate]], subject_annotations,
             radius_mm: float = 5.0, spacings=None) -> tuple[list[CurvePoint], float]:
    """Every distinct score as a threshold, highest first.

    Greedy matching visits candidates in score order, so the matching at a
    threshold is a prefix of the full matching; one pass per subject suffices.
    """
    n_s = len(subject_cands)
    spacings = spacings or [(1.0, 1.0, 1.0)] * n_s
    n_ann = 0
    scored = []  # (score, is_tp)
    for cs, anns, sp in zip(subject_cands, subject_annotations, spacings):
        m = match_detections(cs, anns, radius_mm, sp)
        n_ann += m.tp + m.fn
        hit = np.zeros(len(cs), dtype=bool)
        hit[[i for i, _ in m.pairs]] = True
        scored.extend((c.score, bool(h)) for c, h in zip(cs, hit))
    scored.sort(key=lambda x: -x[0])
    points = []
    tp = fp = 0
    for k, (score, is_tp) in enumerate(scored):
        tp += is_tp
        fp += not is_tp
        if k + 1 < len(scored) and scored[k + 1][0] == score:
            continue
        prec = tp / (tp + fp)
        rec = tp / n_ann if n_ann else 0.0
        points.append(CurvePoint(score, prec, rec, fp / n_s, tp, fp, n_ann - tp))
    return points, auc_pr(points)


def auc_pr(points: Sequence[CurvePoint]) -> float:
    area, prev = 0.0, 0.0
    for p in points:
        area += (p.recall - prev) * p.precision
        prev = p.recall
    return area


def dice_score(pred: Volume3D | np.ndarray, truth: Volume3D | np.ndarray) -> dict:
    """Per-class Dice for lobar/deep/infratentorial, class mean and voxel-pooled total.

    A class absent from both maps scores 1.0 and is listed under ``absent``.
    """
    p = pred.data if isinstance(pred, Volume3D) else np.asarray(pred)
    t = truth.data if isinstance(truth, Volume3D) else np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    out, absent = {}, []
    inter_all = denom_all = 0
    for name in CLASSES:
        k = REGION_CODES[name]
        pk, tk = p == k, t == k
        inter, denom = int((pk & tk).sum()), int(pk.sum() + tk.sum())
        inter_all += inter
        denom_all += denom
        if denom == 0:
            out[name] = 1.0
            absent.append(name)
        else:
            out[name] = 2 * inter / denom
    out["total"] = float(np.mean([out[n] for n in CLASSES]))
    out["pooled"] = 2 * inter_all / denom_all if denom_all else 1.0
    out["absent"] = absent
    return out


@dataclass
class LocalizationConfusion:
    tp_lobar: int = 0
    tp_deep: int = 0
    tp_infra: int = 0
    n_lobar: int = 0
    n_deep: int = 0
    n_infra: int = 0

    def __post_init__(self):
        for c in ("lobar", "deep", "infra"):
            if not 0 <= getattr(self, f"tp_{c}") <= getattr(self, f"n_{c}"):
                raise ValueError(f"tp_{c} must lie in [0, n_{c}]")

    def add(self, truth: str, predicted: str) -> None:
        key = "infra" if truth == "infratentorial" else truth
        setattr(self, f"n_{key}", getattr(self, f"n_{key}") + 1)
        if predicted == truth:
            setattr(self, f"tp_{key}", getattr(self, f"tp_{key}") + 1)


def localization_accuracy(conf: LocalizationConfusion) -> dict[str, float | None]:
    n = conf.n_lobar + conf.n_deep + conf.n_infra
    if n == 0:
        raise ValueError("localization accuracy needs at least one labeled lesion")
    def ratio(tp, k):
        return tp / k if k else None
    return {
        "lobar": ratio(conf.tp_lobar, conf.n_lobar),
        "deep": ratio(conf.tp_deep, conf.n_deep),
        "infratentorial": ratio(conf.tp_infra, conf.n_infra),
        "total": (conf.tp_lobar + conf.tp_deep + conf.tp_infra) / n,
    }


def efp_avg(eliminated_fp_total: int, n_subjects: int) -> float:
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    return eliminated_fp_total / n_subjects


@dataclass
class MetricsReport:
    sensitivity: float
    precision: float | None
    fp_avg: float
    auc_pr: float
    n_subjects: int
    tp: int
    fp: int
    fn: int
    dice: dict | None = None
    la: dict | None = None
    efp_avg: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_subjects(subject_cands, subject_annotations, radius_mm: float = 5.0,
                      spacings=None) -> MetricsReport:
    spacings = spacings or [(1.0, 1.0, 1.0)] * len(subject_cands)
    ms = [match_detections(cs, anns, radius_mm, sp)
          for cs, anns, sp in zip(subject_cands, subject_annotations, spacings)]
    sens, prec, fpa = detection_metrics(ms)
    _, area = pr_curve(subject_cands, subject_annotations, radius_mm, spacings)
    return MetricsReport(sens, prec, fpa, area, len(ms),
                         sum(m.tp for m in ms), sum(m.fp for m in ms), sum(m.fn for m in ms))


def write_curve_csv(points: Sequence[CurvePoint], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "fp_avg"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.precision), repr(p.recall), repr(p.fp_avg)])


def read_curve_csv(path: str | Path) -> list[dict[str, float]]:
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_report(report: MetricsReport | dict, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = report.to_json() if isinstance(report, MetricsReport) else report
    Path(path).write_text(json.dumps(data, indent=2))


def format_pct(x: float | None) -> str:
    return "n/a" if x is None else f"{100 * x:.2f}%"


def check_floors(report: dict, floors: dict[str, float]) -> list[str]:
    """Names of metrics below their floor (``fp_avg``-style keys prefixed ``max_`` are ceilings)."""
    failed = []
    for key, bound in floors.items():
        if key.startswith("max_"):
            val = report.get(key[4:])
            if val is None or val > bound:
                failed.append(key)
        else:
            val = report.get(key)
            if val is None or val < bound:
                failed.append(key)
    return failed


def annotation_centers(anns: Sequence[CMBAnnotation]):
    return [a.center for a in anns]
