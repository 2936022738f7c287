"""Whole-framework inference: detect -> segment -> region filter -> metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .anatomical import Segmenter, filter_candidates, filter_report, lookup_region, segment_subject
from .detector import CMBDetector, DetectionCandidate, detect_subject
from .evaluation import (
    LocalizationConfusion,
    MetricsReport,
    dice_score,
    efp_avg,
    evaluate_subjects,
    localization_accuracy,
    match_detections,
    pr_curve,
    write_curve_csv,
    write_report,
)
from .volume_io import SubjectRecord, preprocess_for_detection, save_nifti


@dataclass
class SubjectResult:
    subject_id: str
    candidates: list[DetectionCandidate]
    kept: list[DetectionCandidate]
    eliminated: int
    eliminated_fp: int
    label_map: object = None
    dice: dict | None = None
    predicted_regions: list[str] = field(default_factory=list)


@dataclass
class PipelineResult:
    subjects: list[SubjectResult]
    pre: MetricsReport
    post: MetricsReport


def check_compatible(subject: SubjectRecord, detector: CMBDetector, segmenter: Segmenter | None) -> None:
    det = detector.config
    if det.in_channels != 2 or subject.phase is None:
        raise ValueError(f"{subject.subject_id}: detector expects SWI + phase input")
    if subject.swi.space.value != "native":
        raise ValueError(f"{subject.subject_id}: pipeline input must be native space")
    if subject.swi.shape[2] > det.target_slices:
        raise ValueError(f"{subject.subject_id}: {subject.swi.shape[2]} slices exceed the detector's "
                         f"interpolation target {det.target_slices}")
    if segmenter is not None:
        mod = segmenter.config.input_modality.lower()
        if (subject.t1 if mod == "t1" else subject.swi) is None:
            raise ValueError(f"{subject.subject_id}: segmenter needs a {mod} volume")


def process_subject(subject: SubjectRecord, detector: CMBDetector, segmenter: Segmenter,
                    radius_mm: float = 5.0, threshold: float | None = None) -> SubjectResult:
    check_compatible(subject, detector, segmenter)
    ps = preprocess_for_detection(subject, detector.config.target_slices)
    cands = detect_subject(ps, detector, threshold=threshold)
    label_map = segment_subject(subject, segmenter)
    kept, eliminated = filter_candidates(cands, label_map)
    gt = [a.center for a in subject.annotations]
    pre = match_detections(cands, gt, radius_mm, subject.swi.spacing)
    matched = {i for i, _ in pre.pairs}
    kept_ids = {id(c) for c in cands if lookup_region(c, label_map)[0] != "none"}
    eliminated_fp = sum(1 for i, c in enumerate(cands) if id(c) not in kept_ids and i not in matched)
    dice = dice_score(label_map, subject.label_map) if subject.label_map is not None else None
    regions = [lookup_region(a.center, label_map)[0] for a in subject.annotations]
    return SubjectResult(subject.subject_id, cands, kept, eliminated, eliminated_fp, label_map, dice, regions)


def _truth_region(subject: SubjectRecord, k: int) -> str | None:
    a = subject.annotations[k]
    if a.region is not None:
        return a.region
    if subject.label_map is not None:
        return lookup_region(a.center, subject.label_map)[0]
    return None


def summarize(subjects: Sequence[SubjectRecord], results: Sequence[SubjectResult],
              radius_mm: float = 5.0) -> PipelineResult:
    anns = [[a.center for a in s.annotations] for s in subjects]
    spacings = [s.swi.spacing for s in subjects]
    pre = evaluate_subjects([r.candidates for r in results], anns, radius_mm, spacings)
    post = evaluate_subjects([r.kept for r in results], anns, radius_mm, spacings)
    post.efp_avg = efp_avg(sum(r.eliminated_fp for r in results), len(results))
    conf = LocalizationConfusion()
    for s, r in zip(subjects, results):
        for k, predicted in enumerate(r.predicted_regions):
            truth = _truth_region(s, k)
            if truth is not None:
                conf.add(truth, predicted)
    if conf.n_lobar + conf.n_deep + conf.n_infra:
        post.la = localization_accuracy(conf)
    dices = [r.dice for r in results if r.dice is not None]
    if dices:
        keys = ("lobar", "deep", "infratentorial", "total", "pooled")
        post.dice = {k: float(np.mean([d[k] for d in dices])) for k in keys}
    return PipelineResult(list(results), pre, post)


def run_pipeline(subjects: Sequence[SubjectRecord], detector: CMBDetector, segmenter: Segmenter,
                 out_dir: str | Path | None = None, radius_mm: float = 5.0,
                 threshold: float | None = None) -> PipelineResult:
    """Full framework over native-space subjects; writes reports/curves when ``out_dir`` is set."""
    results = [process_subject(s, detector, segmenter, radius_mm, threshold) for s in subjects]
    summary = summarize(subjects, results, radius_mm)
    if out_dir:
        out = Path(out_dir)
        for r in results:
            (out / "reports").mkdir(parents=True, exist_ok=True)
            (out / "reports" / f"{r.subject_id}_filter.json").write_text(
                json.dumps(filter_report(r.kept, r.eliminated), indent=2))
            (out / "reports" / f"{r.subject_id}_candidates.json").write_text(
                json.dumps([c.to_json() for c in r.candidates], indent=2))
            save_nifti(r.label_map, out / "segmentations" / f"{r.subject_id}.nii.gz")
        write_report(summary.pre, out / "reports" / "metrics_pre_filter.json")
        write_report(summary.post, out / "reports" / "metrics_post_filter.json")
        anns = [[a.center for a in s.annotations] for s in subjects]
        sp = [s.swi.spacing for s in subjects]
        for tag, cs in (("pre_filter", [r.candidates for r in results]), ("post_filter", [r.kept for r in results])):
            points, _ = pr_curve(cs, anns, radius_mm, sp)
            write_curve_csv(points, out / "curves" / f"pr_{tag}.csv")
    return summary
