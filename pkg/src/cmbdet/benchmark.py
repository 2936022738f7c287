"""Synthetic benchmark harness shared by the experiment scripts and the acceptance suite.

A run trains one ablation arm, detects on the held-out and normal subjects and
stores losses, candidates and metrics under ``<root>/<arm>_seed<k>_<hash>/``.
Finished runs are reused when their config hash matches.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import config as cfgmod
from .detector import DetectionCandidate, detect_subject
from .evaluation import evaluate_subjects, pr_curve, write_curve_csv
from .hspl import write_loss_csv
from .synthetic import PhantomSpec, generate_dataset
from .training import save_detector, train_detector
from .volume_io import SubjectRecord, preprocess_for_detection

log = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).resolve().parents[2] / "scripts" / "benchmark_config.json"


@dataclass
class BenchmarkData:
    n_train: int = 40
    n_test: int = 10
    n_normal: int = 4
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    seed: int = 100

    def build(self) -> tuple[list[SubjectRecord], list[SubjectRecord]]:
        train = generate_dataset(self.n_train, self.phantom, seed=self.seed, prefix="train")
        test = generate_dataset(self.n_test, self.phantom, seed=self.seed + 100, prefix="test")
        normal = generate_dataset(self.n_normal, self.phantom, seed=self.seed + 200,
                                  normal_fraction=1.0, prefix="normal")
        return train, test + normal


@dataclass
class BenchmarkRun:
    arm: str
    seed: int
    path: Path
    losses: list[dict]
    candidates: dict[str, list[DetectionCandidate]]
    metrics: dict
    train_seconds: float


def load_benchmark_config(path: str | Path | None = None, overrides: list[str] | None = None):
    return cfgmod.load_config(path or DEFAULT_CONFIG, overrides)


def _run_dir(root: Path, cfg: cfgmod.ExperimentConfig) -> Path:
    return root / f"{cfg.ablation}_seed{cfg.seed}_{cfgmod.config_hash(cfg)}"


def evaluate_candidates(cands: dict[str, list[DetectionCandidate]], test: list[SubjectRecord],
                        threshold: float, radius_mm: float) -> tuple[dict, list]:
    """Metrics at ``threshold`` plus the PR curve over every collected candidate."""
    anns = [[a.center for a in s.annotations] for s in test]
    sp = [s.swi.spacing for s in test]
    all_c = [cands[s.subject_id] for s in test]
    at_t = evaluate_subjects([[c for c in cs if c.score >= threshold] for cs in all_c], anns, radius_mm, sp)
    points, auc = pr_curve(all_c, anns, radius_mm, sp)
    metrics = {"threshold": threshold, "sensitivity": at_t.sensitivity, "precision": at_t.precision,
               "fp_avg": at_t.fp_avg, "auc_pr": auc, "n_subjects": len(test),
               "n_lesions": sum(len(a) for a in anns)}
    return metrics, points


def run_arm(cfg: cfgmod.ExperimentConfig, train: list[SubjectRecord], test: list[SubjectRecord],
            root: str | Path, collect_threshold: float = 0.05, reuse: bool = True) -> BenchmarkRun:
    """Train ``cfg.ablation`` and evaluate it; cached by config hash under ``root``."""
    out = _run_dir(Path(root), cfg)
    done = out / "metrics.json"
    if not (reuse and done.exists()):
        out.mkdir(parents=True, exist_ok=True)
        cfgmod.save_config(cfg, out / "config.json")
        t0 = time.time()
        run = train_detector(cfg, train)
        seconds = time.time() - t0
        save_detector(out / "detector.ckpt", run.model, run.protos, cfg)
        write_loss_csv(run.losses, out / "losses.csv")
        cands = {}
        for s in test:
            ps = preprocess_for_detection(s, cfg.detector.target_slices)
            cands[s.subject_id] = detect_subject(ps, run.model, threshold=collect_threshold)
        (out / "candidates.json").write_text(json.dumps(
            {sid: [c.to_json() for c in cs] for sid, cs in cands.items()}, indent=1))
        metrics, points = evaluate_candidates(cands, test, cfg.detector.prob_threshold, cfg.match_radius_mm)
        metrics["train_seconds"] = seconds
        write_curve_csv(points, out / "pr_curve.csv")
        done.write_text(json.dumps(metrics, indent=2))
        log.info("%s seed %d: %s", cfg.ablation, cfg.seed, metrics)
    return load_run(out)


def load_run(path: str | Path) -> BenchmarkRun:
    path = Path(path)
    cfg = cfgmod.load_config(path / "config.json")
    with open(path / "losses.csv") as fh:
        losses = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    raw = json.loads((path / "candidates.json").read_text())
    cands = {sid: [DetectionCandidate.from_json(d) for d in cs] for sid, cs in raw.items()}
    metrics = json.loads((path / "metrics.json").read_text())
    return BenchmarkRun(cfg.ablation, cfg.seed, path, losses, cands, metrics, metrics.get("train_seconds", 0.0))
