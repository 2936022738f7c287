"""Command-line entry point: ``cmbdet <command> ...``.

Run layout under ``--out``: ``checkpoints/``, ``logs/losses.csv``,
``reports/*.json``, ``curves/*.csv``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .volume_io import (
    load_dataset,
    normalize_minmax,
    preprocess_for_detection,
    save_nifti,
    save_subject,
    write_annotations,
)

log = logging.getLogger("cmbdet")


def _experiment_config(args) -> cfgmod.ExperimentConfig:
    overrides = list(getattr(args, "set", None) or [])
    for flag, key in (("seed", "seed"), ("ablation", "ablation"), ("epochs", "epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{key}={json.dumps(v)}")
    if getattr(args, "modality", None):
        overrides.append(f"segmenter.input_modality={json.dumps(args.modality)}")
    if getattr(args, "data", None):
        overrides.append(f"data_root={json.dumps(str(args.data))}")
    if getattr(args, "out", None):
        overrides.append(f"output_dir={json.dumps(str(args.out))}")
    return cfgmod.load_config(getattr(args, "config", None), overrides)


def _manifest_ids(data_root, split: str | None, ids: list[str] | None):
    if ids:
        return ids
    path = Path(data_root) / "manifest.json"
    if split is None or not path.exists():
        return None
    man = json.loads(path.read_text())
    splits = split.split(",")
    return [s["id"] for s in man["subjects"] if s["split"] in splits]


def _subjects(args, default_split=None):
    ids = _manifest_ids(args.data, getattr(args, "split", None) or default_split, getattr(args, "ids", None))
    return load_dataset(args.data, ids)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    from .synthetic import PhantomSpec, derive_seeds, generate_dataset

    spec = PhantomSpec(shape=tuple(args.shape), spacing=tuple(args.spacing), n_cmbs=args.n_cmbs)
    groups = [("train", args.n_train, 0.0), ("test", args.n_test, 0.0), ("normal", args.n_normal, 1.0)]
    out = Path(args.out)
    subjects, manifest = [], []
    for k, (split, n, frac) in enumerate(groups):
        if n <= 0:
            continue
        master = args.seed * 1000 + k
        group = generate_dataset(n, spec, seed=master, normal_fraction=frac, prefix=split)
        for s, sd in zip(group, derive_seeds(master, n)):
            save_subject(s, out / "subjects")
            manifest.append({"id": s.subject_id, "seed": sd, "split": split,
                             "normal": not s.annotations, "n_cmbs": len(s.annotations)})
        subjects.extend(group)
    write_annotations(out / "annotations.json", subjects)
    (out / "manifest.json").write_text(json.dumps({"master_seed": args.seed, "subjects": manifest}, indent=2))
    print(f"wrote {len(subjects)} subjects to {out}")


def cmd_preprocess(args):
    subjects = _subjects(args)
    out = Path(args.out) / "preprocessed"
    for s in subjects:
        ps = preprocess_for_detection(s, args.target_slices)
        save_nifti(ps.swi, out / s.subject_id / "swi_zinterp.nii.gz")
        save_nifti(ps.phase, out / s.subject_id / "phase_zinterp.nii.gz")
        save_nifti(normalize_minmax(s.swi), out / s.subject_id / "swi_norm.nii.gz")
    print(f"preprocessed {len(subjects)} subjects into {out}")


def cmd_train_detector(args):
    from .training import train_detector

    cfg = _experiment_config(args)
    subjects = _subjects(args, default_split="train")
    out = Path(cfg.output_dir)
    cfgmod.save_config(cfg, out / "config.json")
    run = train_detector(cfg, subjects, out)
    print(f"trained {cfg.ablation} for {len(run.losses)} steps; checkpoint at {out / 'checkpoints'}")


def cmd_train_segmenter(args):
    from .training import train_segmenter

    cfg = _experiment_config(args)
    subjects = _subjects(args, default_split="train")
    if args.limit:
        subjects = subjects[: args.limit]
    run = train_segmenter(cfg, subjects, cfg.output_dir, steps=args.steps)
    print(f"segmenter final dice loss {run.losses[-1]:.4f}")


def cmd_detect(args):
    from .detector import detect_subject
    from .training import load_detector

    model, _, meta = load_detector(args.checkpoint)
    out = Path(args.out) / "detections"
    out.mkdir(parents=True, exist_ok=True)
    for s in _subjects(args, default_split="test,normal"):
        ps = preprocess_for_detection(s, model.config.target_slices)
        cands = detect_subject(ps, model, threshold=args.threshold)
        (out / f"{s.subject_id}.json").write_text(json.dumps([c.to_json() for c in cands], indent=2))
        print(f"{s.subject_id}: {len(cands)} candidates")


def cmd_segment(args):
    from .anatomical import segment_subject
    from .training import load_segmenter

    model, _ = load_segmenter(args.checkpoint)
    out = Path(args.out) / "segmentations"
    for s in _subjects(args, default_split="test,normal"):
        save_nifti(segment_subject(s, model), out / f"{s.subject_id}.nii.gz")
        print(f"{s.subject_id}: segmented")


def cmd_filter(args):
    from .anatomical import filter_candidates, filter_report
    from .detector import DetectionCandidate
    from .volume_io import Modality, load_nifti

    out = Path(args.out) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    for det_file in sorted(Path(args.detections).glob("*.json")):
        sid = det_file.stem
        cands = [DetectionCandidate.from_json(d) for d in json.loads(det_file.read_text())]
        label_map = load_nifti(Path(args.segmentations) / f"{sid}.nii.gz", Modality.LABELMAP)
        kept, eliminated = filter_candidates(cands, label_map)
        (out / f"{sid}_filter.json").write_text(json.dumps(filter_report(kept, eliminated), indent=2))
        print(f"{sid}: kept {len(kept)}, eliminated {eliminated}")


def _read_candidates(folder, sid):
    from .detector import DetectionCandidate

    path = Path(folder) / f"{sid}.json"
    if not path.exists():
        path = Path(folder) / f"{sid}_filter.json"
    doc = json.loads(path.read_text())
    items = doc["kept"] if isinstance(doc, dict) else doc
    return [DetectionCandidate.from_json(d) for d in items]


def _parse_floors(items):
    floors = {}
    for item in items or []:
        k, _, v = item.partition("=")
        floors[k] = float(v)
    return floors


def cmd_evaluate(args):
    from .evaluation import check_floors, evaluate_subjects, pr_curve, write_curve_csv, write_report

    subjects = _subjects(args, default_split="test,normal")
    cands = [_read_candidates(args.detections, s.subject_id) for s in subjects]
    anns = [[a.center for a in s.annotations] for s in subjects]
    sp = [s.swi.spacing for s in subjects]
    report = evaluate_subjects(cands, anns, args.radius, sp)
    points, _ = pr_curve(cands, anns, args.radius, sp)
    out = Path(args.out)
    write_report(report, out / "reports" / f"{args.tag}.json")
    write_curve_csv(points, out / "curves" / f"{args.tag}.csv")
    print(json.dumps(report.to_json(), indent=2))
    failed = check_floors(report.to_json(), _parse_floors(args.floor))
    if failed:
        print(f"metrics below floor: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_pipeline(args):
    from .evaluation import check_floors, format_pct
    from .pipeline import run_pipeline
    from .training import load_detector, load_segmenter

    det, _, _ = load_detector(args.detector)
    seg, _ = load_segmenter(args.segmenter)
    subjects = _subjects(args, default_split="test,normal")
    res = run_pipeline(subjects, det, seg, args.out, args.radius, args.threshold)
    for tag, r in (("pre-filter", res.pre), ("post-filter", res.post)):
        print(f"{tag:12s} sensitivity {format_pct(r.sensitivity)}  precision {format_pct(r.precision)}"
              f"  FP_avg {r.fp_avg:.2f}")
    print(f"EFP_avg {res.post.efp_avg:.2f}")
    failed = check_floors(res.post.to_json(), _parse_floors(args.floor))
    if failed:
        print(f"metrics below floor: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluation import read_curve_csv

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "losses":
        import csv

        fig, ax = plt.subplots(figsize=(6, 4))
        for path in args.inputs:
            with open(path) as fh:
                rows = list(csv.DictReader(fh))
            ax.plot([int(r["step"]) for r in rows], [float(r["L_final"]) for r in rows], label=Path(path).parent.parent.name)
        ax.set_xlabel("step")
        ax.set_ylabel("L_final")
        ax.set_yscale("log")
        ax.legend()
    else:
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
        stems = [Path(x).stem for x in args.inputs]
        for path in args.inputs:
            pts = read_curve_csv(path)
            label = Path(path).stem if len(set(stems)) == len(stems) else Path(path).parent.name
            a1.plot([p["fp_avg"] for p in pts], [p["recall"] for p in pts], label=label)
            a2.plot([p["recall"] for p in pts], [p["precision"] for p in pts], label=label)
        a1.set_xlabel("FP_avg")
        a1.set_ylabel("sensitivity")
        a2.set_xlabel("recall")
        a2.set_ylabel("precision")
        a2.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmbdet", description="3D microbleed detection and anatomical filtering")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, out=True):
        sp.add_argument("--data", required=True, help="dataset root (annotations.json, subjects/)")
        sp.add_argument("--split", help="manifest split(s), comma separated")
        sp.add_argument("--ids", nargs="+", help="explicit subject ids")
        if out:
            sp.add_argument("--out", required=True, help="run directory")

    def cfg_args(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int, default=40)
    sp.add_argument("--n-test", type=int, default=10)
    sp.add_argument("--n-normal", type=int, default=4)
    sp.add_argument("--n-cmbs", type=int, default=3)
    sp.add_argument("--shape", type=int, nargs=3, default=[96, 96, 48])
    sp.add_argument("--spacing", type=float, nargs=3, default=[0.5, 0.5, 2.0])
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="normalize and z-interpolate volumes")
    data_args(sp)
    sp.add_argument("--target-slices", type=int, default=224)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train-detector", help="train one ablation arm of the detector")
    data_args(sp)
    cfg_args(sp)
    sp.add_argument("--ablation", choices=cfgmod.ABLATIONS)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train_detector)

    sp = sub.add_parser("train-segmenter", help="train the 4-class anatomical segmenter")
    data_args(sp)
    cfg_args(sp)
    sp.add_argument("--modality", choices=("swi", "t1"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--limit", type=int, help="use only the first N subjects")
    sp.set_defaults(func=cmd_train_segmenter)

    sp = sub.add_parser("detect", help="run the detector over subjects")
    data_args(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("segment", help="run the segmenter over subjects")
    data_args(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("filter", help="drop candidates in the 'none' region")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--segmentations", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("evaluate", help="detection metrics and PR curve for saved candidates")
    data_args(sp)
    sp.add_argument("--detections", required=True, help="folder of <id>.json or <id>_filter.json")
    sp.add_argument("--radius", type=float, default=5.0)
    sp.add_argument("--tag", default="metrics")
    sp.add_argument("--floor", action="append", metavar="METRIC=VALUE",
                    help="fail (exit 1) below this value; prefix max_ for ceilings")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("pipeline", help="detect, segment, filter and evaluate")
    data_args(sp)
    sp.add_argument("--detector", required=True)
    sp.add_argument("--segmenter", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--radius", type=float, default=5.0)
    sp.add_argument("--floor", action="append", metavar="METRIC=VALUE")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("plot", help="render curve or loss CSVs to an image")
    sp.add_argument("kind", choices=("curves", "losses"))
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
