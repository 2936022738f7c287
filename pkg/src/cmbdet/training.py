"""Training loops for the detector and segmenter, plus checkpoint archives.

Checkpoints are zip archives (stored, fixed timestamps, sorted members) with
``meta.json`` and one ``.npy`` blob per tensor, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .anatomical import Segmenter, dice_loss, one_hot, segmenter_input
from .config import (
    ExperimentConfig,
    detector_config_from_dict,
    segmenter_config_from_dict,
    to_dict,
)
from .detector import CMBDetector
from .hspl import (
    PrototypePair,
    build_targets,
    focal_loss,
    hspl_loss,
    regression_loss,
    sample_balanced_crops,
    total_loss,
    write_loss_csv,
)
from .volume_io import SubjectRecord, normalize_minmax, preprocess_for_detection, sliding_windows

log = logging.getLogger(__name__)

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def seed_everything(seed: int) -> None:
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _npy_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path: str | Path, kind: str, config: dict, tensors: dict[str, torch.Tensor],
                    extra: dict | None = None) -> None:
    meta = {"kind": kind, "config": config, "config_hash": config_hash_dict(config),
            "tensors": sorted(tensors), "extra": extra or {}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        members = {"meta.json": json.dumps(meta, sort_keys=True, indent=1).encode()}
        for name, t in tensors.items():
            members[f"tensors/{name}.npy"] = _npy_bytes(t)
        for name in sorted(members):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, members[name])


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        tensors = {}
        for name in meta["tensors"]:
            arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
            tensors[name] = torch.from_numpy(arr.copy())
    if meta["config_hash"] != config_hash_dict(meta["config"]):
        raise ValueError(f"{path}: config hash mismatch, archive is corrupt or edited")
    return meta, tensors


def config_hash_dict(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def save_detector(path, model: CMBDetector, protos: PrototypePair | None, cfg: ExperimentConfig,
                  extra: dict | None = None) -> None:
    cfg = dataclasses.replace(cfg, detector=model.config)  # the model's own architecture wins
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if protos is not None:
        tensors.update({f"protos.{k}": v for k, v in protos.state_dict().items()})
    save_checkpoint(path, "detector", to_dict(cfg), tensors, extra)


def load_detector(path) -> tuple[CMBDetector, PrototypePair | None, dict]:
    meta, tensors = load_checkpoint(path)
    if meta["kind"] != "detector":
        raise ValueError(f"{path} holds a {meta['kind']} checkpoint, not a detector")
    det_cfg = detector_config_from_dict(meta["config"]["detector"])
    model = CMBDetector(det_cfg)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    protos = None
    proto_state = {k[7:]: v for k, v in tensors.items() if k.startswith("protos.")}
    if proto_state:
        protos = PrototypePair(det_cfg.fused_channels)
        protos.load_state_dict(proto_state)
    model.eval()
    return model, protos, meta


def save_segmenter(path, model: Segmenter, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    cfg = dataclasses.replace(cfg, segmenter=model.config)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    save_checkpoint(path, "segmenter", to_dict(cfg), tensors, extra)


def load_segmenter(path) -> tuple[Segmenter, dict]:
    meta, tensors = load_checkpoint(path)
    if meta["kind"] != "segmenter":
        raise ValueError(f"{path} holds a {meta['kind']} checkpoint, not a segmenter")
    model = Segmenter(segmenter_config_from_dict(meta["config"]["segmenter"]))
    model.load_state_dict({k[6:]: v for k, v in tensors.items()})
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# detector
# ---------------------------------------------------------------------------

@dataclass
class DetectorRun:
    model: CMBDetector
    protos: PrototypePair | None
    config: ExperimentConfig
    losses: list[dict] = field(default_factory=list)


def _optimizer(params, cfg):
    if cfg.kind == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    if cfg.kind == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.kind!r}")


def train_detector(config: ExperimentConfig, subjects: Sequence[SubjectRecord],
                   out_dir: str | Path | None = None) -> DetectorRun:
    """Balanced-crop training for the configured ablation arm.

    ``subjects`` are native-space records; preprocessing happens here.
    Writes ``logs/losses.csv`` and checkpoints under ``out_dir`` when given.
    """
    cfg = config.arm()
    det = cfg.detector
    w = cfg.losses
    seed_everything(cfg.seed)
    data = [preprocess_for_detection(s, det.target_slices) for s in subjects]
    model = CMBDetector(det)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    use_hspl = w.lambda_con > 0
    protos = PrototypePair(det.fused_channels, generator=gen) if use_hspl else None
    params = list(model.parameters()) + (list(protos.parameters()) if protos else [])
    opt = _optimizer(params, cfg.optimizer)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.scheduler.step_size, cfg.scheduler.gamma)
    rng = np.random.default_rng(cfg.seed)
    arrays: dict = {}
    rows = []
    step = 0
    out = Path(out_dir) if out_dir else None
    for epoch in range(cfg.epochs):
        model.train()
        crops = sample_balanced_crops(data, det.train_crop, cfg.crops_per_epoch, rng, arrays=arrays)
        spacing = {s.subject_id: s.swi.spacing for s in data}
        for crop in crops:
            cls_t, reg_t, mask = build_targets(crop, spacing[crop.subject_id], det.pos_radius_mm,
                                               det.anchor_size_mm)
            res = model(torch.from_numpy(crop.X)[None])
            prob = torch.sigmoid(res["logits"][0, 0])
            l_cls = focal_loss(prob, torch.from_numpy(cls_t), w.focal_gamma, w.focal_alpha,
                               normalize=w.focal_normalize)
            l_reg = regression_loss(res["reg"][0], torch.from_numpy(reg_t), torch.from_numpy(mask))
            if use_hspl:
                l_con = hspl_loss(res["features"], prob, crop, protos, w.margin_n)
            else:
                l_con = torch.zeros(())
            try:
                parts = total_loss(l_cls, l_reg, l_con, w)
            except FloatingPointError as exc:
                raise FloatingPointError(f"step {step}: {exc}") from exc
            opt.zero_grad()
            parts.L_final.backward()
            if cfg.optimizer.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.optimizer.grad_clip)
            opt.step()
            rows.append({"step": step, **parts.as_floats()})
            step += 1
        sched.step()
        recent = rows[-len(crops):]
        log.info("epoch %d  L_final %.5f", epoch, np.mean([r["L_final"] for r in recent]))
        if out and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_detector(out / "checkpoints" / f"detector_epoch{epoch + 1:03d}.ckpt", model, protos, cfg)
    model.eval()
    if out:
        save_detector(out / "checkpoints" / "detector.ckpt", model, protos, cfg)
        write_loss_csv(rows, out / "logs" / "losses.csv")
    return DetectorRun(model, protos, cfg, rows)


# ---------------------------------------------------------------------------
# segmenter
# ---------------------------------------------------------------------------

@dataclass
class SegmenterRun:
    model: Segmenter
    config: ExperimentConfig
    losses: list[float] = field(default_factory=list)


@torch.no_grad()
def _recalibrate_batch_norm(model: torch.nn.Module, crops: Sequence[np.ndarray]) -> None:
    """Replace BatchNorm running stats with a plain average over ``crops`` under the final weights."""
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    for c in crops:
        model(torch.from_numpy(np.ascontiguousarray(c))[None])
    for m, mom in zip(norms, saved):
        m.momentum = mom


def train_segmenter(config: ExperimentConfig, subjects: Sequence[SubjectRecord],
                    out_dir: str | Path | None = None, steps: int | None = None) -> SegmenterRun:
    """Dice-loss training on random native-space crops; label maps are required."""
    cfg = config
    scfg = cfg.segmenter
    seed_everything(cfg.seed)
    model = Segmenter(scfg)
    opt = _optimizer(model.parameters(), cfg.seg_optimizer)
    rng = np.random.default_rng(cfg.seed)
    inputs, targets = [], []
    for s in subjects:
        if s.label_map is None:
            raise ValueError(f"{s.subject_id}: segmenter training needs a label map")
        vol = s.t1 if scfg.input_modality.lower() == "t1" else s.swi
        if vol is None:
            raise ValueError(f"{s.subject_id}: {scfg.input_modality} volume missing")
        inputs.append(segmenter_input(normalize_minmax(vol)))
        targets.append(one_hot(s.label_map.data, scfg.classes))
    # cycle deterministically through the tiling, then random crops
    tiles = [(i, spec) for i, x in enumerate(inputs)
             for spec in sliding_windows(x.shape[1:], scfg.crop_size, scfg.stride)]
    losses = []
    n_steps = steps if steps is not None else cfg.seg_steps
    model.train()
    for step in range(n_steps):
        if step % 2 == 0:
            i, spec = tiles[(step // 2) % len(tiles)]
            sl = spec.slices
        else:
            i = int(rng.integers(len(inputs)))
            shape = inputs[i].shape[1:]
            o = [int(rng.integers(0, d - n + 1)) for n, d in zip(scfg.crop_size, shape)]
            sl = tuple(slice(a, a + n) for a, n in zip(o, scfg.crop_size))
        x = torch.from_numpy(np.ascontiguousarray(inputs[i][(slice(None), *sl)]))[None]
        t = torch.from_numpy(np.ascontiguousarray(targets[i][(slice(None), *sl)]))[None]
        loss = dice_loss(F.softmax(model(x), 1), t)
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"segmenter step {step}: dice loss is not finite")
        opt.zero_grad()
        loss.backward()
        if cfg.seg_optimizer.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.seg_optimizer.grad_clip)
        opt.step()
        losses.append(loss.item())
    _recalibrate_batch_norm(model, [inputs[i][(slice(None), *spec.slices)] for i, spec in tiles])
    model.eval()
    if out_dir:
        save_segmenter(Path(out_dir) / "checkpoints" / "segmenter.ckpt", model, cfg)
    return SegmenterRun(model, cfg, losses)
