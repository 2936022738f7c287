"""Anatomical localization: atlas-to-BOMBS mapping, 4-class segmenter, region filter."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SegmenterConfig
from .detector import DetectionCandidate, UNetBackbone
from .volume_io import (
    REGION_CODES,
    REGION_NAMES,
    Modality,
    SubjectRecord,
    Volume3D,
    make_coordinate_tensors,
    normalize_minmax,
    sliding_windows,
)

DICE_EPS = 1e-6


@lru_cache(maxsize=1)
def aseg_table() -> dict[str, str]:
    text = resources.files("cmbdet").joinpath("data/aseg_bombs.json").read_text()
    return json.loads(text)


def map_aseg_to_bombs(subregion_name: str) -> str:
    table = aseg_table()
    key = " ".join(subregion_name.lower().replace("-", " ").replace("_", " ").split())
    if key not in table:
        raise KeyError(f"unknown subregion {subregion_name!r}; valid names: {sorted(table)}")
    return table[key]


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean soft Dice over classes; class axis is dim 0 (or 1 when batched)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    cdim = 1 if pred.ndim == 5 else 0
    dims = [d for d in range(pred.ndim) if d != cdim]
    inter = (pred * target).sum(dims)
    denom = pred.sum(dims) + target.sum(dims)
    return 1 - (2 * inter / (denom + eps)).mean()


class Segmenter(nn.Module):
    """U-Net over (image, x, y, z coordinate) channels with four class logits."""

    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        self.backbone = UNetBackbone(config.in_channels, config.base_channels, config.batch_norm)
        self.out = nn.Conv3d(config.base_channels, config.classes, 1)

    def forward(self, x):
        return self.out(self.backbone(x)[-1])


def segmenter_input(image: Volume3D) -> np.ndarray:
    """Stack the normalized image with whole-volume coordinate tensors, ``(4, X, Y, Z)``."""
    coords = make_coordinate_tensors(image.shape)
    return np.stack([image.data, *(c.data for c in coords)]).astype(np.float32)


def one_hot(labels: np.ndarray, classes: int = 4) -> np.ndarray:
    return (np.arange(classes).reshape(-1, 1, 1, 1) == labels[None]).astype(np.float32)


@torch.no_grad()
def segment_volume(model: Segmenter, inputs: np.ndarray, window=None, stride=None) -> np.ndarray:
    """Class probabilities averaged over overlapping windows, ``(classes, X, Y, Z)``."""
    cfg = model.config
    shape = inputs.shape[1:]
    window = tuple(min(w, s) for w, s in zip(window or cfg.crop_size, shape))
    model.eval()
    acc = np.zeros((cfg.classes, *shape), dtype=np.float64)
    hits = np.zeros(shape, dtype=np.float64)
    for spec in sliding_windows(shape, window, stride or cfg.stride):
        crop = torch.from_numpy(np.ascontiguousarray(inputs[(slice(None), *spec.slices)]))[None]
        prob = F.softmax(model(crop), 1)[0].numpy()
        acc[(slice(None), *spec.slices)] += prob
        hits[spec.slices] += 1
    return acc / hits


def segment_subject(subject: SubjectRecord, model: Segmenter, config: SegmenterConfig | None = None) -> Volume3D:
    """Native-space 4-class region map (never run on z-interpolated data)."""
    config = config or model.config
    vol = subject.t1 if config.input_modality.lower() == "t1" else subject.swi
    if vol is None:
        raise ValueError(f"{subject.subject_id}: {config.input_modality} volume missing")
    if vol.space.value != "native":
        raise ValueError("segmentation runs in native space")
    prob = segment_volume(model, segmenter_input(normalize_minmax(vol)), config.crop_size, config.stride)
    labels = prob.argmax(0).astype(np.int16)
    return Volume3D(labels, vol.spacing, Modality.LABELMAP)


def _rounded_voxel(center) -> tuple[int, int, int]:
    return tuple(int(np.floor(v + 0.5)) for v in center)


def lookup_region(candidate: DetectionCandidate | tuple, label_map: Volume3D) -> tuple[str, float]:
    """Region of the rounded center voxel plus the share of its 3x3x3 neighbourhood that agrees."""
    center = candidate.center if isinstance(candidate, DetectionCandidate) else candidate
    idx = _rounded_voxel(center)
    labels = label_map.data
    if any(i < 0 or i >= n for i, n in zip(idx, labels.shape)):
        raise IndexError(f"center {tuple(center)} outside label map {labels.shape}")
    code = int(labels[idx])
    nb = labels[tuple(slice(max(i - 1, 0), i + 2) for i in idx)]
    return REGION_NAMES[code], float((nb == code).mean())


def filter_candidates(cands: list[DetectionCandidate], label_map: Volume3D):
    """Drop candidates sitting in the 'none' region; annotate the rest with their region."""
    kept, eliminated = [], 0
    for c in cands:
        region, _ = lookup_region(c, label_map)
        if region == "none":
            eliminated += 1
            continue
        kept.append(DetectionCandidate(c.center, c.size_mm, c.score, region))
    return kept, eliminated


def filter_report(kept: list[DetectionCandidate], eliminated: int) -> dict:
    regions = {name: 0 for name in REGION_NAMES[1:]}
    for c in kept:
        regions[c.region] += 1
    return {"kept": [c.to_json() for c in kept], "eliminated": eliminated, "regions": regions}


def region_code(name: str) -> int:
    return REGION_CODES[name]
