"""Hard sample prototype learning: balanced crops, mimic mining and the loss terms.

Positive crops contribute feature vectors at their annotated CMB centers;
negative crops contribute the vector at their most confident voxel, which is
treated as a CMB mimic. Each vector is pulled toward its own class prototype
and pushed from the other by the concentration loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import LossWeights
from .volume_io import SubjectRecord, annotation_interp_coords

FOCAL_EPS = 1e-7
CON_EPS = 1e-8


@dataclass
class TrainingCrop:
    X: np.ndarray  # (2, w, h, d)
    contains_cmb: bool
    cmb_coords: list[tuple[float, float, float]] = field(default_factory=list)
    diameters_mm: list[float | None] = field(default_factory=list)
    origin: tuple[int, int, int] = (0, 0, 0)
    subject_id: str = ""

    def __post_init__(self):
        if self.contains_cmb != bool(self.cmb_coords):
            raise ValueError("contains_cmb must agree with cmb_coords")
        size = self.X.shape[1:]
        for c in self.cmb_coords:
            if any(v < 0 or v > s - 1 for v, s in zip(c, size)):
                raise ValueError(f"CMB coordinate {c} outside crop of size {size}")


@dataclass
class FeatureVector:
    values: torch.Tensor
    source_coord: tuple[int, int, int]
    source_is_cmb: bool


@dataclass
class LossBreakdown:
    L_cls: float | torch.Tensor
    L_reg: float | torch.Tensor
    L_con: float | torch.Tensor
    L_final: float | torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in vars(self).items()}


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _subject_array(subject: SubjectRecord) -> np.ndarray:
    if subject.phase is None:
        raise ValueError(f"{subject.subject_id}: phase channel missing")
    return np.stack([subject.swi.data, subject.phase.data]).astype(np.float32)


def sample_balanced_crops(
    subjects: Sequence[SubjectRecord],
    crop_size: Sequence[int],
    count: int,
    seed: int | np.random.Generator = 0,
    brain_threshold: float = 0.1,
    max_attempts: int = 1000,
    arrays: dict | None = None,
) -> list[TrainingCrop]:
    """Draw ``count/2`` crops holding a CMB and ``count/2`` holding none.

    Subjects must already be in detector space (normalized, z-interpolated).
    Positive origins are uniform over all placements that keep a randomly
    chosen annotation inside; negative origins are uniform over the volume
    and rejected while any annotation (plus its radius) falls inside or the
    crop center is outside the brain. Output alternates positive/negative.
    """
    if count % 2:
        raise ValueError("count must be even")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    crop_size = tuple(int(s) for s in crop_size)
    arrays = arrays if arrays is not None else {}

    def arr(s):
        if s.subject_id not in arrays:
            arrays[s.subject_id] = _subject_array(s)
        return arrays[s.subject_id]

    anns = []  # (subject index, interp coord, diameter)
    interp = []
    for i, s in enumerate(subjects):
        coords = annotation_interp_coords(s, s.swi.shape[2])
        interp.append(coords)
        for c, a in zip(coords, s.annotations):
            anns.append((i, c, a.diameter_mm))
    if not anns:
        raise ValueError("subject pool has no annotated CMBs")

    def make(i, origin):
        s = subjects[i]
        X = arr(s)[(slice(None), *(slice(o, o + n) for o, n in zip(origin, crop_size)))].copy()
        coords, diams = [], []
        for c, a in zip(interp[i], s.annotations):
            if all(o <= v <= o + n - 1 for v, o, n in zip(c, origin, crop_size)):
                coords.append(tuple(v - o for v, o in zip(c, origin)))
                diams.append(a.diameter_mm)
        return TrainingCrop(X, bool(coords), coords, diams, tuple(origin), s.subject_id)

    def positive():
        i, c, _ = anns[rng.integers(len(anns))]
        shape = subjects[i].swi.shape
        origin = []
        for v, n, d in zip(c, crop_size, shape):
            lo = max(0, math.ceil(v - (n - 1)))
            hi = min(d - n, math.floor(v))
            origin.append(int(rng.integers(lo, hi + 1)))
        return make(i, origin)

    def negative():
        for _ in range(max_attempts):
            i = int(rng.integers(len(subjects)))
            s = subjects[i]
            shape = s.swi.shape
            origin = [int(rng.integers(0, d - n + 1)) for n, d in zip(crop_size, shape)]
            center = tuple(o + n // 2 for o, n in zip(origin, crop_size))
            if s.swi.data[center] < brain_threshold:
                continue
            clear = True
            for c, a in zip(interp[i], s.annotations):
                r = (a.diameter_mm or 0.0) / 2
                margin = [r / sp + 1 for sp in s.swi.spacing]
                if all(o - m <= v <= o + n - 1 + m for v, o, n, m in zip(c, origin, crop_size, margin)):
                    clear = False
                    break
            if clear:
                return make(i, origin)
        raise RuntimeError("no CMB-free crop found within the attempt budget")

    out = []
    for _ in range(count // 2):
        out.append(positive())
        out.append(negative())
    return out


# ---------------------------------------------------------------------------
# coordinate selection and feature vectors
# ---------------------------------------------------------------------------

def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def select_coordinate(crop: TrainingCrop, prob_map) -> list[tuple[int, int, int]]:
    """Annotated CMB voxels for positive crops, else the single most confident voxel.

    Ties in the argmax resolve to the lexicographically smallest ``(x, y, z)``.
    """
    if crop.contains_cmb:
        return [tuple(_round_half_up(v) for v in c) for c in crop.cmb_coords]
    p = prob_map.detach().cpu().numpy() if isinstance(prob_map, torch.Tensor) else np.asarray(prob_map)
    flat = int(np.argmax(p))  # first occurrence in C order == lexicographic
    return [tuple(int(v) for v in np.unravel_index(flat, p.shape))]


def extract_feature_vector(features: torch.Tensor, coord, is_cmb: bool = False) -> FeatureVector:
    """Read the channel column of a ``(C, X, Y, Z)`` (or batched) feature map at ``coord``."""
    f = features[0] if features.ndim == 5 else features
    grid = f.shape[1:]
    if any(c < 0 or c >= g for c, g in zip(coord, grid)):
        raise IndexError(f"coordinate {tuple(coord)} outside feature grid {tuple(grid)}")
    return FeatureVector(f[:, coord[0], coord[1], coord[2]], tuple(coord), is_cmb)


class PrototypePair(nn.Module):
    """Trainable CMB and mimic prototypes sharing the fused feature width."""

    def __init__(self, n_channels: int, scale: float = 0.01, generator: torch.Generator | None = None):
        super().__init__()
        self.cmb_prototype = nn.Parameter(torch.randn(n_channels, generator=generator) * scale)
        self.mimic_prototype = nn.Parameter(torch.randn(n_channels, generator=generator) * scale)

    def roles(self, is_cmb: bool) -> tuple[torch.Tensor, torch.Tensor]:
        """``(M_a, M_b)``: own-class prototype first."""
        if is_cmb:
            return self.cmb_prototype, self.mimic_prototype
        return self.mimic_prototype, self.cmb_prototype


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def concentration_loss(v, m_a, m_b, margin: float = 1.0, eps: float = CON_EPS):
    """Normalized squared-distance contrast between the own and other prototype.

    Works on single vectors or on row-stacked batches (returns one value per row).
    Range is ``[margin - 1, margin + 1]``.
    """
    v, m_a, m_b = (torch.as_tensor(t) for t in (v, m_a, m_b))
    if v.shape[-1] != m_a.shape[-1] or v.shape[-1] != m_b.shape[-1]:
        raise ValueError(f"dimension mismatch: {v.shape[-1]}, {m_a.shape[-1]}, {m_b.shape[-1]}")
    da = ((v - m_a) ** 2).sum(-1)
    db = ((v - m_b) ** 2).sum(-1)
    return (da - db) / (da + db + eps) + margin


def hspl_loss(features: torch.Tensor, prob_map: torch.Tensor, crop: TrainingCrop,
              protos: PrototypePair, margin: float = 1.0):
    """Mean concentration loss over the coordinates selected for ``crop``."""
    terms = []
    for c in select_coordinate(crop, prob_map):
        fv = extract_feature_vector(features, c, crop.contains_cmb)
        m_a, m_b = protos.roles(crop.contains_cmb)
        terms.append(concentration_loss(fv.values, m_a, m_b, margin))
    return torch.stack(terms).mean()


def focal_loss(prob, target, gamma: float = 2.0, alpha: float = 0.25, eps: float = FOCAL_EPS,
               normalize: str = "mean"):
    """Binary focal loss on probabilities.

    ``normalize="mean"`` averages over voxels; ``"positives"`` divides the
    voxel sum by ``max(1, #positive voxels)``.
    """
    prob = torch.as_tensor(prob)
    target = torch.as_tensor(target, dtype=prob.dtype)
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(prob.shape)} vs {tuple(target.shape)}")
    p = prob.clamp(eps, 1 - eps)
    p_t = torch.where(target > 0.5, p, 1 - p)
    a_t = torch.where(target > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1 - alpha))
    per_voxel = -a_t * (1 - p_t) ** gamma * torch.log(p_t)
    if normalize == "mean":
        return per_voxel.mean()
    if normalize == "positives":
        return per_voxel.sum() / max(1.0, float((target > 0.5).sum()))
    raise ValueError(f"unknown focal normalization {normalize!r}")


def regression_loss(reg_map, targets, positive_mask):
    """Squared error of decoded offsets and log-size at positive voxels, averaged over positives.

    ``reg_map`` holds raw outputs ``(4, X, Y, Z)``; ``targets`` holds decoded
    targets (fractional offsets in [0, 1) and log(size / anchor)).
    """
    reg_map = torch.as_tensor(reg_map)
    mask = torch.as_tensor(positive_mask, dtype=torch.bool)
    if not mask.any():
        return reg_map.sum() * 0.0
    raw = reg_map[:, mask]
    tgt = torch.as_tensor(targets, dtype=reg_map.dtype)[:, mask]
    pred = torch.cat([torch.sigmoid(raw[:3]), raw[3:]], 0)
    return ((pred - tgt) ** 2).sum(0).mean()


def total_loss(L_cls, L_reg, L_con, weights: LossWeights) -> LossBreakdown:
    for name, v in (("L_cls", L_cls), ("L_reg", L_reg), ("L_con", L_con)):
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise FloatingPointError(f"{name} is not finite ({v})")
    final = weights.lambda_cls * L_cls + weights.lambda_reg * L_reg + weights.lambda_con * L_con
    return LossBreakdown(L_cls, L_reg, L_con, final)


def build_targets(crop: TrainingCrop, spacing, pos_radius_mm: float, anchor_size_mm: float):
    """Objectness target, regression target and regression mask for one crop."""
    size = crop.X.shape[1:]
    cls = np.zeros(size, dtype=np.float32)
    reg = np.zeros((4, *size), dtype=np.float32)
    mask = np.zeros(size, dtype=bool)
    if not crop.cmb_coords:
        return cls, reg, mask
    grids = np.meshgrid(*[np.arange(n) * s for n, s in zip(size, spacing)], indexing="ij")
    for c, d in zip(crop.cmb_coords, crop.diameters_mm):
        cm = np.asarray(c) * np.asarray(spacing)
        dist = np.sqrt(sum((g - v) ** 2 for g, v in zip(grids, cm)))
        cls[dist <= pos_radius_mm] = 1.0
        cls[tuple(_round_half_up(v) for v in c)] = 1.0
        cell = tuple(min(int(math.floor(v)), n - 1) for v, n in zip(c, size))
        frac = [v - f for v, f in zip(c, cell)]
        mask[cell] = True
        reg[:3][(slice(None), *cell)] = frac
        reg[3][cell] = math.log((d or anchor_size_mm) / anchor_size_mm)
    return cls, reg, mask


# ---------------------------------------------------------------------------
# CSV dumps
# ---------------------------------------------------------------------------

def write_feature_csv(rows, path: str | Path) -> None:
    """rows: iterables of (subject_id, (x, y, z), is_cmb, vector)."""
    rows = list(rows)
    n = len(rows[0][3]) if rows else 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "x", "y", "z", "is_cmb", *[f"v_{i}" for i in range(n)]])
        for sid, (x, y, z), is_cmb, vec in rows:
            w.writerow([sid, x, y, z, int(bool(is_cmb)), *[f"{float(v):.8g}" for v in vec]])


LOSS_COLUMNS = ("step", "L_cls", "L_reg", "L_con", "L_final")


def write_loss_csv(rows, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["step"], *(repr(float(r[k])) for k in LOSS_COLUMNS[1:])])
