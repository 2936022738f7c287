"""Single-stage 3D detector: U-Net backbone, three-level feature fusion, RPN head.

Tensors follow torch's ``(N, C, X, Y, Z)`` layout so spatial axes keep the
``[x, y, z]`` order of :mod:`cmbdet.volume_io`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DetectorConfig
from .volume_io import SubjectRecord, map_z, sliding_windows


@dataclass
class FeatureMap:
    values: torch.Tensor  # (N, C, X, Y, Z)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[2:])


@dataclass
class DetectionFieldOutput:
    logits: torch.Tensor  # (N, 1, X, Y, Z)
    reg_map: torch.Tensor  # (N, 4, X, Y, Z): dx, dy, dz offsets (pre-sigmoid), log-size

    @property
    def prob_map(self) -> torch.Tensor:
        return torch.sigmoid(self.logits[:, 0])


@dataclass
class DetectionCandidate:
    center: tuple[float, float, float]
    size_mm: float
    score: float
    region: str | None = None

    def to_json(self) -> dict:
        out = {"x": self.center[0], "y": self.center[1], "z": self.center[2],
               "size_mm": self.size_mm, "score": self.score}
        if self.region is not None:
            out["region"] = self.region
        return out

    @classmethod
    def from_json(cls, d: dict) -> "DetectionCandidate":
        return cls((d["x"], d["y"], d["z"]), d["size_mm"], d["score"], d.get("region"))


def _conv(cin: int, cout: int) -> nn.Conv3d:
    # He init keeps the input signal alive through the stack; torch's default
    # shrinks it until the biases dominate
    conv = nn.Conv3d(cin, cout, 3, padding=1)
    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return conv


def _block(cin: int, cout: int, norm: bool = True) -> nn.Sequential:
    layers = []
    for a, b in ((cin, cout), (cout, cout)):
        layers.append(_conv(a, b))
        if norm:
            layers.append(nn.BatchNorm3d(b))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


def _up(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="trilinear", align_corners=False)


class ChannelNorm(nn.Module):
    """LayerNorm over channels at every voxel; independent of crop extent."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1, 1) + self.bias.view(1, -1, 1, 1, 1)


class UNetBackbone(nn.Module):
    """Three-stage encoder/decoder; returns decoder outputs at /4, /2 and /1."""

    def __init__(self, in_channels: int, base: int, norm: bool = True):
        super().__init__()
        self.enc1 = _block(in_channels, base, norm)
        self.enc2 = _block(base, 2 * base, norm)
        self.enc3 = _block(2 * base, 4 * base, norm)
        self.dec2 = _block(6 * base, 2 * base, norm)
        self.dec1 = _block(3 * base, base, norm)
        self.level_channels = (4 * base, 2 * base, base)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool3d(e1, 2))
        e3 = self.enc3(F.max_pool3d(e2, 2))
        d2 = self.dec2(torch.cat([_up(e3, e2.shape[2:]), e2], 1))
        d1 = self.dec1(torch.cat([_up(d2, e1.shape[2:]), e1], 1))
        return [e3, d2, d1]


class FeatureFusion(nn.Module):
    """Project each level to a shared width, upsample to the finest grid, sum, normalize."""

    def __init__(self, level_channels, out_channels: int, use_coarse: bool = True):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv3d(c, out_channels, 1, bias=False) for c in level_channels)
        self.norm = ChannelNorm(out_channels)
        self.use_coarse = use_coarse

    def forward(self, levels):
        finest = levels[-1]
        total = self.proj[-1](finest)
        if self.use_coarse:
            for proj, lvl in zip(self.proj[:-1], levels[:-1]):
                total = total + _up(proj(lvl), finest.shape[2:])
        return F.relu(self.norm(total))


class RPNHead(nn.Module):
    """One anchor per voxel: objectness logit plus (dx, dy, dz, log-size)."""

    def __init__(self, channels: int, prior: float = 0.01):
        super().__init__()
        self.conv = _conv(channels, channels)
        self.cls = nn.Conv3d(channels, 1, 1)
        self.reg = nn.Conv3d(channels, 4, 1)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.constant_(self.cls.bias, -float(np.log((1 - prior) / prior)))
        nn.init.normal_(self.reg.weight, std=0.01)
        nn.init.zeros_(self.reg.bias)

    def forward(self, x):
        h = F.relu(self.conv(x))
        return self.cls(h), self.reg(h)


class CMBDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.backbone = UNetBackbone(config.in_channels, config.base_channels, config.batch_norm)
        self.fusion = FeatureFusion(self.backbone.level_channels, config.fused_channels,
                                    use_coarse=config.use_ffm)
        self.head = RPNHead(config.fused_channels)

    def forward(self, x):
        levels = self.backbone(x)
        fused = self.fusion(levels)
        logits, reg = self.head(fused)
        return {"levels": levels, "features": fused, "logits": logits, "reg": reg}


# ---------------------------------------------------------------------------
# functional entry points
# ---------------------------------------------------------------------------

def _check_divisible(shape, levels: int = 3):
    k = 2 ** (levels - 1)
    bad = [s for s in shape if s % k]
    if bad:
        pad = tuple((-s) % k for s in shape)
        raise ValueError(f"crop size {tuple(shape)} must be divisible by {k}; pad by {pad}")


def backbone_forward(model: CMBDetector, crop) -> list[FeatureMap]:
    x = torch.as_tensor(crop, dtype=torch.float32)
    if x.ndim == 4:
        x = x.unsqueeze(0)
    _check_divisible(x.shape[2:], model.config.levels)
    return [FeatureMap(v) for v in model.backbone(x)]


def fuse_features(fusion: FeatureFusion, levels: list[FeatureMap]) -> FeatureMap:
    if len(levels) != 3:
        raise ValueError("fusion expects exactly three levels")
    fine = np.array(levels[-1].grid)
    for lvl, proj in zip(levels, fusion.proj):
        if lvl.channels != proj.in_channels:
            raise ValueError(f"level with {lvl.channels} channels, projection expects {proj.in_channels}")
        grid = np.array(lvl.grid)
        k = int(fine[0] // grid[0])
        if k < 1 or k & (k - 1) or not np.array_equal(grid * k, fine):
            raise ValueError(f"grid {lvl.grid} is not a power-of-two downsampling of {tuple(fine)}")
    return FeatureMap(fusion([lvl.values for lvl in levels]))


def rpn_forward(head: RPNHead, fused: FeatureMap) -> DetectionFieldOutput:
    logits, reg = head(fused.values)
    return DetectionFieldOutput(logits, reg)


def decode_boxes(
    field: DetectionFieldOutput,
    crop_origin=(0, 0, 0),
    spacing=(1.0, 1.0, 1.0),
    threshold: float = 0.5,
    anchor_size_mm: float = 5.0,
    edge_margin: tuple[int, ...] | None = None,
    volume_shape: tuple[int, ...] | None = None,
) -> list[DetectionCandidate]:
    """Threshold the probability map and decode YOLO-style boxes.

    ``edge_margin`` (per axis, per side) drops voxels near a window face;
    used only for interior faces during sliding-window inference.
    ``volume_shape`` clips centers onto the whole-volume voxel grid (offsets
    can otherwise reach one voxel past the last index).
    """
    prob = field.prob_map[0].detach().cpu().numpy()
    reg = field.reg_map[0].detach().cpu().numpy().astype(np.float64)
    keep = prob >= threshold
    if edge_margin is not None:
        for axis, (lo, hi) in enumerate(edge_margin):
            idx = [slice(None)] * 3
            if lo:
                idx[axis] = slice(0, lo)
                keep[tuple(idx)] = False
            if hi:
                idx[axis] = slice(prob.shape[axis] - hi, None)
                keep[tuple(idx)] = False
    vox = np.argwhere(keep)
    if len(vox) == 0:
        return []
    r = reg[:, vox[:, 0], vox[:, 1], vox[:, 2]]
    centers = vox + 1.0 / (1.0 + np.exp(-r[:3].T)) + np.asarray(crop_origin, dtype=float)
    if volume_shape is not None:
        centers = np.clip(centers, 0, np.asarray(volume_shape, dtype=float) - 1)
    sizes = anchor_size_mm * np.exp(r[3])
    scores = prob[vox[:, 0], vox[:, 1], vox[:, 2]]
    return [DetectionCandidate(tuple(float(v) for v in c), float(s), float(p))
            for c, s, p in zip(centers, sizes, scores)]


def _order(cands):
    return sorted(cands, key=lambda c: (-c.score, c.center))


def nms_3d(cands: list[DetectionCandidate], radius_mm: float,
           spacing=(1.0, 1.0, 1.0)) -> list[DetectionCandidate]:
    """Greedy point NMS: drop anything within ``radius_mm`` of a higher-ranked keeper."""
    if not cands:
        return []
    ordered = _order(cands)
    pts = np.array([c.center for c in ordered]) * np.asarray(spacing, dtype=float)
    # bucket points into radius-sized cells so each keeper only scans its neighbourhood
    cell = max(radius_mm, 1e-9)
    keys = np.floor(pts / cell).astype(np.int64)
    buckets: dict[tuple, list[int]] = {}
    for i, k in enumerate(map(tuple, keys)):
        buckets.setdefault(k, []).append(i)
    buckets = {k: np.array(v) for k, v in buckets.items()}
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    alive = np.ones(len(ordered), dtype=bool)
    kept = []
    for i in range(len(ordered)):
        if not alive[i]:
            continue
        kept.append(ordered[i])
        kx, ky, kz = keys[i]
        for dx, dy, dz in offsets:
            nb = buckets.get((kx + dx, ky + dy, kz + dz))
            if nb is None:
                continue
            nb = nb[nb > i]
            d2 = ((pts[nb] - pts[i]) ** 2).sum(1)
            alive[nb[d2 <= radius_mm ** 2]] = False
    return kept


def _fit_window(window, shape, multiple=4):
    out = []
    for w, s in zip(window, shape):
        w = min(w, s)
        out.append(w - w % multiple if w >= multiple else w)
    return tuple(out)


@torch.no_grad()
def predict_volume(model: CMBDetector, volume: np.ndarray, window=None, stride=None,
                   threshold: float | None = None, spacing=(1.0, 1.0, 1.0),
                   edge_margin: int = 0) -> list[DetectionCandidate]:
    """Sliding-window decode over a ``(C, X, Y, Z)`` array; no NMS, no z mapping."""
    cfg = model.config
    threshold = cfg.prob_threshold if threshold is None else threshold
    shape = volume.shape[1:]
    window = _fit_window(window or cfg.window, shape)
    if stride is None:
        stride = cfg.stride
    model.eval()
    out = []
    for spec in sliding_windows(shape, window, stride):
        crop = torch.from_numpy(np.ascontiguousarray(volume[(slice(None), *spec.slices)]))[None]
        res = model(crop)
        margin = None
        if edge_margin:
            margin = tuple(
                (edge_margin if o > 0 else 0, edge_margin if o + w < n else 0)
                for o, w, n in zip(spec.origin, spec.size, shape)
            )
        field = DetectionFieldOutput(res["logits"], res["reg"])
        out.extend(decode_boxes(field, spec.origin, spacing, threshold, cfg.anchor_size_mm, margin, shape))
    return out


def detect_subject(subject: SubjectRecord, model: CMBDetector, config: DetectorConfig | None = None,
                   threshold: float | None = None, edge_margin: int | None = None,
                   apply_nms: bool = True) -> list[DetectionCandidate]:
    """Run the detector over a preprocessed (normalized, z-interpolated) subject.

    Returned centers are in native voxel space, sorted by descending score.
    """
    config = config or model.config
    if subject.phase is None:
        raise ValueError(f"{subject.subject_id}: detector needs both SWI and phase channels")
    vol = np.stack([subject.swi.data, subject.phase.data]).astype(np.float32)
    if edge_margin is None:
        edge_margin = config.edge_margin
    cands = predict_volume(model, vol, config.window, config.stride, threshold,
                           subject.swi.spacing, edge_margin)
    depth_i = subject.swi.shape[2]
    native = []
    for c in cands:
        z = map_z(c.center[2], subject.native_depth, depth_i)
        native.append(DetectionCandidate((c.center[0], c.center[1], z), c.size_mm, c.score))
    zs = subject.swi.spacing[2] * (depth_i - 1) / max(subject.native_depth - 1, 1)
    native_spacing = (subject.swi.spacing[0], subject.swi.spacing[1], zs)
    if not apply_nms:
        return _order(native)
    return nms_3d(native, config.nms_radius_mm, native_spacing)
