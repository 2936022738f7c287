"""Dataclass configs with JSON round-tripping and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

ABLATIONS = ("rpn", "rpn_ffm", "rpn_ffm_hspl")


@dataclass
class DetectorConfig:
    in_channels: int = 2  # (SWI, phase)
    base_channels: int = 8
    fused_channels: int = 16
    levels: int = 3
    use_ffm: bool = True
    anchor_size_mm: float = 5.0
    prob_threshold: float = 0.5
    nms_radius_mm: float = 5.0
    target_slices: int = 224
    train_crop: tuple[int, int, int] = (128, 128, 128)
    window: tuple[int, int, int] = (128, 128, 128)
    stride: tuple[int, int, int] | None = None
    # candidates this close (voxels) to an interior window face are left to the neighbouring window
    edge_margin: int = 0
    # voxels within this distance of a CMB center are objectness positives
    pos_radius_mm: float = 1.0
    batch_norm: bool = True

    def __post_init__(self):
        if self.levels != 3:
            raise ValueError("the fusion module aggregates exactly three levels")
        if not 2.0 <= self.anchor_size_mm <= 10.0:
            raise ValueError("anchor_size_mm must lie in [2, 10]")
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValueError("prob_threshold must lie in (0, 1)")


@dataclass
class SegmenterConfig:
    input_modality: str = "swi"
    in_channels: int = 4
    base_channels: int = 8
    crop_size: tuple[int, int, int] = (64, 64, 16)
    classes: int = 4
    stride: tuple[int, int, int] | None = None
    batch_norm: bool = True

    def __post_init__(self):
        if self.in_channels != 4:
            raise ValueError("segmenter input is one image channel plus three coordinate channels")
        if self.input_modality.lower() not in ("swi", "t1"):
            raise ValueError("input_modality must be swi or t1")


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_reg: float = 0.001
    lambda_con: float = 0.01
    margin_n: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    focal_normalize: str = "positives"

    def __post_init__(self):
        if self.focal_normalize not in ("mean", "positives"):
            raise ValueError("focal_normalize must be 'mean' or 'positives'")
        for k, v in dataclasses.asdict(self).items():
            if isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"{k} must be nonnegative")


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    grad_clip: float | None = 1.0  # global L2 norm; None disables


@dataclass
class SchedulerConfig:
    kind: str = "step"
    step_size: int = 50
    gamma: float = 0.5


@dataclass
class ExperimentConfig:
    data_root: str = "data"
    output_dir: str = "runs/default"
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    seg_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("adam", 0.003, 0.9))
    batch_size: int = 1
    epochs: int = 20
    crops_per_epoch: int = 80
    seg_steps: int = 400
    checkpoint_every: int = 5
    seed: int = 0
    ablation: str = "rpn_ffm_hspl"
    train_ids: list[str] | None = None
    match_radius_mm: float = 5.0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")

    def arm(self) -> "ExperimentConfig":
        """Copy with the ablation switches applied to detector and loss settings."""
        det = dataclasses.replace(self.detector, use_ffm=self.ablation != "rpn")
        losses = self.losses
        if self.ablation != "rpn_ffm_hspl":
            losses = dataclasses.replace(losses, lambda_con=0.0)
        return dataclasses.replace(self, detector=det, losses=losses)


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in data.items():
        if k not in hints:
            raise KeyError(f"unknown config key {cls.__name__}.{k}")
        sub = _SUBCONFIGS.get((cls, k))
        if sub is not None and isinstance(v, dict):
            v = _build(sub, v)
        elif isinstance(v, list) and k in _TUPLE_KEYS:
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


_SUBCONFIGS = {
    (ExperimentConfig, "detector"): DetectorConfig,
    (ExperimentConfig, "segmenter"): SegmenterConfig,
    (ExperimentConfig, "losses"): LossWeights,
    (ExperimentConfig, "optimizer"): OptimizerConfig,
    (ExperimentConfig, "scheduler"): SchedulerConfig,
    (ExperimentConfig, "seg_optimizer"): OptimizerConfig,
}
_TUPLE_KEYS = {"train_crop", "window", "stride", "crop_size"}


def from_dict(data: dict, cls=ExperimentConfig):
    return _build(cls, data)


def detector_config_from_dict(data: dict) -> DetectorConfig:
    return _build(DetectorConfig, data)


def segmenter_config_from_dict(data: dict) -> SegmenterConfig:
    return _build(SegmenterConfig, data)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    return from_dict(apply_overrides(data, overrides or []))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2))


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
