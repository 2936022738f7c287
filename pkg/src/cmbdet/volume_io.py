"""Volume containers, intensity normalization, z-resampling, cropping and I/O.

Arrays are indexed ``[x, y, z]`` throughout; shapes are ``(W, H, D)``.
Annotations always live in native voxel space. Interpolated-space
coordinates are derived on demand with :func:`to_interp_z` / :func:`map_z`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

REGION_NAMES = ("none", "lobar", "deep", "infratentorial")
REGION_CODES = {name: code for code, name in enumerate(REGION_NAMES)}


class Modality(str, Enum):
    SWI = "SWI"
    PHASE = "Phase"
    T1 = "T1"
    LABELMAP = "LabelMap"


class Space(str, Enum):
    NATIVE = "native"
    Z_INTERP = "z_interp"


@dataclass
class Volume3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.SWI
    space: Space = Space.NATIVE

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected a 3D grid, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.modality == Modality.LABELMAP:
            if not np.isin(self.data, (0, 1, 2, 3)).all():
                raise ValueError("label map contains codes outside {0,1,2,3}")
        elif not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)


@dataclass
class CMBAnnotation:
    center: tuple[float, float, float]
    diameter_mm: float | None = None
    region: str | None = None

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        if self.diameter_mm is not None and not 2.0 <= self.diameter_mm <= 10.0:
            raise ValueError(f"CMB diameter {self.diameter_mm} mm outside [2, 10]")
        if self.region is not None and self.region not in REGION_NAMES[1:]:
            raise ValueError(f"unknown CMB region {self.region!r}")


@dataclass
class SubjectRecord:
    subject_id: str
    swi: Volume3D
    phase: Volume3D | None = None
    t1: Volume3D | None = None
    annotations: list[CMBAnnotation] = field(default_factory=list)
    label_map: Volume3D | None = None
    native_depth: int = 0

    def __post_init__(self):
        if not self.native_depth:
            if self.swi.space != Space.NATIVE:
                raise ValueError("native_depth is required for resampled subjects")
            self.native_depth = self.swi.shape[2]
        for vol in (self.phase, self.t1, self.label_map):
            if vol is None:
                continue
            if vol.shape != self.swi.shape or vol.spacing != self.swi.spacing:
                raise ValueError(f"{self.subject_id}: volumes disagree on shape/spacing")
        if self.swi.space == Space.NATIVE:
            shape = np.array(self.swi.shape)
            for ann in self.annotations:
                c = np.array(ann.center)
                if (c < 0).any() or (c > shape - 1).any():
                    raise ValueError(f"{self.subject_id}: annotation {ann.center} outside volume")


@dataclass(frozen=True)
class CropSpec:
    origin: tuple[int, int, int]
    size: tuple[int, int, int]

    @classmethod
    def clamped(cls, origin: Sequence[int], size: Sequence[int], shape: Sequence[int]) -> "CropSpec":
        """Build a crop shifted back inside ``shape``; sizes larger than the volume are an error."""
        if any(s > d for s, d in zip(size, shape)):
            raise ValueError(f"crop size {tuple(size)} exceeds volume shape {tuple(shape)}")
        o = tuple(int(min(max(0, o), d - s)) for o, s, d in zip(origin, size, shape))
        return cls(o, tuple(int(s) for s in size))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def contains(self, point: Sequence[float]) -> bool:
        return all(o <= p <= o + s - 1 for p, o, s in zip(point, self.origin, self.size))

    def to_local(self, point: Sequence[float]) -> tuple[float, ...]:
        return tuple(p - o for p, o in zip(point, self.origin))


def normalize_minmax(v: Volume3D) -> Volume3D:
    lo, hi = float(v.data.min()), float(v.data.max())
    if not hi > lo:
        raise ValueError("degenerate intensity range: volume is constant")
    data = ((v.data.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)
    return replace(v, data=data)


def interp_positions(native_depth: int, target_slices: int) -> np.ndarray:
    """Native z coordinate sampled by each output slice (endpoint aligned)."""
    if native_depth == 1:
        return np.zeros(target_slices)
    return np.arange(target_slices) * (native_depth - 1) / (target_slices - 1)


def interpolate_z(v: Volume3D, target_slices: int = 224) -> Volume3D:
    """Resample along z to ``target_slices`` with first/last slices aligned.

    Label maps use nearest-neighbour sampling so integer codes survive.
    """
    if target_slices < 2:
        raise ValueError("target_slices must be >= 2")
    if v.space != Space.NATIVE:
        raise ValueError("interpolate_z expects a native-space volume")
    depth = v.shape[2]
    if target_slices < depth:
        raise ValueError(f"target_slices={target_slices} is below native depth {depth}")
    pos = interp_positions(depth, target_slices)
    z_spacing = v.spacing[2] * (depth - 1) / (target_slices - 1)
    spacing = (v.spacing[0], v.spacing[1], z_spacing)
    if v.modality == Modality.LABELMAP:
        idx = np.floor(pos + 0.5).astype(int)
        data = v.data[:, :, idx]
    else:
        lo = np.clip(np.floor(pos).astype(int), 0, depth - 1)
        hi = np.minimum(lo + 1, depth - 1)
        w = (pos - lo).astype(np.float64)
        src = v.data.astype(np.float64)
        data = (src[:, :, lo] * (1 - w) + src[:, :, hi] * w).astype(np.float32)
    return replace(v, data=data, spacing=spacing, space=Space.Z_INTERP)


def map_z(z_interp_coord: float, native_depth: int, target_slices: int) -> float:
    """Interpolated-space z back to native z."""
    return z_interp_coord * (native_depth - 1) / (target_slices - 1)


def to_interp_z(z_native: float, native_depth: int, target_slices: int) -> float:
    """Native z forward into interpolated space; inverse of :func:`map_z`."""
    return z_native * (target_slices - 1) / (native_depth - 1)


def _axis_origins(length: int, window: int, stride: int) -> list[int]:
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] != length - window:
        origins.append(length - window)
    return origins


def sliding_windows(
    shape: Sequence[int], window: Sequence[int], stride: Sequence[int] | None = None
) -> list[CropSpec]:
    """Cover ``shape`` with ``window`` tiles; the last tile per axis is clamped to the end."""
    if stride is None:
        stride = [max(1, w // 2) for w in window]
    if any(w > s for w, s in zip(window, shape)):
        raise ValueError(f"window {tuple(window)} larger than shape {tuple(shape)}")
    if any(s < 1 for s in stride):
        raise ValueError("stride must be >= 1")
    if any(s > w for s, w in zip(stride, window)):
        raise ValueError(f"stride {tuple(stride)} exceeds window {tuple(window)}; voxels would be skipped")
    axes = [_axis_origins(n, w, s) for n, w, s in zip(shape, window, stride)]
    size = tuple(int(w) for w in window)
    return [CropSpec(tuple(o), size) for o in product(*axes)]


def make_coordinate_tensors(shape: Sequence[int]) -> tuple[Volume3D, Volume3D, Volume3D]:
    """Three grids whose values run 0 -> 1 along x, y and z respectively."""
    if any(n < 2 for n in shape):
        raise ValueError("coordinate tensors need at least 2 voxels per axis")
    out = []
    for axis, n in enumerate(shape):
        ramp = (np.arange(n) / (n - 1)).astype(np.float32)
        view = [1, 1, 1]
        view[axis] = n
        out.append(Volume3D(np.broadcast_to(ramp.reshape(view), tuple(shape)).copy()))
    return tuple(out)


def extract_crop(v: Volume3D | np.ndarray, spec: CropSpec) -> np.ndarray:
    data = v.data if isinstance(v, Volume3D) else v
    shape = data.shape[-3:]
    if any(o < 0 or o + s > d for o, s, d in zip(spec.origin, spec.size, shape)):
        raise ValueError(f"crop {spec} outside volume of shape {shape}")
    return data[(Ellipsis, *spec.slices)].copy()


def preprocess_for_detection(subject: SubjectRecord, target_slices: int = 224) -> SubjectRecord:
    """Normalize SWI/phase and resample both to ``target_slices`` along z."""
    swi = interpolate_z(normalize_minmax(subject.swi), target_slices)
    phase = None
    if subject.phase is not None:
        phase = interpolate_z(normalize_minmax(subject.phase), target_slices)
    return SubjectRecord(subject.subject_id, swi, phase, None, list(subject.annotations), None,
                         native_depth=subject.swi.shape[2])


def preprocess_for_segmentation(subject: SubjectRecord, modality: str = "swi") -> Volume3D:
    vol = subject.t1 if modality.lower() == "t1" else subject.swi
    if vol is None:
        raise ValueError(f"{subject.subject_id}: no {modality} volume available")
    return normalize_minmax(vol)


def annotation_interp_coords(subject: SubjectRecord, target_slices: int) -> list[tuple[float, float, float]]:
    depth = subject.native_depth
    return [(a.center[0], a.center[1], to_interp_z(a.center[2], depth, target_slices))
            for a in subject.annotations]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_nifti(path: str | Path, modality: Modality = Modality.SWI) -> Volume3D:
    import nibabel as nib

    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
    if modality == Modality.LABELMAP:
        return Volume3D(data.astype(np.int16), spacing, modality)
    return Volume3D(data.astype(np.float32), spacing, modality)


def save_nifti(v: Volume3D, path: str | Path) -> None:
    import nibabel as nib

    dtype = np.int16 if v.modality == Modality.LABELMAP else np.float32
    img = nib.Nifti1Image(np.asarray(v.data, dtype=dtype), np.diag([*v.spacing, 1.0]))
    img.header.set_zooms(v.spacing)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))


def read_annotations(path: str | Path) -> dict[str, list[CMBAnnotation]]:
    doc = json.loads(Path(path).read_text())
    out = {}
    for subj in doc["subjects"]:
        out[str(subj["id"])] = [
            CMBAnnotation((c["x"], c["y"], c["z"]), c.get("diameter_mm"), c.get("region"))
            for c in subj.get("cmbs", [])
        ]
    return out


def write_annotations(path: str | Path, subjects: Iterable[SubjectRecord]) -> None:
    doc = {"subjects": []}
    for s in subjects:
        cmbs = []
        for a in s.annotations:
            entry = {"x": a.center[0], "y": a.center[1], "z": a.center[2]}
            if a.diameter_mm is not None:
                entry["diameter_mm"] = a.diameter_mm
            if a.region is not None:
                entry["region"] = a.region
            cmbs.append(entry)
        doc["subjects"].append({"id": s.subject_id, "cmbs": cmbs})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2))


_FILES = {"swi": Modality.SWI, "phase": Modality.PHASE, "t1": Modality.T1, "labels": Modality.LABELMAP}


def save_subject(subject: SubjectRecord, root: str | Path) -> None:
    """Write one subject's volumes as ``root/<id>/<name>.nii.gz``."""
    folder = Path(root) / subject.subject_id
    vols = {"swi": subject.swi, "phase": subject.phase, "t1": subject.t1, "labels": subject.label_map}
    for name, vol in vols.items():
        if vol is not None:
            save_nifti(vol, folder / f"{name}.nii.gz")


def load_subject(root: str | Path, subject_id: str,
                 annotations: list[CMBAnnotation] | None = None) -> SubjectRecord:
    folder = Path(root) / subject_id
    vols = {}
    for name, modality in _FILES.items():
        p = folder / f"{name}.nii.gz"
        if not p.exists():
            p = folder / f"{name}.nii"
        vols[name] = load_nifti(p, modality) if p.exists() else None
    if vols["swi"] is None:
        raise FileNotFoundError(f"{folder}: swi.nii(.gz) missing")
    return SubjectRecord(subject_id, vols["swi"], vols["phase"], vols["t1"],
                         list(annotations or []), vols["labels"])


def load_dataset(data_root: str | Path, ids: Sequence[str] | None = None) -> list[SubjectRecord]:
    root = Path(data_root)
    anns = read_annotations(root / "annotations.json")
    if ids is None:
        ids = sorted(anns)
    return [load_subject(root / "subjects", sid, anns.get(sid, [])) for sid in ids]
