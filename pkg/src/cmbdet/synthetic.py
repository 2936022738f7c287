"""Deterministic SWI/phase/T1 phantoms with planted microbleeds and mimics.

Geometry is schematic: an ellipsoidal brain split into an outer lobar shell,
a deep core, an inferior infratentorial cap and two ventricle-like pockets.
CMBs are small dark blobs in both SWI and phase; vessels are dark tubes;
calcifications are dark in SWI but bright in phase.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .volume_io import (
    REGION_CODES,
    REGION_NAMES,
    CMBAnnotation,
    Modality,
    SubjectRecord,
    Volume3D,
)

_MAX_TRIES = 2000


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (96, 96, 48)
    spacing: tuple[float, float, float] = (0.5, 0.5, 2.0)
    n_cmbs: int = 3
    n_vessels: int = 3
    n_calcifications: int = 2
    cmb_diameter_range_mm: tuple[float, float] = (2.0, 10.0)
    vessel_diameter_range_mm: tuple[float, float] = (2.0, 3.0)
    calcification_diameter_range_mm: tuple[float, float] = (2.0, 5.0)
    # fraction of calcifications placed inside the ventricle pockets (choroid-plexus style)
    calcification_in_ventricle: float = 0.5
    min_gap_mm: float = 6.0
    noise_sigma: float = 0.03
    seed: int = 0


@dataclass
class Lesion:
    kind: str  # "cmb" | "vessel" | "calcification"
    start_mm: np.ndarray
    end_mm: np.ndarray
    radius_mm: float
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))


@dataclass
class Phantom:
    subject: SubjectRecord
    lesions: list[Lesion]
    brain_mask: np.ndarray
    lesion_masks: dict[str, np.ndarray]


class _Geometry:
    def __init__(self, spec: PhantomSpec, rng: np.random.Generator):
        self.spec = spec
        sp = np.asarray(spec.spacing, dtype=float)
        extent = np.asarray(spec.shape) * sp
        self.center = (np.asarray(spec.shape) - 1) * sp / 2
        self.axes = 0.45 * extent * rng.uniform(0.96, 1.04, size=3)
        self.vent_offset = 0.2 * self.axes[0]
        self.vent_axes = np.array([0.12, 0.2, 0.3]) * self.axes
        grids = np.meshgrid(*[np.arange(n) * s for n, s in zip(spec.shape, sp)], indexing="ij")
        self.coords = np.stack(grids, axis=-1)  # mm, (W,H,D,3)

    def norm_radius(self, p):
        return np.sqrt((((p - self.center) / self.axes) ** 2).sum(-1))

    def in_ventricle(self, p):
        out = np.zeros(np.shape(p)[:-1], dtype=bool)
        for sign in (-1, 1):
            c = self.center + np.array([sign * self.vent_offset, 0.0, 0.0])
            out |= (((p - c) / self.vent_axes) ** 2).sum(-1) <= 1.0
        return out

    def region(self, p):
        p = np.asarray(p, dtype=float)
        r = self.norm_radius(p)
        zn = (p[..., 2] - self.center[2]) / self.axes[2]
        labels = np.full(r.shape, REGION_CODES["lobar"], dtype=np.int16)
        labels[r < 0.5] = REGION_CODES["deep"]
        labels[zn < -0.55] = REGION_CODES["infratentorial"]
        labels[self.in_ventricle(p)] = REGION_CODES["none"]
        labels[r > 1.0] = REGION_CODES["none"]
        return labels

    def label_map(self):
        return self.region(self.coords)


def _segment_distance(coords, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return np.linalg.norm(coords - a, axis=-1)
    t = np.clip(((coords - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(coords - (a + t[..., None] * ab), axis=-1)


def _lesion_distance(x: Lesion, y: Lesion) -> float:
    ts = np.linspace(0, 1, 25)[:, None]
    px = x.start_mm + ts * (x.end_mm - x.start_mm)
    return float(_segment_distance(px, y.start_mm, y.end_mm).min())


def _profile(geom: _Geometry, les: Lesion, softness: float = 0.35) -> np.ndarray:
    """Soft membership in [0, 1]; 1 in the lesion core, 0 well outside."""
    if les.kind == "vessel":
        d = _segment_distance(geom.coords, les.start_mm, les.end_mm)
    else:
        d = np.linalg.norm((geom.coords - les.start_mm) / les.scale, axis=-1)
    return np.clip((les.radius_mm - d) / softness + 0.5, 0.0, 1.0)


def _footprint_ok(geom: _Geometry, les: Lesion, labels: np.ndarray, allow_none: bool) -> bool:
    ts = np.linspace(0, 1, 9)[:, None] if les.kind == "vessel" else np.zeros((1, 1))
    pts = les.start_mm + ts * (les.end_mm - les.start_mm)
    # brain must contain the whole lesion with some slack
    if (geom.norm_radius(pts) + les.radius_mm / geom.axes.min() > 0.95).any():
        return False
    if allow_none:
        return True
    # every voxel within the lesion radius must carry a brain region
    near = np.linalg.norm(geom.coords - les.start_mm, axis=-1) <= les.radius_mm
    return bool((labels[near] != REGION_CODES["none"]).all())


def _place(geom, rng, existing, labels, make, allow_none=False):
    spec = geom.spec
    for _ in range(_MAX_TRIES):
        les = make()
        if not _footprint_ok(geom, les, labels, allow_none):
            continue
        if all(_lesion_distance(les, o) > les.radius_mm + o.radius_mm + spec.min_gap_mm
               and _lesion_distance(o, les) > les.radius_mm + o.radius_mm + spec.min_gap_mm
               for o in existing):
            return les
    raise RuntimeError("phantom spec unsatisfiable: could not place lesions without overlap")


def _random_voxel_mm(geom, rng, inside_ventricle=False):
    spec = geom.spec
    sp = np.asarray(spec.spacing)
    if inside_ventricle:
        sign = rng.choice([-1, 1])
        c = geom.center + np.array([sign * geom.vent_offset, 0.0, 0.0])
        p = c + rng.uniform(-0.5, 0.5, size=3) * geom.vent_axes
    else:
        p = geom.center + rng.uniform(-1, 1, size=3) * geom.axes
    idx = np.clip(np.round(p / sp), 0, np.asarray(spec.shape) - 1)
    return idx * sp


def generate_phantom(spec: PhantomSpec, n_cmbs: int | None = None) -> Phantom:
    """Render one phantom subject; ``n_cmbs`` overrides ``spec.n_cmbs``."""
    rng = np.random.default_rng(spec.seed)
    geom = _Geometry(spec, rng)
    labels = geom.label_map()
    sp = np.asarray(spec.spacing)
    n_cmbs = spec.n_cmbs if n_cmbs is None else n_cmbs

    lesions: list[Lesion] = []

    def make_cmb():
        d = rng.uniform(*spec.cmb_diameter_range_mm)
        c = _random_voxel_mm(geom, rng)
        return Lesion("cmb", c, c.copy(), d / 2, rng.uniform(0.85, 1.0, size=3))

    def make_vessel():
        d = rng.uniform(*spec.vessel_diameter_range_mm)
        length = rng.uniform(4.0, 8.0) * d
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        mid = _random_voxel_mm(geom, rng)
        return Lesion("vessel", mid - direction * length / 2, mid + direction * length / 2, d / 2)

    def make_calc(in_vent):
        d = rng.uniform(*spec.calcification_diameter_range_mm)
        c = _random_voxel_mm(geom, rng, inside_ventricle=in_vent)
        return Lesion("calcification", c, c.copy(), d / 2)

    in_vent = rng.uniform(size=spec.n_calcifications) < spec.calcification_in_ventricle
    # the ventricle pockets are small, so fill them before anything else
    for _ in range(int(in_vent.sum())):
        lesions.append(_place(geom, rng, lesions, labels, lambda: make_calc(True), allow_none=True))
    for _ in range(n_cmbs):
        lesions.append(_place(geom, rng, lesions, labels, make_cmb))
    for _ in range(spec.n_vessels):
        lesions.append(_place(geom, rng, lesions, labels, make_vessel, allow_none=True))
    for _ in range(int((~in_vent).sum())):
        lesions.append(_place(geom, rng, lesions, labels, lambda: make_calc(False), allow_none=True))

    brain = labels != REGION_CODES["none"]
    brain |= geom.in_ventricle(geom.coords)
    tissue_swi = np.where(brain, 0.7, 0.0)
    tissue_swi[labels == REGION_CODES["deep"]] = 0.64
    tissue_swi[geom.in_ventricle(geom.coords)] = 0.85
    t1 = np.zeros(spec.shape)
    t1[labels == REGION_CODES["lobar"]] = 0.6
    t1[labels == REGION_CODES["deep"]] = 0.75
    t1[labels == REGION_CODES["infratentorial"]] = 0.5
    t1[geom.in_ventricle(geom.coords)] = 0.2

    darken = np.zeros(spec.shape)
    phase_shift = np.zeros(spec.shape)
    masks = {k: np.zeros(spec.shape, dtype=bool) for k in ("cmb", "vessel", "calcification")}
    for les in lesions:
        p = _profile(geom, les)
        masks[les.kind] |= p >= 0.5
        darken = np.maximum(darken, rng.uniform(0.55, 0.75) * p)
        sign = 1.0 if les.kind == "calcification" else -1.0
        phase_shift += sign * rng.uniform(0.2, 0.3) * p

    swi = tissue_swi * (1.0 - darken)
    phase = np.where(brain, 0.5 + phase_shift, 0.0)
    swi = swi + rng.normal(0, spec.noise_sigma, spec.shape)
    phase = phase + rng.normal(0, spec.noise_sigma, spec.shape)
    t1 = t1 + rng.normal(0, spec.noise_sigma, spec.shape)

    anns = []
    for les in lesions:
        if les.kind != "cmb":
            continue
        idx = tuple(int(v) for v in np.round(les.start_mm / sp))
        anns.append(CMBAnnotation(idx, round(2 * les.radius_mm, 4), REGION_NAMES[labels[idx]]))

    def vol(a, modality):
        return Volume3D(a.astype(np.float32), spec.spacing, modality)

    subject = SubjectRecord(
        subject_id=f"seed{spec.seed}",
        swi=vol(swi, Modality.SWI),
        phase=vol(phase, Modality.PHASE),
        t1=vol(t1, Modality.T1),
        annotations=anns,
        label_map=Volume3D(labels, spec.spacing, Modality.LABELMAP),
    )
    return Phantom(subject, lesions, brain, masks)


def derive_seeds(master_seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(n)]


def generate_dataset(
    n_subjects: int,
    spec_template: PhantomSpec | None = None,
    seed: int = 0,
    normal_fraction: float = 0.0,
    prefix: str = "sub",
) -> list[SubjectRecord]:
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    spec_template = spec_template or PhantomSpec()
    seeds = derive_seeds(seed, n_subjects)
    n_normal = int(round(n_subjects * normal_fraction))
    normal = set(np.random.default_rng(seed).permutation(n_subjects)[:n_normal].tolist())
    out = []
    for i, s in enumerate(seeds):
        ph = generate_phantom(replace(spec_template, seed=s), n_cmbs=0 if i in normal else None)
        ph.subject.subject_id = f"{prefix}-{i:03d}"
        out.append(ph.subject)
    return out


def volume_digest(subject: SubjectRecord) -> str:
    h = hashlib.sha256()
    for v in (subject.swi, subject.phase, subject.t1, subject.label_map):
        if v is not None:
            h.update(np.ascontiguousarray(v.data).tobytes())
    return h.hexdigest()
