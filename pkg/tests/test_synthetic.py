from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmbdet.synthetic import PhantomSpec, derive_seeds, generate_dataset, generate_phantom, volume_digest
from cmbdet.volume_io import REGION_CODES, normalize_minmax

SMALL = PhantomSpec(shape=(48, 48, 24), n_cmbs=2, n_vessels=1, n_calcifications=1,
                   cmb_diameter_range_mm=(2.0, 5.0), min_gap_mm=2.0)


def test_fixed_seed_is_byte_identical():
    a = generate_phantom(replace(SMALL, seed=3)).subject
    b = generate_phantom(replace(SMALL, seed=3)).subject
    assert volume_digest(a) == volume_digest(b)
    assert a.annotations == b.annotations


def test_default_phantom_counts_and_diameters():
    ph = generate_phantom(PhantomSpec(seed=5))
    subj = ph.subject
    assert subj.swi.shape == (96, 96, 48) and subj.swi.spacing == (0.5, 0.5, 2.0)
    assert len(subj.annotations) == 3
    assert all(2.0 <= a.diameter_mm <= 10.0 for a in subj.annotations)
    kinds = [les.kind for les in ph.lesions]
    assert kinds.count("vessel") == 3 and kinds.count("calcification") == 2


def test_calcifications_are_dark_in_swi_and_bright_in_phase():
    ph = generate_phantom(PhantomSpec(seed=8))
    subj = ph.subject
    brain = ph.brain_mask
    calc = ph.lesion_masks["calcification"]
    assert calc.any()
    assert subj.swi.data[calc].max() < subj.swi.data[brain].mean()
    assert subj.phase.data[calc].min() > subj.phase.data[brain].mean()
    cmb = ph.lesion_masks["cmb"]
    assert subj.phase.data[cmb].mean() < subj.phase.data[brain].mean()


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cmbs_never_sit_in_none_regions(seed):
    ph = generate_phantom(replace(SMALL, seed=seed))
    labels = ph.subject.label_map.data
    for a in ph.subject.annotations:
        idx = tuple(int(v) for v in a.center)
        assert labels[idx] != REGION_CODES["none"]
        assert a.region == ("lobar", "deep", "infratentorial")[labels[idx] - 1]


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lesions_do_not_overlap(seed):
    from cmbdet.synthetic import _lesion_distance

    ph = generate_phantom(replace(SMALL, seed=seed))
    les = ph.lesions
    for i in range(len(les)):
        for j in range(i + 1, len(les)):
            assert _lesion_distance(les[i], les[j]) > les[i].radius_mm + les[j].radius_mm


def test_vessels_span_consecutive_slices_and_cmbs_stay_compact():
    ph = generate_phantom(PhantomSpec(seed=21))
    sp = np.asarray(ph.subject.swi.spacing)
    from scipy import ndimage

    lab, n = ndimage.label(ph.lesion_masks["vessel"])
    assert n >= 1
    for k in range(1, n + 1):
        idx = np.argwhere(lab == k)
        extent = idx.max(0) - idx.min(0) + 1
        assert extent.max() >= 3
    for les in ph.lesions:
        if les.kind != "cmb":
            continue
        c = np.round(les.start_mm / sp).astype(int)
        mask = ph.lesion_masks["cmb"]
        lab, _ = ndimage.label(mask)
        blob = np.argwhere(lab == lab[tuple(c)])
        extent_mm = (blob.max(0) - blob.min(0) + 1) * sp
        assert extent_mm.max() <= 2 * les.radius_mm + sp.max()


def test_volumes_normalize_cleanly():
    subj = generate_phantom(SMALL).subject
    for v in (subj.swi, subj.phase, subj.t1):
        out = normalize_minmax(v)
        assert out.data.min() == 0 and out.data.max() == pytest.approx(1)


def test_dataset_normal_fraction():
    subjects = generate_dataset(10, SMALL, seed=4, normal_fraction=0.3)
    assert sum(1 for s in subjects if not s.annotations) == 3
    assert [s.subject_id for s in subjects] == [f"sub-{i:03d}" for i in range(10)]


def test_dataset_reproducible_and_pairwise_distinct():
    a = generate_dataset(4, SMALL, seed=9)
    b = generate_dataset(4, SMALL, seed=9)
    digests = [volume_digest(s) for s in a]
    assert digests == [volume_digest(s) for s in b]
    assert len(set(digests)) == 4


def test_derived_seeds_are_distinct_and_stable():
    seeds = derive_seeds(7, 50)
    assert seeds == derive_seeds(7, 50)
    assert len(set(seeds)) == 50
    assert seeds[:5] == derive_seeds(7, 5)


def test_unsatisfiable_spec_raises():
    crowded = PhantomSpec(shape=(16, 16, 8), n_cmbs=30, n_vessels=0, n_calcifications=0)
    with pytest.raises(RuntimeError):
        generate_phantom(crowded)


def test_zero_subjects_rejected():
    with pytest.raises(ValueError):
        generate_dataset(0)
