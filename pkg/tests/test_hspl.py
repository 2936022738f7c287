import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmbdet.config import LossWeights
from cmbdet.hspl import (
    LOSS_COLUMNS,
    PrototypePair,
    TrainingCrop,
    build_targets,
    concentration_loss,
    extract_feature_vector,
    focal_loss,
    hspl_loss,
    regression_loss,
    sample_balanced_crops,
    select_coordinate,
    total_loss,
    write_feature_csv,
    write_loss_csv,
)
from cmbdet.synthetic import PhantomSpec, generate_dataset
from cmbdet.volume_io import preprocess_for_detection
from oracles import focal_reference, lexicographic_argmax

T = torch.tensor


# ---------------------------------------------------------------------------
# concentration loss
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("v,m_a,m_b,expected", [
    ((1, 0), (1, 0), (0, 1), 0.0),
    ((0, 1), (1, 0), (0, 1), 2.0),
    ((0, 0), (1, 0), (0, 1), 1.0),
    ((0.3, 0.3), (0.3, 0.3), (0.3, 0.3), 1.0),
])
def test_concentration_examples(v, m_a, m_b, expected):
    out = concentration_loss(T(v, dtype=torch.float64), T(m_a, dtype=torch.float64), T(m_b, dtype=torch.float64))
    assert out.item() == pytest.approx(expected, abs=1e-8)


def test_concentration_dimension_mismatch():
    with pytest.raises(ValueError):
        concentration_loss(torch.zeros(3), torch.zeros(2), torch.zeros(3))


vec = arrays(np.float64, 5, elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec)
def test_concentration_bounds_and_antisymmetry(v, a, b):
    v, a, b = map(torch.from_numpy, (v, a, b))
    lab = concentration_loss(v, a, b).item()
    lba = concentration_loss(v, b, a).item()
    assert -1e-6 <= lab <= 2 + 1e-6
    if ((v - a) ** 2).sum() + ((v - b) ** 2).sum() > 1e-3:
        assert lab + lba == pytest.approx(2.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(vec, vec, vec, st.integers(0, 2**31 - 1))
def test_concentration_rotation_invariant(v, a, b, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(5, 5)))
    rot = torch.from_numpy(q)
    v, a, b = map(torch.from_numpy, (v, a, b))
    before = concentration_loss(v, a, b).item()
    after = concentration_loss(rot @ v, rot @ a, rot @ b).item()
    assert after == pytest.approx(before, abs=1e-7)


def test_concentration_batched_rows():
    v = torch.rand(7, 4, dtype=torch.float64)
    a, b = torch.rand(4, dtype=torch.float64), torch.rand(4, dtype=torch.float64)
    rows = concentration_loss(v, a, b)
    assert rows.shape == (7,)
    assert torch.allclose(rows, torch.stack([concentration_loss(r, a, b) for r in v]))


def test_prototype_roles_and_init():
    protos = PrototypePair(6, generator=torch.Generator().manual_seed(0))
    m_a, m_b = protos.roles(True)
    assert m_a is protos.cmb_prototype and m_b is protos.mimic_prototype
    m_a, m_b = protos.roles(False)
    assert m_a is protos.mimic_prototype and m_b is protos.cmb_prototype
    assert not torch.equal(protos.cmb_prototype, protos.mimic_prototype)
    assert protos.cmb_prototype.abs().max() < 0.1
    assert all(p.requires_grad for p in protos.parameters())


# ---------------------------------------------------------------------------
# focal / regression / total
# ---------------------------------------------------------------------------

def test_focal_single_voxel_oracle():
    value = focal_loss(T([0.9], dtype=torch.float64), T([1.0], dtype=torch.float64), gamma=2, alpha=0.25)
    assert value.item() == pytest.approx(0.25 * 0.01 * -math.log(0.9), rel=1e-12)
    assert value.item() == pytest.approx(2.634e-4, abs=5e-8)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(0.01, 0.99)), arrays(np.int8, 6, elements=st.integers(0, 1)))
def test_focal_gamma_zero_is_half_cross_entropy(p, t):
    ours = focal_loss(torch.from_numpy(p), torch.from_numpy(t.astype(np.float64)), gamma=0, alpha=0.5)
    ce = torch.nn.functional.binary_cross_entropy(torch.from_numpy(p), torch.from_numpy(t.astype(np.float64)))
    assert ours.item() == pytest.approx(0.5 * ce.item(), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(0.001, 0.999)), arrays(np.int8, 5, elements=st.integers(0, 1)),
       st.floats(0, 4), st.floats(0.05, 0.95))
def test_focal_matches_reference(p, t, gamma, alpha):
    ours = focal_loss(torch.from_numpy(p), torch.from_numpy(t.astype(np.float64)), gamma, alpha).item()
    ref = np.mean([focal_reference(pi, ti, gamma, alpha) for pi, ti in zip(p, t)])
    assert ours == pytest.approx(ref, rel=1e-9, abs=1e-15)


def test_focal_hard_predictions_near_zero_and_clamped():
    t = T([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
    assert focal_loss(t.clone(), t).item() < 1e-12
    wrong = focal_loss(1 - t, t).item()
    assert math.isfinite(wrong) and wrong > 1


def test_focal_positive_normalisation():
    p = T([0.2, 0.4, 0.6, 0.8], dtype=torch.float64)
    t = T([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    mean = focal_loss(p, t)
    pos = focal_loss(p, t, normalize="positives")
    assert pos.item() == pytest.approx(mean.item() * 4 / 2)
    none = focal_loss(p, torch.zeros(4, dtype=torch.float64), normalize="positives")
    assert none.item() == pytest.approx(focal_loss(p, torch.zeros(4, dtype=torch.float64)).item() * 4)
    with pytest.raises(ValueError):
        focal_loss(p, t, normalize="bogus")
    with pytest.raises(ValueError):
        focal_loss(p, t[:3])


def test_regression_examples():
    mask = np.zeros((2, 2, 2), dtype=bool)
    mask[1, 0, 1] = True
    targets = np.zeros((4, 2, 2, 2))
    targets[:, 1, 0, 1] = [0.5, 0.5, 0.5, 0.2]
    raw = torch.zeros(4, 2, 2, 2, dtype=torch.float64)
    raw[3, 1, 0, 1] = 0.2
    assert regression_loss(raw, targets, mask).item() == pytest.approx(0.0, abs=1e-12)
    targets[2, 1, 0, 1] = 0.0  # raw 0 decodes to 0.5: one axis off by 0.5
    assert regression_loss(raw, targets, mask).item() == pytest.approx(0.25, abs=1e-12)
    assert regression_loss(raw, targets, np.zeros_like(mask)).item() == 0.0


def test_regression_zero_positives_still_differentiable():
    raw = torch.zeros(4, 2, 2, 2, requires_grad=True)
    loss = regression_loss(raw, np.zeros((4, 2, 2, 2)), np.zeros((2, 2, 2), dtype=bool))
    loss.backward()
    assert raw.grad.abs().sum() == 0


def test_total_loss_examples():
    w = LossWeights()
    assert total_loss(0.4, 10, 1, w).L_final == pytest.approx(0.42)
    assert total_loss(0, 0, 0, w).L_final == 0
    off = LossWeights(lambda_con=0.0)
    assert total_loss(0.4, 10, 1, off).L_final == pytest.approx(0.41)
    with pytest.raises(FloatingPointError, match="L_reg"):
        total_loss(0.1, float("nan"), 0.0, w)
    with pytest.raises(FloatingPointError, match="L_con"):
        total_loss(torch.tensor(0.1), torch.tensor(0.0), torch.tensor(float("inf")), w)


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_cls, w.lambda_reg, w.lambda_con, w.margin_n) == (1.0, 0.001, 0.01, 1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_reg=-1)


# ---------------------------------------------------------------------------
# sampling, coordinate selection, feature vectors
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pool():
    spec = PhantomSpec(shape=(48, 48, 24), n_cmbs=2, n_vessels=1, n_calcifications=1,
                       cmb_diameter_range_mm=(2.0, 5.0), min_gap_mm=2.0)
    return [preprocess_for_detection(s, 48) for s in generate_dataset(3, spec, seed=5)]


def test_sampler_balance_and_reproducibility(pool):
    crops = sample_balanced_crops(pool, (16, 16, 8), 8, seed=3)
    assert sum(c.contains_cmb for c in crops) == 4
    again = sample_balanced_crops(pool, (16, 16, 8), 8, seed=3)
    assert [c.origin for c in crops] == [c.origin for c in again]
    assert all(c.X.shape == (2, 16, 16, 8) for c in crops)
    with pytest.raises(ValueError):
        sample_balanced_crops(pool, (16, 16, 8), 7)


def test_sampler_requires_annotations(pool):
    from dataclasses import replace

    empty = [replace(s, annotations=[]) for s in pool]
    with pytest.raises(ValueError):
        sample_balanced_crops(empty, (16, 16, 8), 2)


def test_training_crop_validation():
    x = np.zeros((2, 4, 4, 4), dtype=np.float32)
    with pytest.raises(ValueError):
        TrainingCrop(x, True, [])
    with pytest.raises(ValueError):
        TrainingCrop(x, True, [(4.0, 0.0, 0.0)], [3.0])


@pytest.mark.parametrize("shape", [(2, 3, 2), (3, 3, 3)])
def test_select_coordinate_exhaustive_small(shape):
    x = np.zeros((2, *shape), dtype=np.float32)
    neg = TrainingCrop(x, False)
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.integers(0, 4, shape).astype(np.float32)  # many ties
        assert select_coordinate(neg, p) == [lexicographic_argmax(p)]
    assert select_coordinate(neg, np.full(shape, 0.3)) == [(0, 0, 0)]


def test_select_coordinate_positive_branch_ignores_prob():
    x = np.zeros((2, 16, 16, 12), dtype=np.float32)
    crop = TrainingCrop(x, True, [(10.0, 12.0, 8.0)], [4.0])
    p = np.zeros((16, 16, 12))
    p[3, 4, 5] = 1
    assert select_coordinate(crop, p) == [(10, 12, 8)]
    crop = TrainingCrop(x, True, [(10.5, 2.49, 3.5)], [4.0])
    assert select_coordinate(crop, p) == [(11, 2, 4)]


def test_select_coordinate_argmax_example():
    x = np.zeros((2, 8, 8, 8), dtype=np.float32)
    p = torch.zeros(8, 8, 8)
    p[3, 4, 5] = 0.7
    assert select_coordinate(TrainingCrop(x, False), p) == [(3, 4, 5)]


def test_extract_feature_vector_examples():
    f = torch.ones(3, 4, 4, 4)
    assert torch.equal(extract_feature_vector(f, (1, 2, 3)).values, torch.ones(3))
    g = torch.zeros(1, 2, 4, 4, 4)
    g[0, 0, 1, 1, 1], g[0, 1, 1, 1, 1] = 3, -1
    fv = extract_feature_vector(g, (1, 1, 1), True)
    assert fv.values.tolist() == [3, -1] and fv.source_is_cmb
    h = torch.zeros(2, 4, 4, 4)
    h[:, 0, 0, 0] = h[:, 3, 3, 3] = torch.tensor([0.5, 2.0])
    assert torch.equal(extract_feature_vector(h, (0, 0, 0)).values, extract_feature_vector(h, (3, 3, 3)).values)
    with pytest.raises(IndexError):
        extract_feature_vector(f, (4, 0, 0))


def test_hspl_loss_averages_over_cmbs():
    feats = torch.zeros(1, 2, 4, 4, 4, dtype=torch.float64)
    feats[0, :, 1, 1, 1] = torch.tensor([1.0, 0.0])
    feats[0, :, 2, 2, 2] = torch.tensor([0.0, 1.0])
    protos = PrototypePair(2)
    with torch.no_grad():
        protos.cmb_prototype.copy_(torch.tensor([1.0, 0.0]))
        protos.mimic_prototype.copy_(torch.tensor([0.0, 1.0]))
    crop = TrainingCrop(np.zeros((2, 4, 4, 4), np.float32), True, [(1, 1, 1), (2, 2, 2)], [3.0, 3.0])
    prob = torch.zeros(4, 4, 4)
    assert hspl_loss(feats, prob, crop, protos).item() == pytest.approx(1.0)  # (0 + 2) / 2
    neg = TrainingCrop(np.zeros((2, 4, 4, 4), np.float32), False)
    prob[2, 2, 2] = 0.9
    assert hspl_loss(feats, prob, neg, protos).item() == pytest.approx(0.0, abs=1e-8)


def test_build_targets():
    crop = TrainingCrop(np.zeros((2, 8, 8, 8), np.float32), True, [(3.25, 4.0, 5.5)], [10.0])
    cls, reg, mask = build_targets(crop, (0.5, 0.5, 1.0), pos_radius_mm=1.0, anchor_size_mm=5.0)
    assert cls[3, 4, 6] == 1  # round-half-up voxel is always positive
    assert mask.sum() == 1 and mask[3, 4, 5]
    assert reg[:, 3, 4, 5].tolist() == pytest.approx([0.25, 0.0, 0.5, math.log(2)])
    grid = np.argwhere(cls > 0)
    dist = np.sqrt((((grid - [3.25, 4.0, 5.5]) * [0.5, 0.5, 1.0]) ** 2).sum(1))
    assert np.all((dist <= 1.0) | np.all(grid == [3, 4, 6], axis=1))
    empty = build_targets(TrainingCrop(np.zeros((2, 4, 4, 4), np.float32), False), (1, 1, 1), 1.0, 5.0)
    assert all(a.sum() == 0 for a in empty)


# ---------------------------------------------------------------------------
# CSV outputs
# ---------------------------------------------------------------------------

def test_feature_and_loss_csv(tmp_path):
    write_feature_csv([("s1", (1, 2, 3), True, [0.5, -1.0])], tmp_path / "f.csv")
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows[0] == ["subject_id", "x", "y", "z", "is_cmb", "v_0", "v_1"]
    assert rows[1] == ["s1", "1", "2", "3", "1", "0.5", "-1"]
    write_loss_csv([{"step": 0, "L_cls": 0.1, "L_reg": 0.2, "L_con": 1.0, "L_final": 0.1102}], tmp_path / "l.csv")
    rows = list(csv.DictReader(open(tmp_path / "l.csv")))
    assert tuple(rows[0]) == LOSS_COLUMNS and float(rows[0]["L_final"]) == 0.1102
