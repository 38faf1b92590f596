import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwdgat import fusion
from dwdgat.errors import ConfigError, DataError


def loop_roi_stats(volume, template, r, order=None):
    """Brute force: walk every voxel, accumulate the ROI's sums."""
    coords = [c for c in itertools.product(*map(range, volume.shape)) if template[c] == r]
    if order is not None:
        coords = [coords[i] for i in order]
    mass = sx = sy = sz = 0.0
    top = -math.inf
    for i, j, k in coords:
        w = volume[i, j, k]
        mass += w
        sx += i * w
        sy += j * w
        sz += k * w
        top = max(top, w)
    centroid = (sx / mass, sy / mass, sz / mass)
    rounded = tuple(int(math.floor(c + 0.5)) for c in centroid)
    return centroid, volume[rounded], mass / len(coords), top


# --- 1D


def test_stat_ratio_examples():
    assert np.allclose(fusion.fuse_stat_vectors([4, 9], [4, 9]), [1.0, 1.0])
    assert np.allclose(fusion.fuse_stat_vectors([0, 0], [4, 9]), [0.0, 0.0])
    assert np.allclose(fusion.fuse_stat_vectors([3, 5], [10, 20]), [0.3, 0.25])


def test_stat_ratio_empty_roi():
    with pytest.raises(DataError, match="ROI 2"):
        fusion.fuse_stat_vectors([1, 0], [3, 0])


# --- 2D


def test_reduce_network_constant(caplog):
    assert np.array_equal(fusion.reduce_network(np.full((3, 3), 0.4)), np.zeros(3))
    assert "constant" in caplog.text


def test_reduce_network_swap():
    assert np.allclose(fusion.reduce_network([[0, 1], [1, 0]]), [1, 1])


def test_reduce_network_matches_two_step_oracle():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 5, size=(4, 4))
    net = a + a.T
    lo = min(min(row) for row in net)
    hi = max(max(row) for row in net)
    sums = [sum(abs((v - lo) / (hi - lo)) for v in row) for row in net]
    expected = [s / max(sums) for s in sums]
    assert np.allclose(fusion.reduce_network(net), expected, rtol=0, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 100), st.floats(-50, 50), st.integers(0, 1000))
def test_reduce_network_affine_invariant(a, b, seed):
    net = np.random.default_rng(seed).uniform(0, 1, size=(5, 5))
    net = net + net.T
    assert np.allclose(fusion.reduce_network(a * net + b), fusion.reduce_network(net), atol=1e-10)


# --- 3D


def test_singleton_roi():
    vol = np.zeros((8, 8, 8))
    tpl = np.zeros((8, 8, 8), dtype=int)
    vol[4, 5, 6] = 0.7
    tpl[4, 5, 6] = 1
    s = fusion.roi_statistics(vol, tpl, 1)
    assert np.allclose(s.centroid, (4.0, 5.0, 6.0), rtol=0, atol=1e-12)
    assert s.centroid_weight == s.mean_weight == s.max_weight == 0.7


def test_uniform_weights_give_plain_centroid():
    tpl = np.zeros((6, 6, 6), dtype=int)
    tpl[1:3, 2:5, 0:4] = 1
    vol = np.full(tpl.shape, 2.5)
    s = fusion.roi_statistics(vol, tpl, 1)
    assert np.allclose(s.centroid, np.argwhere(tpl == 1).mean(axis=0))


def test_block_with_index_sum_weights_matches_loop():
    tpl = np.zeros((5, 5, 5), dtype=int)
    tpl[1:4, 1:4, 1:4] = 1
    vol = np.fromfunction(lambda i, j, k: i + j + k, tpl.shape)
    centroid, cw, mean, top = loop_roi_stats(vol, tpl, 1)
    s = fusion.roi_statistics(vol, tpl, 1)
    assert np.allclose(s.centroid, centroid, rtol=1e-12)
    assert s.centroid_weight == pytest.approx(cw, rel=1e-12)
    assert s.mean_weight == pytest.approx(mean, rel=1e-12)
    assert s.max_weight == pytest.approx(top, rel=1e-12)


def test_half_rounds_away_from_zero():
    tpl = np.zeros((3, 1, 1), dtype=int)
    tpl[0:2] = 1
    # centroid x = 0.5 rounds to voxel 1
    s = fusion.roi_statistics(np.array([2.0, 2.0, 9.0]).reshape(3, 1, 1), tpl, 1)
    assert s.centroid == (0.5, 0.0, 0.0)
    assert s.centroid_weight == 2.0
    assert fusion.round_half_away(np.array([0.5, 1.5, -0.5, 2.49])).tolist() == [1, 2, -1, 2]


def test_zero_mass_roi_falls_back():
    tpl = np.zeros((4, 4, 4), dtype=int)
    tpl[:2] = 1
    tpl[2:] = 2
    vol = np.zeros(tpl.shape)
    vol[2:] = 1.0
    s = fusion.roi_statistics(vol, tpl, 1)
    assert s.centroid == (0.5, 1.5, 1.5)
    assert s.centroid_weight == 0.0


def test_empty_roi_is_an_error():
    with pytest.raises(DataError):
        fusion.roi_statistics(np.ones((2, 2, 2)), np.ones((2, 2, 2), dtype=int), 2)


def random_template(seed, shape=(6, 5, 4), n_rois=5):
    rng = np.random.default_rng(seed)
    tpl = rng.integers(0, n_rois + 1, size=shape)
    tpl.flat[: n_rois + 1] = np.arange(n_rois + 1)  # every label present
    return tpl


def test_vectorised_statistics_match_per_roi():
    tpl = random_template(0)
    vol = np.random.default_rng(1).uniform(0, 3, size=tpl.shape)
    centroids, stats = fusion.metric_statistics(vol, tpl, 5)
    for r in range(1, 6):
        c, cw, mean, top = loop_roi_stats(vol, tpl, r)
        assert np.allclose(centroids[r - 1], c, rtol=1e-12)
        assert np.allclose(stats[r - 1], [cw, mean, top], rtol=1e-12)


def test_enumeration_order_irrelevant():
    tpl = random_template(2)
    vol = np.random.default_rng(3).uniform(0, 3, size=tpl.shape)
    n = int((tpl == 3).sum())
    shuffled = loop_roi_stats(vol, tpl, 3, order=np.random.default_rng(5).permutation(n))
    s = fusion.roi_statistics(vol, tpl, 3)
    assert np.allclose(s.centroid, shuffled[0], rtol=1e-12)
    assert np.allclose([s.centroid_weight, s.mean_weight, s.max_weight], shuffled[1:], rtol=1e-12)


def test_normalize_examples():
    out = fusion.normalize_roi_statistics([[1, 2, 4], [3, 3, 8]])
    assert np.allclose(out, [[0.25, 0.5, 0.5], [0.375, 0.375, 1.0]], atol=1e-15)
    flat = fusion.normalize_roi_statistics([[2, 2, 2], [1, 1, 5]])
    assert flat[0, 1] == 1.0
    assert flat[1, 2] == 1.0


def test_normalize_zero_signal(caplog):
    out = fusion.normalize_roi_statistics(np.zeros((3, 3)))
    assert (out == 0).all()
    assert "zero signal" in caplog.text


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 10_000))
def test_normalised_triples_scale_invariant(c, seed):
    tpl = random_template(seed % 7)
    vol = np.random.default_rng(seed).uniform(0, 2, size=tpl.shape)
    base = fusion.normalize_roi_statistics(fusion.metric_statistics(vol, tpl, 5)[1])
    scaled = fusion.normalize_roi_statistics(fusion.metric_statistics(c * vol, tpl, 5)[1])
    assert np.allclose(base, scaled, atol=1e-12)


# --- assembly


def test_column_counts():
    R = 4
    cols = fusion.column_names(["FA", "FN", "FL"], [f"m{i}" for i in range(6)])
    x = fusion.assemble_fused_matrix(np.zeros(R), [np.zeros(R)] * 3, [np.zeros((R, 3))] * 6)
    assert x.shape == (R, 22) and len(cols) == 22
    assert (x == 0).all()
    assert fusion.assemble_fused_matrix(np.zeros(R), [], [np.zeros((R, 3))]).shape == (R, 4)


def test_assembly_order():
    x = fusion.assemble_fused_matrix([0.1, 0.2], [[0.3, 0.4]], [[[0.5, 0.6, 0.7], [0.8, 0.9, 1.0]]])
    assert np.allclose(x, [[0.1, 0.3, 0.5, 0.6, 0.7], [0.2, 0.4, 0.8, 0.9, 1.0]])


def test_inconsistent_roi_count():
    with pytest.raises(ConfigError):
        fusion.assemble_fused_matrix(np.zeros(3), [np.zeros(4)], [])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_fused_entries_in_unit_interval(seed):
    from dwdgat.datagen import CohortSpec, generate_cohort

    cohort = generate_cohort(
        CohortSpec(counts=[1, 1], timepoints=1, grid=(6, 6, 4), n_rois=8, rho=0.5, signal=2.0, seed=seed)
    )
    for s in cohort.samples:
        x = fusion.fuse_sample(s, cohort.template)
        assert x.shape == (8, 1 + 3 + 18)
        assert (x >= 0).all() and (x <= 1).all()


def test_csv_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(size=(3, 5))
    cols = fusion.column_names(["FA"], ["MD"])
    fusion.write_fused_csv(tmp_path / "x.csv", x, cols)
    back, header = fusion.read_fused_csv(tmp_path / "x.csv")
    assert header == cols
    assert np.array_equal(back, x)
