"""Constructed-attention checks against closed-form packing oracles.

Expected spacings come from known optimal configurations (antipodal pair,
regular polygon, octahedron, regular simplex); logits and weights are
re-derived with plain Python loops independent of the matrix path.
"""

import math

import numpy as np
import pytest

from ctxcompress.constructions import (
    SpherePoints,
    attention_gap_curve,
    clustered_sphere_points,
    construction_matrices,
    copy_attention,
    geometric_mean_scale,
    min_pairwise_distance,
    pool_attention,
    read_csv_rows,
    required_scale_curve,
    rows_to_csv,
    spaced_sphere_points,
)


def polygon_min_dist(l):
    # closed form for l equally spaced points on the circle
    return 2.0 * math.sin(math.pi / l)


def simplex_min_dist(l):
    # regular l-simplex inscribed in the unit sphere (needs d >= l - 1)
    return math.sqrt(2.0 * l / (l - 1))


def softmax_oracle(logits):
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def copy_logits_oracle(P, F, t):
    # logit_j = F * <pi_j, pi_t>, scalar loops
    l, d = P.shape
    return [F * sum(P[j][k] * P[t][k] for k in range(d)) for j in range(l)]


# -- point placement ------------------------------------------------------------


def test_antipodal_pair():
    for d in (2, 5):
        pts = spaced_sphere_points(2, d)
        assert abs(pts.epsilon - 2.0) < 1e-9
        assert np.allclose(pts.points[0], -pts.points[1], atol=1e-9)


def test_square_on_circle():
    pts = spaced_sphere_points(4, 2)
    assert abs(pts.epsilon - polygon_min_dist(4)) < 1e-6


def test_octahedron():
    pts = spaced_sphere_points(6, 3)
    assert abs(pts.epsilon - math.sqrt(2.0)) < 1e-3


def test_regular_simplex_in_high_dim():
    pts = spaced_sphere_points(4, 8)
    assert abs(pts.epsilon - simplex_min_dist(4)) < 1e-5


def test_unit_norms_and_epsilon_field():
    for l, d in [(5, 3), (12, 4)]:
        pts = spaced_sphere_points(l, d, seed=7)
        norms = np.linalg.norm(pts.points, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-12
        assert abs(pts.epsilon - min_pairwise_distance(pts.points)) < 1e-15


def test_placement_determinism():
    a = spaced_sphere_points(16, 4, seed=3)
    b = spaced_sphere_points(16, 4, seed=3)
    np.testing.assert_array_equal(a.points, b.points)
    c = spaced_sphere_points(16, 4, seed=4)
    assert not np.array_equal(a.points, c.points)


def test_placement_validation():
    with pytest.raises(ValueError):
        spaced_sphere_points(1, 4)
    with pytest.raises(ValueError):
        spaced_sphere_points(4, 1)


# -- copy head -------------------------------------------------------------------


def test_copy_uniform_at_zero_scale():
    pts = spaced_sphere_points(6, 3)
    res = copy_attention(pts, 0.0, target=2)
    assert np.abs(res.weights - 1.0 / 6.0).max() < 1e-12


def test_copy_logit_identities():
    pts = spaced_sphere_points(8, 4)
    F = 37.0
    res = copy_attention(pts, F, target=3)
    oracle = copy_logits_oracle(pts.points, F, 3)
    assert np.abs(res.logits - np.array(oracle)).max() < 1e-10 * F
    assert abs(res.logits[3] - F) < 1e-10 * F
    off = np.arange(8) != 3
    deficits = F - res.logits[off]
    assert deficits.min() >= F * pts.epsilon ** 2 / 2.0 - 1e-9 * F


def test_copy_weight_monotone_in_scale():
    pts = spaced_sphere_points(8, 4)
    weights = []
    for F in (1.0, 10.0, 100.0):
        res = copy_attention(pts, F, target=0)
        oracle = softmax_oracle(copy_logits_oracle(pts.points, F, 0))
        assert abs(res.target_weight - oracle[0]) < 1e-12
        weights.append(res.target_weight)
    assert weights[0] < weights[1] < weights[2]
    assert weights[2] > 0.999


def test_copy_output_error_bound():
    pts = spaced_sphere_points(10, 5, seed=2)
    for F, t in [(0.0, 0), (3.0, 4), (50.0, 9)]:
        res = copy_attention(pts, F, target=t, seed=5)
        assert res.output_error <= (1.0 - res.target_weight) * 2.0 + 1e-12


def test_required_scale_curve_monotone():
    rows = required_scale_curve(2, [2, 4, 8], weight=0.999)
    got = [r["F_required"] for r in rows]
    assert got[0] < got[1] < got[2]
    for r in rows:
        pts = spaced_sphere_points(r["l"], 2)
        assert copy_attention(pts, r["F_required"], 0).target_weight >= 0.999
        assert copy_attention(pts, 0.99 * r["F_required"], 0).target_weight < 0.999


# -- pool head -------------------------------------------------------------------


def test_clustered_geometry():
    wp = clustered_sphere_points(32, 8, 4, eps_same=0.05, seed=1)
    assert wp.eps_same <= 0.05 + 1e-12
    assert wp.eps_same < wp.eps_diff
    # scalar re-check of the window statistics
    P, win = wp.points, np.repeat(np.arange(8), 4)
    intra, inter = 0.0, np.inf
    for i in range(32):
        for j in range(i + 1, 32):
            dist = math.sqrt(sum((P[i][k] - P[j][k]) ** 2 for k in range(8)))
            if win[i] == win[j]:
                intra = max(intra, dist)
            else:
                inter = min(inter, dist)
    assert abs(intra - wp.eps_same) < 1e-12
    assert abs(inter - wp.eps_diff) < 1e-12


def test_clustered_infeasible():
    with pytest.raises(ValueError, match="center spacing"):
        clustered_sphere_points(8, 8, 4, eps_same=3.0)
    with pytest.raises(ValueError, match="multiple"):
        clustered_sphere_points(9, 8, 4, eps_same=0.05)
    with pytest.raises(ValueError, match="two windows"):
        clustered_sphere_points(4, 8, 4, eps_same=0.05)


def test_pool_masses_at_geometric_mean_scale():
    wp = clustered_sphere_points(32, 8, 4, eps_same=0.05)
    F = geometric_mean_scale(wp)
    assert 2.0 / wp.eps_diff ** 2 < F < 2.0 / wp.eps_same ** 2
    for w in range(wp.n_windows):
        _, uniform_dev, out_mass = pool_attention(wp, F, w)
        assert out_mass < 0.01
        assert uniform_dev < 0.01


def test_pool_logit_bounds():
    wp = clustered_sphere_points(32, 8, 4, eps_same=0.05)
    F = geometric_mean_scale(wp)
    res, _, _ = pool_attention(wp, F, 2)
    in_w = np.zeros(32, dtype=bool)
    in_w[wp.window_members(2)] = True
    spread = res.logits[in_w].max() - res.logits[in_w].min()
    assert spread <= wp.eps_same ** 2 * F / 2.0 + 1e-9 * F
    gap = res.logits[in_w].min() - res.logits[~in_w].max()
    assert gap >= (wp.eps_diff ** 2 - wp.eps_same ** 2) * F / 2.0 - 1e-9 * F


def test_pool_uniform_at_zero_scale():
    wp = clustered_sphere_points(12, 4, 3, eps_same=0.1)
    res, uniform_dev, out_mass = pool_attention(wp, 0.0, 1)
    assert np.abs(res.weights - 1.0 / 12.0).max() < 1e-12
    assert abs(out_mass - 9.0 / 12.0) < 1e-12


def test_pool_single_member_windows_reduce_to_copy():
    wp = clustered_sphere_points(6, 3, 1, eps_same=0.2, seed=4)
    assert wp.eps_same == 0.0
    pts = SpherePoints(wp.points, min_pairwise_distance(wp.points))
    for w in (0, 3, 5):
        res_pool, _, _ = pool_attention(wp, 7.0, w, seed=9)
        res_copy = copy_attention(pts, 7.0, w, seed=9)
        np.testing.assert_allclose(res_pool.weights, res_copy.weights,
                                   atol=1e-12)
    with pytest.raises(ValueError, match="spread"):
        geometric_mean_scale(wp)


def test_construction_matrix_blocks():
    m = construction_matrices(3, 5.0, xi=2)
    assert np.array_equal(m.K, np.eye(6))
    assert np.array_equal(m.Q[:3, 3:], 5.0 * np.eye(3))
    assert m.Q.sum() == pytest.approx(15.0)  # only the upper-right block
    assert np.array_equal(m.V[3:, 3:], 0.5 * np.eye(3))
    assert m.V.sum() == pytest.approx(1.5)


# -- bounded-norm gap -------------------------------------------------------------


def test_gap_antipodal_case():
    radius = math.sqrt(8.0)
    rows = attention_gap_curve(8, [2], bound_kq=1.0, bound_x=radius)
    row = rows[0]
    assert abs(row["epsilon"] - 2.0) < 1e-9
    # optimum is y = radius * pi_target, gap 2 * radius
    assert row["gap_empirical"] <= 2.0 * radius + 1e-9
    assert row["gap_empirical"] >= 0.95 * 2.0 * radius
    assert row["target_weight"] > 0.99
    want = 1.0 / (1.0 + math.exp(-row["gap_empirical"]))
    assert abs(row["target_weight"] - want) < 1e-9


def test_gap_curve_small_grid():
    rows = attention_gap_curve(4, [4, 8, 16])
    eps = [r["epsilon"] for r in rows]
    assert eps[0] > eps[1] > eps[2]
    for r in rows:
        assert r["gap_bound"] == pytest.approx(4.0 * r["epsilon"])
        assert r["gap_empirical"] <= r["gap_bound"] + 1e-9
        assert 0.0 < r["target_weight"] < 1.0


def test_curve_csv_round_trip(tmp_path):
    rows = attention_gap_curve(3, [2, 4])
    path = tmp_path / "curve.csv"
    rows_to_csv(path, rows)
    back = read_csv_rows(path)
    assert [r["l"] for r in back] == ["2", "4"]
    for got, want in zip(back, rows):
        for k in ("epsilon", "gap_bound", "gap_empirical", "target_weight"):
            assert float(got[k]) == want[k]
    with pytest.raises(ValueError):
        rows_to_csv(tmp_path / "empty.csv", [])
