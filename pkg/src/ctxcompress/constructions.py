"""Analytic attention constructions and their breakdown under bounded norms.

Three numerically instantiated results about a single attention head over
unit-sphere positional codes pi_1..pi_l in dimension d:

  copy   With embeddings (position, value) in R^{2d}, K = I, V selecting
         the value half, and Q placing F times the wanted position code
         into the query, the head's logit is F at the target and at most
         F - eps^2 F / 2 elsewhere, where eps is the minimum pairwise
         code distance. Large F makes the head a copier.
  pool   Grouping codes into tight caps (intra-window spread eps_same,
         inter-window separation eps_diff) and querying with the window
         mean turns the same head into a window averager whenever
         2/eps_diff^2 << F << 2/eps_same^2.
  limit  If code norms, K, Q, and the query are bounded and d is fixed,
         the achievable top-vs-second logit gap is at most
         delta(l) * d * |K| * |Q| * |x| with delta(l) the nearest-neighbor
         distance of the code set, which packing forces toward zero as l
         grows. Copying must eventually fail; pooling is the xi = 1
         special case.

Codes are produced by pairwise-repulsion descent on the logarithmic Riesz
energy (elliptic Fekete points); only the achieved separation is asserted,
never the packing optimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binio import read_csv_rows, rows_to_csv  # noqa: F401  (re-exported)
from .rng import substream

RIESZ_ITERS = 1000
RIESZ_RESTARTS = 5
ASCENT_STEPS = 200
ASCENT_STARTS = 8


@dataclass
class SpherePoints:
    points: np.ndarray        # (l, d) unit rows
    epsilon: float            # achieved min pairwise distance

    @property
    def l(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass
class WindowedSpherePoints:
    points: np.ndarray        # (l, d) unit rows, window-major order
    xi: int
    eps_same: float           # max intra-window distance
    eps_diff: float           # min inter-window distance

    @property
    def n_windows(self) -> int:
        return self.points.shape[0] // self.xi

    def window_members(self, w: int) -> np.ndarray:
        return np.arange(w * self.xi, (w + 1) * self.xi)


@dataclass
class ConstructionMatrices:
    """The 2d-by-2d blocks: K identity, Q routing F * value-half into the
    position slot, V selecting the value half (scaled 1/xi for pooling)."""

    K: np.ndarray
    Q: np.ndarray
    V: np.ndarray
    F: float
    d: int
    xi: int = 1


def construction_matrices(d: int, F: float, xi: int = 1) -> ConstructionMatrices:
    K = np.eye(2 * d)
    Q = np.zeros((2 * d, 2 * d))
    Q[:d, d:] = F * np.eye(d)
    V = np.zeros((2 * d, 2 * d))
    V[d:, d:] = np.eye(d) / xi
    return ConstructionMatrices(K, Q, V, float(F), d, xi)


# -- point placement -----------------------------------------------------------


def _normalize_rows(P: np.ndarray) -> np.ndarray:
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def _pair_dist2(P: np.ndarray) -> np.ndarray:
    d2 = 2.0 - 2.0 * (P @ P.T)
    np.fill_diagonal(d2, np.inf)
    return np.maximum(d2, 1e-14)


def _riesz_energy(P: np.ndarray) -> float:
    """Logarithmic Riesz energy -sum log ||pi - pj||^2 over pairs."""
    d2 = _pair_dist2(P)
    iu = np.triu_indices(P.shape[0], 1)
    return float(-np.log(d2[iu]).sum())


def _riesz_descend(P: np.ndarray, iters: int) -> tuple:
    """Projected gradient with backtracking on the log Riesz energy."""
    P = _normalize_rows(P.copy())
    energy = _riesz_energy(P)
    step = 0.25
    for _ in range(iters):
        C = -2.0 / _pair_dist2(P)
        G = C.sum(axis=1, keepdims=True) * P - C @ P
        G -= (G * P).sum(axis=1, keepdims=True) * P
        scale = np.abs(G).max()
        if scale == 0.0 or not np.isfinite(scale):
            break
        cand = _normalize_rows(P - (step / scale) * G)
        cand_energy = _riesz_energy(cand)
        if cand_energy < energy:
            P, energy = cand, cand_energy
            step = min(step * 1.2, 0.5)
        else:
            step *= 0.5
            if step < 1e-13:
                break
    return P, energy


def min_pairwise_distance(P: np.ndarray) -> float:
    return float(np.sqrt(_pair_dist2(P).min()))


def spaced_sphere_points(l: int, d: int, seed: int = 0,
                         iters: int = RIESZ_ITERS,
                         restarts: int = RIESZ_RESTARTS) -> SpherePoints:
    """l unit vectors in R^d spread by repulsion descent; best of `restarts`."""
    if l < 2 or d < 2:
        raise ValueError("need l >= 2 points in dimension d >= 2")
    best, best_energy = None, np.inf
    for r in range(restarts):
        rng = substream(seed, "sphere", l, d, r)
        P, energy = _riesz_descend(rng.normal(size=(l, d)), iters)
        if energy < best_energy:
            best, best_energy = P, energy
    return SpherePoints(best, min_pairwise_distance(best))


def clustered_sphere_points(l: int, d: int, xi: int, eps_same: float,
                            seed: int = 0, iters: int = RIESZ_ITERS,
                            restarts: int = RIESZ_RESTARTS) -> WindowedSpherePoints:
    """Codes grouped into l/xi caps: tight within a window, spread across.

    Window centers come from the regular placement; members sit inside a
    spherical cap of chord radius eps_same/2 around their center, so any
    intra-window pair is at most eps_same apart.
    """
    if l % xi != 0:
        raise ValueError("l must be a multiple of xi")
    m = l // xi
    if m < 2:
        raise ValueError("need at least two windows")
    centers = spaced_sphere_points(m, d, seed=seed, iters=iters, restarts=restarts)
    if eps_same >= centers.epsilon:
        raise ValueError(
            f"eps_same={eps_same} is not below the achievable center "
            f"spacing {centers.epsilon:.4f}")
    rng = substream(seed, "caps", l, d, xi)
    alpha_max = 2.0 * np.arcsin(eps_same / 4.0)
    rows = []
    for w in range(m):
        c = centers.points[w]
        for _ in range(xi):
            u = rng.normal(size=d)
            u -= (u @ c) * c
            u /= np.linalg.norm(u)
            a = rng.uniform(0.0, alpha_max)
            rows.append(np.cos(a) * c + np.sin(a) * u)
    P = np.array(rows)
    win = np.repeat(np.arange(m), xi)
    d2 = 2.0 - 2.0 * (P @ P.T)
    same = win[:, None] == win[None, :]
    off_diag = ~np.eye(l, dtype=bool)
    intra = d2[same & off_diag]
    eps_same_got = float(np.sqrt(np.maximum(intra, 0.0).max())) if intra.size else 0.0
    eps_diff_got = float(np.sqrt(d2[~same].min()))
    if eps_same_got >= eps_diff_got:
        raise ValueError("cap placement failed: intra-window spread reaches "
                         "the inter-window separation")
    return WindowedSpherePoints(P, xi, eps_same_got, eps_diff_got)


# -- copy and pool heads --------------------------------------------------------


@dataclass
class HeadResult:
    logits: np.ndarray
    weights: np.ndarray
    target_weight: float
    output_error: float | None = None


def _head_weights(P: np.ndarray, mats: ConstructionMatrices,
                  query_value: np.ndarray, values: np.ndarray):
    """Logits and softmax weights of the constructed head, via the matrices."""
    l, d = P.shape
    keys = np.concatenate([P, values], axis=1)           # z(j) = (pi_j, v_j)
    x = np.concatenate([np.zeros(d), query_value])       # x = (..., target code)
    logits = keys @ mats.K.T @ mats.Q @ x
    e = np.exp(logits - logits.max())
    return logits, e / e.sum()


def copy_attention(points: SpherePoints, F: float, target: int,
                   values: np.ndarray | None = None, seed: int = 0) -> HeadResult:
    """Head that should place its mass on `target` and emit that value.

    Verifies the pre-softmax identities: logit at the target equals F, and
    the deficit at j equals F * (1 - pi_t . pi_j), which is at least
    F * eps^2 / 2.
    """
    P = points.points
    l, d = P.shape
    if values is None:
        values = _normalize_rows(substream(seed, "values", l, d).normal(size=(l, d)))
    mats = construction_matrices(d, F)
    logits, w = _head_weights(P, mats, P[target], values)
    tol = 1e-10 * (1.0 + abs(F))
    if abs(logits[target] - F) > tol:
        raise AssertionError("target logit differs from F")
    deficit = F - logits
    expected = F * (1.0 - P @ P[target])
    if np.abs(deficit - expected).max() > tol:
        raise AssertionError("off-target logit deficit mismatch")
    off = np.arange(l) != target
    if F > 0 and deficit[off].min() < F * points.epsilon ** 2 / 2.0 - tol:
        raise AssertionError("off-target deficit below eps^2 F / 2")
    zs = np.concatenate([P, values], axis=1)
    out = (w[:, None] * (zs @ mats.V.T)).sum(axis=0)
    err = float(np.linalg.norm(out[d:] - values[target]))
    return HeadResult(logits, w, float(w[target]), err)


def pool_attention(wpoints: WindowedSpherePoints, F: float, window: int,
                   values: np.ndarray | None = None, seed: int = 0):
    """Head queried with the window-mean code; returns leakage statistics.

    `uniform_dev` is the largest in-window deviation from weight 1/xi;
    `out_mass` is the total weight outside the window.
    """
    P, xi = wpoints.points, wpoints.xi
    l, d = P.shape
    if values is None:
        values = _normalize_rows(substream(seed, "values", l, d).normal(size=(l, d)))
    mats = construction_matrices(d, F, xi=xi)
    members = wpoints.window_members(window)
    query_value = P[members].mean(axis=0)
    logits, w = _head_weights(P, mats, query_value, values)
    in_w = np.zeros(l, dtype=bool)
    in_w[members] = True
    tol = 1e-10 * (1.0 + abs(F))
    if F > 0:
        if logits[in_w].min() < F * (1.0 - wpoints.eps_same ** 2 / 2.0) - tol:
            raise AssertionError("in-window logit below F - eps_same^2 F / 2")
        if in_w.sum() < l and \
                logits[~in_w].max() > F * (1.0 - wpoints.eps_diff ** 2 / 2.0) + tol:
            raise AssertionError("out-of-window logit above F - eps_diff^2 F / 2")
    out_mass = float(w[~in_w].sum())
    uniform_dev = float(np.abs(w[in_w] - 1.0 / xi).max())
    result = HeadResult(logits, w, float(w[in_w].sum()))
    return result, uniform_dev, out_mass


def geometric_mean_scale(wpoints: WindowedSpherePoints) -> float:
    """Midpoint (geometric mean) of 2/eps_diff^2 << F << 2/eps_same^2."""
    if wpoints.eps_same <= 0.0:
        raise ValueError("no intra-window spread; the upper scale bound "
                         "is infinite")
    return 2.0 / (wpoints.eps_same * wpoints.eps_diff)


def required_scale_curve(d: int, ls, weight: float = 0.999, seed: int = 0,
                         iters: int = RIESZ_ITERS,
                         restarts: int = RIESZ_RESTARTS) -> list:
    """Per l: the smallest F whose target weight reaches `weight` (bisected)."""
    rows = []
    for l in ls:
        pts = spaced_sphere_points(l, d, seed=seed, iters=iters, restarts=restarts)
        def w_at(F):
            return copy_attention(pts, F, target=0, seed=seed).target_weight
        hi = 1.0
        while w_at(hi) < weight:
            hi *= 2.0
            if hi > 1e12:
                raise RuntimeError("bisection upper bound exploded")
        lo = 0.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if w_at(mid) >= weight:
                hi = mid
            else:
                lo = mid
        rows.append({"l": l, "d": d, "epsilon": pts.epsilon, "F_required": hi})
    return rows


# -- bounded-norm impossibility ---------------------------------------------------


def _empirical_gap(P: np.ndarray, target: int, radius: float, seed: int) -> tuple:
    """Max of logit[target] - max(other logits) over |y| <= radius.

    y stands in for K^T Q x; projected subgradient ascent, best of
    ASCENT_STARTS starts.
    """
    l, d = P.shape
    others = np.delete(np.arange(l), target)
    best_gap, best_y = -np.inf, None
    for s in range(ASCENT_STARTS):
        rng = substream(seed, "ascent", target, s)
        y = rng.normal(size=d)
        y *= radius / np.linalg.norm(y)
        for t in range(ASCENT_STEPS):
            logits = P @ y
            gap = logits[target] - logits[others].max()
            if gap > best_gap:
                best_gap, best_y = gap, y.copy()
            j = others[np.argmax(logits[others])]
            g = P[target] - P[j]
            y = y + (radius / np.sqrt(t + 1.0)) * g
            norm = np.linalg.norm(y)
            if norm > radius:
                y *= radius / norm
        logits = P @ y
        gap = logits[target] - logits[others].max()
        if gap > best_gap:
            best_gap, best_y = gap, y.copy()
    return float(best_gap), best_y


def attention_gap_curve(d: int, ls, bound_kq: float = 1.0, bound_x: float = 1.0,
                        seed: int = 0, iters: int = RIESZ_ITERS,
                        restarts: int = RIESZ_RESTARTS) -> list:
    """Per l: achieved code separation, the analytic gap ceiling
    delta * d * |K||Q| * |x|, and the best gap found empirically.

    The target is the most crowded code (the one attaining the global
    nearest-neighbor minimum), so the empirical gap is provably at most
    delta * radius and hence under the ceiling.
    """
    rows = []
    for l in ls:
        pts = spaced_sphere_points(l, d, seed=seed, iters=iters, restarts=restarts)
        d2 = _pair_dist2(pts.points)
        target = int(np.unravel_index(np.argmin(d2), d2.shape)[0])
        delta = float(np.sqrt(d2[target].min()))
        radius = bound_kq * bound_x
        gap_emp, y = _empirical_gap(pts.points, target, radius, seed)
        logits = pts.points @ y
        e = np.exp(logits - logits.max())
        rows.append({
            "l": l, "d": d, "epsilon": delta,
            "gap_bound": delta * d * bound_kq * bound_x,
            "gap_empirical": gap_emp,
            "target_weight": float(e[target] / e.sum()),
        })
    return rows


