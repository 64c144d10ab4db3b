"""Independent brute-force references used by tests.

Everything here is implemented with plain loops over scalars or per-point
slices, never by calling the production modules it checks. Oracles always run
in double precision and are deliberately slow; size guards keep them inside
their supported regime.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .errors import OracleError

MAX_ORACLE_WORK = 10_000


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        fp = float(f(x))
        flat[i] = saved - h
        fm = float(f(x))
        flat[i] = saved
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def naive_knn(query_xyz: np.ndarray, ref_xyz: np.ndarray, k: int) -> np.ndarray:
    """Exhaustive k-nearest-neighbor search; ties go to the lower index."""
    b, m, _ = query_xyz.shape
    n = ref_xyz.shape[1]
    if b * m * n > MAX_ORACLE_WORK * 100:
        raise OracleError("naive_knn instance too large")
    if k > n:
        raise OracleError(f"k={k} exceeds {n} reference points")
    out = np.zeros((b, m, k), dtype=np.int64)
    for bi in range(b):
        for qi in range(m):
            q = query_xyz[bi, qi].astype(np.float64)
            scored = []
            for ri in range(n):
                d = ref_xyz[bi, ri].astype(np.float64) - q
                scored.append((float(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]), ri))
            scored.sort()
            out[bi, qi] = [idx for _, idx in scored[:k]]
    return out


def naive_interpolate(coarse_xyz: np.ndarray, coarse_feat: np.ndarray,
                      fine_xyz: np.ndarray, num: int = 3,
                      eps: float = 1e-8) -> np.ndarray:
    """Inverse-squared-distance interpolation from the `num` nearest coarse points."""
    b, m, _ = coarse_xyz.shape
    n = fine_xyz.shape[1]
    c = coarse_feat.shape[-1]
    if b * n * m > MAX_ORACLE_WORK * 100:
        raise OracleError("naive_interpolate instance too large")
    num = min(num, m)
    out = np.zeros((b, n, c), dtype=np.float64)
    for bi in range(b):
        for fi in range(n):
            q = fine_xyz[bi, fi].astype(np.float64)
            scored = []
            for ci in range(m):
                d = coarse_xyz[bi, ci].astype(np.float64) - q
                scored.append((float(d @ d), ci))
            scored.sort()
            picked = scored[:num]
            weights = [1.0 / (d2 + eps) for d2, _ in picked]
            total = sum(weights)
            acc = np.zeros(c, dtype=np.float64)
            for w, (_, ci) in zip(weights, picked):
                acc += (w / total) * coarse_feat[bi, ci].astype(np.float64)
            out[bi, fi] = acc
    return out


def _bn_scalar(value, mean, var, gamma, beta, eps=1e-5):
    return gamma * (value - mean) / np.sqrt(var + eps) + beta


def _batch_stats(samples):
    """Per-channel biased mean/variance over a list of equal-length vectors."""
    n = len(samples)
    c = len(samples[0])
    mean = np.zeros(c)
    for s in samples:
        mean += s
    mean /= n
    var = np.zeros(c)
    for s in samples:
        var += (s - mean) ** 2
    var /= n
    return mean, var


def naive_sa(positions: np.ndarray, features: np.ndarray, centers: np.ndarray,
             neighbors: np.ndarray, weights: dict, mode: str = "eval") -> np.ndarray:
    """Loop reference for the downsampling set-abstraction block.

    Per center: relu(bn(linear([f_j, p_j - p_i]))) for each neighbor, then a
    componentwise max. `weights` carries mlp_w [Cin+3, Cout], mlp_gamma/beta
    and (eval mode) running statistics.
    """
    b, _, cin = features.shape
    m = centers.shape[1]
    k = neighbors.shape[2]
    if b * m * k * cin > MAX_ORACLE_WORK * 10:
        raise OracleError("naive_sa instance too large")
    w = weights["mlp_w"].astype(np.float64)
    cout = w.shape[1]
    pre = np.zeros((b, m, k, cout), dtype=np.float64)
    for bi in range(b):
        for i in range(m):
            p_i = positions[bi, centers[bi, i]].astype(np.float64)
            for j in range(k):
                src = neighbors[bi, i, j]
                h = np.concatenate([
                    features[bi, src].astype(np.float64),
                    positions[bi, src].astype(np.float64) - p_i,
                ])
                pre[bi, i, j] = h @ w
    if mode == "train":
        mean, var = _batch_stats(list(pre.reshape(-1, cout)))
    else:
        mean, var = weights["mlp_rmean"], weights["mlp_rvar"]
    out = np.full((b, m, cout), -np.inf)
    for bi in range(b):
        for i in range(m):
            for j in range(k):
                h = _bn_scalar(pre[bi, i, j], mean, var,
                               weights["mlp_gamma"], weights["mlp_beta"])
                h = np.maximum(h, 0.0)
                out[bi, i] = np.maximum(out[bi, i], h)
    return out


def brute_force_vpsa(positions: np.ndarray, features: np.ndarray,
                     centers: np.ndarray, neighbors: np.ndarray,
                     pad_mask: np.ndarray | None, weights: dict,
                     m_dim: int = 3, reduction: str = "sum",
                     mode: str = "eval") -> np.ndarray:
    """Nested-loop reference for the vector-oriented aggregation block.

    Follows the block pipeline scalar by scalar: mixed relative feature,
    rotation-based vector expansion, neighbor reduction, per-channel
    projection, channel mixing with normalization, and the linear-residual
    fusion. `weights` is a flat dict of numpy arrays; see the test adapters
    for the expected keys.
    """
    b, _, cin = features.shape
    m = centers.shape[1]
    k = neighbors.shape[2]
    if b * m * k * cin > MAX_ORACLE_WORK * 10:
        raise OracleError("brute_force_vpsa instance too large")
    pos = positions.astype(np.float64)
    feat = features.astype(np.float64)

    def lin(vec, wkey, bkey=None):
        y = vec @ weights[wkey].astype(np.float64)
        if bkey is not None and weights.get(bkey) is not None:
            y = y + weights[bkey].astype(np.float64)
        return y

    # pass 1: mixed features and angle pre-activations for batch statistics
    fp = np.zeros((b, m, k, cin))
    for bi in range(b):
        for i in range(m):
            ci = centers[bi, i]
            for j in range(k):
                src = neighbors[bi, i, j]
                rel_f = feat[bi, src] - feat[bi, ci]
                rel_p = pos[bi, src] - pos[bi, ci]
                fp[bi, i, j] = np.maximum(rel_f + lin(rel_p, "pos_w", "pos_b"), 0.0)

    if m_dim > 1:
        ang_pre = np.zeros((b, m, k, (m_dim - 1) * cin))
        for bi in range(b):
            for i in range(m):
                for j in range(k):
                    ang_pre[bi, i, j] = lin(fp[bi, i, j], "ang_w")
        if mode == "train":
            ang_mean, ang_var = _batch_stats(list(ang_pre.reshape(-1, ang_pre.shape[-1])))
        else:
            ang_mean, ang_var = weights["ang_rmean"], weights["ang_rvar"]

    # pass 2: vectors, reduction, projection
    projected = np.zeros((b, m, cin))
    for bi in range(b):
        for i in range(m):
            if reduction == "sum":
                agg = np.zeros((cin, m_dim))
            else:
                agg = np.full((cin, m_dim), -np.inf)
            for j in range(k):
                if pad_mask is not None and pad_mask[bi, i, j]:
                    continue
                zx = lin(fp[bi, i, j], "zx_w", "zx_b")
                if m_dim == 1:
                    vec = zx[:, None]
                else:
                    ang = np.maximum(
                        _bn_scalar(ang_pre[bi, i, j], ang_mean, ang_var,
                                   weights["ang_gamma"], weights["ang_beta"]), 0.0)
                    alpha = ang[:cin]
                    if m_dim == 2:
                        vec = np.stack([-zx * np.sin(alpha), zx * np.cos(alpha)], axis=-1)
                    else:
                        beta = ang[cin:]
                        vec = np.stack([
                            -zx * np.sin(alpha) * np.sin(beta),
                            zx * np.cos(alpha) * np.sin(beta),
                            zx * np.cos(beta),
                        ], axis=-1)
                if reduction == "sum":
                    agg = agg + vec
                else:
                    agg = np.maximum(agg, vec)
            for c in range(cin):
                projected[bi, i, c] = (
                    agg[c] @ weights["proj_w"][c].astype(np.float64)
                    + weights["proj_b"][c])

    # pass 3: channel mixing + normalization, then residual fusion
    mixed = np.zeros((b, m, weights["mix_w"].shape[1]))
    for bi in range(b):
        for i in range(m):
            mixed[bi, i] = lin(projected[bi, i], "mix_w")
    if mode == "train":
        mix_mean, mix_var = _batch_stats(list(mixed.reshape(-1, mixed.shape[-1])))
    else:
        mix_mean, mix_var = weights["mix_rmean"], weights["mix_rvar"]
    out = np.zeros_like(mixed)
    for bi in range(b):
        for i in range(m):
            main = _bn_scalar(mixed[bi, i], mix_mean, mix_var,
                              weights["mix_gamma"], weights["mix_beta"])
            skip = lin(feat[bi, centers[bi, i]], "res_w", "res_b")
            out[bi, i] = np.maximum(main + skip, 0.0)
    return out


def coeff_constraint_residual(w1: float, w2: float, w3: float, w4: float) -> float:
    """a1*a4 - a2*a3 for coefficients factored as a weighted sum then a projection.

    With a1 = w3*w1, a2 = w3*w2, a3 = w4*w1, a4 = w4*w2 the residual is zero
    as an algebraic identity. Evaluated in exact rational arithmetic so the
    identity is not obscured by floating-point rounding of the two product
    orders.
    """
    f1, f2, f3, f4 = (Fraction(float(w)) for w in (w1, w2, w3, w4))
    a1, a2, a3, a4 = f3 * f1, f3 * f2, f4 * f1, f4 * f2
    return float(a1 * a4 - a2 * a3)


def general_coeff_residual(a1: float, a2: float, a3: float, a4: float) -> float:
    """a1*a4 - a2*a3 for independently chosen coefficients (general slot kernels)."""
    f1, f2, f3, f4 = (Fraction(float(a)) for a in (a1, a2, a3, a4))
    return float(f1 * f4 - f2 * f3)


def constraint_violation_fraction(draws: int = 10_000, threshold: float = 1e-3,
                                  seed: int = 0) -> float:
    """Fraction of independent uniform(-1,1) coefficient draws violating the
    factored-form constraint by more than `threshold`."""
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(draws):
        a1, a2, a3, a4 = rng.uniform(-1.0, 1.0, size=4)
        if abs(general_coeff_residual(a1, a2, a3, a4)) > threshold:
            hits += 1
    return hits / draws
