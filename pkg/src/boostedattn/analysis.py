"""Geometric checks on attention outputs.

Convex-hull distances, row-span residuals, orthogonal erasure of Hopfield
queries, the LayerNorm Jacobian, and attention entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import hopfield_update_np


class DegenerateInputError(ValueError):
    pass


class VacuousCheckError(ValueError):
    """The property holds trivially (nothing to test) for this input."""


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------------------
# simplex QP


@dataclass
class HullResult:
    distance: float
    weights: np.ndarray
    iterations: int
    converged: bool
    kkt_residual: float = 0.0


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(y - theta, 0.0)


def _kkt_residual(alpha: np.ndarray, grad: np.ndarray) -> float:
    # gradient-mapping norm with unit step, scale-free enough for a stopping test
    return float(np.linalg.norm(alpha - project_simplex(alpha - grad)))


def _polish(G: np.ndarray, b: np.ndarray, alpha: np.ndarray, tol: float) -> np.ndarray | None:
    """Solve the equality-constrained problem on the current support.

    Returns the exact minimizer if it is feasible and satisfies KKT on the
    full simplex, else ``None``.
    """
    support = np.nonzero(alpha > 1e-12)[0]
    s = support.size
    kkt = np.zeros((s + 1, s + 1))
    kkt[:s, :s] = G[np.ix_(support, support)]
    kkt[:s, s] = 1.0
    kkt[s, :s] = 1.0
    rhs = np.concatenate([b[support], [1.0]])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    a_s = sol[:s]
    if np.any(a_s < -1e-14):
        return None
    cand = np.zeros_like(alpha)
    cand[support] = np.maximum(a_s, 0.0)
    cand /= cand.sum()
    grad = G @ cand - b
    lam = grad[support].mean() if s else 0.0
    scale = max(1.0, np.abs(grad).max())
    if np.any(grad < lam - 1e3 * tol * scale):
        return None
    return cand


def hull_distance(o: np.ndarray, V: np.ndarray, tol: float = 1e-12,
                  max_iter: int = 10_000) -> HullResult:
    """Euclidean distance from ``o`` to the convex hull of the rows of ``V``.

    Accelerated projected gradient on the simplex (uniform start, adaptive
    restart), finished by an exact solve on the detected support.
    """
    o = np.asarray(o, dtype=float)
    V = np.atleast_2d(np.asarray(V, dtype=float))
    t = V.shape[0]
    if t < 1:
        raise ValueError("hull needs at least one generator")
    if t == 1:
        return HullResult(float(np.linalg.norm(o - V[0])), np.ones(1), 0, True)
    G = V @ V.T
    b = V @ o
    L = float(np.linalg.eigvalsh(G)[-1])
    alpha = np.full(t, 1.0 / t)
    if L <= 0.0:
        return HullResult(float(np.linalg.norm(o)), alpha, 0, True)
    y, a_prev, mom = alpha.copy(), alpha.copy(), 1.0
    converged, it, res = False, 0, np.inf
    for it in range(1, max_iter + 1):
        a_new = project_simplex(y - (G @ y - b) / L)
        mom_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * mom * mom))
        # restart momentum when it points uphill
        if (G @ y - b) @ (a_new - a_prev) > 0:
            mom_new = 1.0
            y = a_new.copy()
        else:
            y = a_new + ((mom - 1.0) / mom_new) * (a_new - a_prev)
        a_prev, mom = a_new, mom_new
        if it % 25 == 0 or it == max_iter:
            res = _kkt_residual(a_new, (G @ a_new - b) / L)
            polished = _polish(G, b, a_new, tol)
            if polished is not None:
                a_new = polished
                res = _kkt_residual(a_new, (G @ a_new - b) / L)
            if res <= tol:
                a_prev = a_new
                converged = True
                break
    alpha = a_prev
    dist = float(np.linalg.norm(o - V.T @ alpha))
    return HullResult(dist, alpha, it, converged, float(res))


# ---------------------------------------------------------------------------
# subspaces


def rowspace_basis(V: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (as rows) of the row space of ``V``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    _, s, vt = np.linalg.svd(V, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((0, V.shape[1]))
    return vt[s > rtol * s[0]]


def rowspan_residual(V: np.ndarray, Y: np.ndarray) -> float:
    """Frobenius norm of the part of Y's rows outside rowspan(V)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    basis = rowspace_basis(V)
    return float(np.linalg.norm(Y - (Y @ basis.T) @ basis))


def orthogonal_erasure_test(X: np.ndarray, xi: np.ndarray, beta: float) -> float:
    """``||T(xi) - T(xi_par)||`` with ``xi_par`` the projection of xi onto col(X)."""
    X = np.asarray(X, dtype=float)
    xi = np.asarray(xi, dtype=float)
    basis = rowspace_basis(X.T)           # orthonormal rows spanning col(X)
    if basis.shape[0] >= X.shape[0]:
        raise VacuousCheckError("col(X) is the whole space: no orthogonal component to erase")
    xi_par = (xi @ basis.T) @ basis
    return float(np.linalg.norm(hopfield_update_np(X, xi, beta) - hopfield_update_np(X, xi_par, beta)))


# ---------------------------------------------------------------------------
# LayerNorm Jacobian


@dataclass
class JacobianReport:
    matrix: np.ndarray
    rank: int
    smallest_singular_values: np.ndarray
    null_residual_ones: float
    null_residual_uhat: float
    fd_max_error: float
    sigma: float
    uhat: np.ndarray = field(repr=False, default=None)


def layernorm_jacobian_matrix(u: np.ndarray, gamma: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Analytic ``(diag(gamma)/sigma)(I - 11^T/d - uhat uhat^T/d)`` (eps = 0)."""
    u = np.asarray(u, dtype=float)
    d = u.size
    if d < 2:
        raise ad.DimensionError(f"layer norm Jacobian needs d >= 2, got {d}")
    mu = u.mean()
    sigma = float(np.sqrt(((u - mu) ** 2).mean()))
    if sigma <= 1e-12 * max(1.0, np.abs(u).max()):
        raise DegenerateInputError("constant input: sigma = 0")
    uhat = (u - mu) / sigma
    inner = np.eye(d) - np.ones((d, d)) / d - np.outer(uhat, uhat) / d
    return (np.asarray(gamma, dtype=float)[:, None] / sigma) * inner, sigma, uhat


def layernorm_jacobian(u: np.ndarray, gamma: np.ndarray, fd_step: float = 1e-5) -> JacobianReport:
    """Analytic LayerNorm Jacobian with rank, null-space and finite-difference checks.

    Rank counts singular values above ``1e-8`` times the larger of the top
    singular value and ``max|gamma|/sigma`` (the nonzero singular values'
    natural scale, which keeps d = 2 well defined).
    """
    gamma = np.asarray(gamma, dtype=float)
    J, sigma, uhat = layernorm_jacobian_matrix(u, gamma)
    d = J.shape[0]
    s = np.linalg.svd(J, compute_uv=False)
    ref = max(s[0], np.abs(gamma).max() / sigma)
    rank = int((s > 1e-8 * ref).sum())
    zeros = np.zeros(d)
    fd = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = fd_step
        plus = ad.layer_norm(u + e, gamma, zeros, eps=0.0).data
        minus = ad.layer_norm(u - e, gamma, zeros, eps=0.0).data
        fd[:, j] = (plus - minus) / (2 * fd_step)
    return JacobianReport(
        matrix=J,
        rank=rank,
        smallest_singular_values=np.sort(s)[:2],
        null_residual_ones=float(np.linalg.norm(J @ np.ones(d))),
        null_residual_uhat=float(np.linalg.norm(J @ uhat)),
        fd_max_error=float(np.abs(fd - J).max()),
        sigma=sigma,
        uhat=uhat,
    )


def _fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float) -> np.ndarray:
    d = x.size
    out = np.empty((fn(x).size, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        out[:, j] = (fn(x + e) - fn(x - e)) / (2 * step)
    return out


def preln_additivity_check(h: np.ndarray, f: np.ndarray, step: float = 1e-5) -> float:
    """``||d(h + f)/df - I||_F`` by central differences."""
    h = np.asarray(h, dtype=float)
    J = _fd_jacobian(lambda x: h + x, np.asarray(f, dtype=float), step)
    return float(np.linalg.norm(J - np.eye(J.shape[0])))


def postln_deviation(h: np.ndarray, f: np.ndarray, gamma: np.ndarray | None = None,
                     beta: np.ndarray | None = None, step: float = 1e-5) -> float:
    """``||d LN(h + f)/df - I||_F`` by central differences through layer_norm."""
    h = np.asarray(h, dtype=float)
    d = h.size
    gamma = np.ones(d) if gamma is None else gamma
    beta = np.zeros(d) if beta is None else beta
    J = _fd_jacobian(lambda x: ad.layer_norm(h + x, gamma, beta).data, np.asarray(f, dtype=float), step)
    return float(np.linalg.norm(J - np.eye(d)))


# ---------------------------------------------------------------------------
# entropy


def attention_entropy(A: np.ndarray) -> np.ndarray:
    """Per-row Shannon entropy in nats, with 0 ln 0 = 0."""
    A = np.asarray(A, dtype=float)
    sums = A.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(A < -1e-8):
        raise ContractError("attention rows must be probability vectors")
    safe = np.where(A > 0, A, 1.0)
    return -(np.where(A > 0, A * np.log(safe), 0.0)).sum(axis=-1)


# ---------------------------------------------------------------------------
# hull-escape survey


@dataclass
class HullSurvey:
    rows: list = field(default_factory=list)       # (layer, head, position, distance)
    layer_mean: dict = field(default_factory=dict)
    escape_fraction: dict = field(default_factory=dict)

    def distances(self, layer: int | None = None) -> np.ndarray:
        return np.array([r[3] for r in self.rows if layer is None or r[0] == layer])


def boosted_hull_escape_survey(model: Callable, inputs, samples_per_layer: int = 600,
                               position_cap: int = 64, seed: int = 0,
                               escape_tol: float = 1e-6) -> HullSurvey:
    """Distance of per-head boosted outputs to the hull of visible round-0 values.

    ``model(inputs)`` must return one :class:`BoostDiagnostics` per layer,
    with arrays shaped ``(B, T, d)`` / ``(B, H, T, d_head)`` (a missing batch
    axis is allowed). Positions are restricted to ``t < position_cap`` and
    the hull at position ``t`` spans round-0 value rows ``0..t``.
    """
    rng = np.random.default_rng(seed)
    survey = HullSurvey()
    for layer, diag in enumerate(model(inputs)):
        values = np.asarray(diag.values[0])
        final = np.asarray(diag.predictions[-1])
        if values.ndim == 3:
            values, final = values[None], final[None]
        n_seq, n_heads, T, dh = values.shape
        t_max = min(T, position_cap)
        for _ in range(samples_per_layer):
            b = int(rng.integers(n_seq))
            h = int(rng.integers(n_heads))
            t = int(rng.integers(t_max))
            o = final[b, t, h * dh:(h + 1) * dh]
            res = hull_distance(o, values[b, h, :t + 1])
            survey.rows.append((layer, h, t, res.distance))
        dists = survey.distances(layer)
        survey.layer_mean[layer] = float(dists.mean())
        survey.escape_fraction[layer] = float((dists > escape_tol).mean())
    return survey


def brute_force_hull_distance(o: np.ndarray, V: np.ndarray) -> float:
    """Exhaustive search over all faces of conv(V); only for small t."""
    from itertools import combinations

    o = np.asarray(o, dtype=float)
    V = np.atleast_2d(np.asarray(V, dtype=float))
    best = np.inf
    t = V.shape[0]
    for size in range(1, t + 1):
        for subset in combinations(range(t), size):
            S = V[list(subset)]
            base = S[-1]
            if size == 1:
                coef = np.ones(1)
            else:
                D = (S[:-1] - base).T      # affine directions
                c = np.linalg.lstsq(D, o - base, rcond=None)[0]
                coef = np.append(c, 1.0 - c.sum())
            if np.all(coef >= -1e-12):
                best = min(best, float(np.linalg.norm(o - coef @ S)))
    return best
