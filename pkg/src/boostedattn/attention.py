"""Attention mechanisms: standard, Twicing, gradient-boosted, and Hopfield.

Sequences are row-major ``(..., T, d_model)``. Per-round projections are
stored as ``d_model x d_model`` matrices whose row block ``h`` is the
``d_head x d_model`` projection of head ``h``. Every forward function accepts
weights as numpy arrays or as tape tensors, so the same code serves inference
and training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor, value

GATE_KINDS = ("none", "scalar", "mlp")
KV_SOURCES = ("residual", "input")


class ParameterError(ValueError):
    pass


@dataclass
class AttentionParams:
    d_model: int
    n_heads: int = 1
    rounds: int = 1
    gate_kind: str = "mlp"
    kv_source: str = "residual"
    causal: bool = False
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.rounds < 1:
            raise ParameterError(f"rounds must be >= 1, got {self.rounds}")
        if self.gate_kind not in GATE_KINDS:
            raise ParameterError(f"unknown gate kind {self.gate_kind!r}")
        if self.kv_source not in KV_SOURCES:
            raise ParameterError(f"unknown kv_source {self.kv_source!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def init(cls, d_model: int, n_heads: int = 1, rounds: int = 1, gate_kind: str = "mlp",
             kv_source: str = "residual", causal: bool = False,
             rng: np.random.Generator | None = None, scale: float | None = None) -> "AttentionParams":
        """Gaussian projections with std ``1/sqrt(d_model)``; gates start at 0.5."""
        rng = np.random.default_rng(0) if rng is None else rng
        params = cls(d_model, n_heads, rounds, gate_kind, kv_source, causal)
        std = 1.0 / np.sqrt(d_model) if scale is None else scale
        w = {}
        for m in range(rounds):
            for kind in ("q", "k", "v"):
                w[f"w{kind}{m}"] = rng.normal(0.0, std, (d_model, d_model))
        w["wout"] = rng.normal(0.0, std, (d_model, d_model))
        for m in range(1, rounds):
            if gate_kind == "scalar":
                w[f"gate{m}"] = np.zeros(())
            elif gate_kind == "mlp":
                w[f"gate{m}_w"] = rng.normal(0.0, 1.0 / np.sqrt(2 * d_model), (d_model, 2 * d_model))
                w[f"gate{m}_b"] = np.zeros(d_model)
        params.weights = w
        return params

    def with_weights(self, weights: dict) -> "AttentionParams":
        return replace(self, weights=dict(weights))

    def bind(self, tape: ad.Tape, prefix: str = "") -> "AttentionParams":
        """Copy whose weights are leaves on ``tape`` (named ``prefix + key``)."""
        return self.with_weights({k: tape.watch(v, name=prefix + k) for k, v in self.weights.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(value(v)) for k, v in self.weights.items()}


@dataclass
class BoostDiagnostics:
    """Per-round record of one boosted forward pass (plain arrays).

    ``predictions[0]`` is the round-0 estimate; ``predictions[m]`` is the
    cumulative prediction after round ``m``. ``residuals``, ``corrections``
    and ``gates`` are indexed from round 1 (list position ``m - 1``).
    """

    attention: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    corrections: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    values: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# head plumbing


def project(x, w):
    """Apply ``w`` (out x in) to the rows of ``x``."""
    return ad.matmul(x, ad.swapaxes(w, -1, -2) if isinstance(w, Tensor) else value(w).T)


def split_heads(t, n_heads: int):
    shape = t.shape
    t = ad.reshape(t, shape[:-1] + (n_heads, shape[-1] // n_heads))
    axes = tuple(range(len(shape) - 2)) + (len(shape) - 1, len(shape) - 2, len(shape))
    return ad.transpose(t, axes)


def merge_heads(t):
    shape = t.shape  # (..., H, T, dh)
    nd = len(shape)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    t = ad.transpose(t, axes)
    return ad.reshape(t, shape[:-3] + (shape[-2], shape[-3] * shape[-1]))


def causal_mask(t_q: int, t_k: int | None = None) -> np.ndarray:
    t_k = t_q if t_k is None else t_k
    return np.tril(np.ones((t_q, t_k), dtype=bool))


def _check_input(x, params: AttentionParams):
    if x.shape[-1] != params.d_model or len(x.shape) < 2:
        raise DimensionError(f"input shape {x.shape} incompatible with d_model={params.d_model}")


def attend(q_src, kv_src, params: AttentionParams, m: int = 0, mask: np.ndarray | None = None):
    """One attention round: queries from ``q_src``, keys and values from ``kv_src``.

    Returns ``(output, attention, values)`` with output ``(..., T, d_model)``,
    attention ``(..., H, T_q, T_k)`` and per-head values ``(..., H, T_k, d_head)``.
    ``mask`` is a boolean ``(T_q, T_k)`` array of allowed positions, combined
    with the causal mask when ``params.causal``.
    """
    _check_input(q_src, params)
    _check_input(kv_src, params)
    if f"wq{m}" not in params.weights:
        raise ParameterError(f"round {m} has no projections (rounds={params.rounds})")
    w = params.weights
    h = params.n_heads
    q = split_heads(project(q_src, w[f"wq{m}"]), h)
    k = split_heads(project(kv_src, w[f"wk{m}"]), h)
    v = split_heads(project(kv_src, w[f"wv{m}"]), h)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(params.d_head))
    allowed = mask
    if params.causal:
        cm = causal_mask(q_src.shape[-2], kv_src.shape[-2])
        allowed = cm if allowed is None else (allowed & cm)
    if allowed is not None:
        scores = ad.masked_fill(scores, allowed)
    a = ad.softmax(scores, axis=-1)
    return merge_heads(ad.matmul(a, v)), a, v


def standard_attention(x, params: AttentionParams, round: int = 0, mask: np.ndarray | None = None):
    """Multi-head softmax attention of round ``round``; no output projection."""
    return attend(x, x, params, round, mask)[0]


def twicing_attention(x, params: AttentionParams, mask: np.ndarray | None = None):
    """Per head ``(2A - A^2) V`` with round-0 ``A`` and ``V``, as ``AV + A(V - AV)``."""
    _, a, v = attend(x, x, params, 0, mask)
    av = ad.matmul(a, v)
    return merge_heads(av + ad.matmul(a, v - av))


def gate(F, c, params: AttentionParams, m: int, kind: str | None = None):
    """Per-dimension shrinkage in [0, 1] for the round-``m`` correction ``c``."""
    kind = params.gate_kind if kind is None else kind
    if kind == "none":
        return ad.Tensor(np.ones(value(c).shape))
    if kind == "scalar":
        s = ad.sigmoid(params.weights[f"gate{m}"])
        return ad.mul(s, np.ones(value(c).shape))
    if kind == "mlp":
        fc = ad.concat([F, c], axis=-1)
        return ad.sigmoid(project(fc, params.weights[f"gate{m}_w"]) + params.weights[f"gate{m}_b"])
    raise ParameterError(f"unknown gate kind {kind!r}")


def boosted_attention_forward(x, params: AttentionParams, mask: np.ndarray | None = None,
                              project_out: bool = True):
    """Gradient-boosted attention over ``params.rounds`` rounds.

    Round 0 attends over ``x``; each later round attends over the residual
    ``x - F`` (or, with ``kv_source="input"``, takes queries from the residual
    and keys/values from ``x``) and adds its gated correction to ``F``.
    Returns ``(W_out F, diagnostics)``.
    """
    diag = BoostDiagnostics()
    y0, a0, v0 = attend(x, x, params, 0, mask)
    diag.attention.append(value(a0).copy())
    diag.values.append(value(v0).copy())
    diag.predictions.append(value(y0).copy())
    F = y0
    for m in range(1, params.rounds):
        r = ad.sub(x, F)
        kv = r if params.kv_source == "residual" else x
        c, a, v = attend(r, kv, params, m, mask)
        g = gate(F, c, params, m)
        F = F + g * c
        diag.attention.append(value(a).copy())
        diag.values.append(value(v).copy())
        diag.residuals.append(value(r).copy())
        diag.corrections.append(value(c).copy())
        diag.gates.append(value(g).copy())
        diag.predictions.append(value(F).copy())
    out = project(F, params.weights["wout"]) if project_out else F
    return out, diag


# ---------------------------------------------------------------------------
# Hopfield retrieval (patterns are the columns of X)


def _check_beta(beta: float):
    if not beta > 0:
        raise ParameterError(f"beta must be > 0, got {beta}")


def hopfield_update(X, xi, beta: float):
    """``X softmax(beta X^T xi)``; ``xi`` may carry leading batch axes."""
    _check_beta(beta)
    X = value(X) if not isinstance(X, Tensor) else X
    scores = ad.matmul(xi, X) * beta          # (..., N)
    return ad.matmul(ad.softmax(scores, axis=-1), ad.swapaxes(X, -1, -2) if isinstance(X, Tensor) else value(X).T)


def hopfield_update_np(X: np.ndarray, xi: np.ndarray, beta: float) -> np.ndarray:
    _check_beta(beta)
    return ad._softmax(beta * (xi @ X), -1) @ X.T


def hopfield_energy(X, xi, beta: float):
    """``-(1/beta) logsumexp(beta X^T xi) + ||xi||^2 / 2`` (constant dropped)."""
    _check_beta(beta)
    scores = ad.matmul(xi, X) * beta
    return ad.logsumexp(scores, axis=-1) * (-1.0 / beta) + ad.sum_(ad.mul(xi, xi), axis=-1) * 0.5


def hopfield_energy_grad(X: np.ndarray, xi: np.ndarray, beta: float) -> np.ndarray:
    """Analytic energy gradient ``xi - T(xi)``."""
    return xi - hopfield_update_np(X, xi, beta)


def hopfield_iterate(X: np.ndarray, xi: np.ndarray, beta: float, max_steps: int = 100,
                     tol: float = 1e-8) -> tuple[np.ndarray, int, bool]:
    """Apply the update until the step norm drops to ``tol`` or ``max_steps`` run out."""
    if max_steps < 1 or not tol > 0:
        raise ParameterError("need max_steps >= 1 and tol > 0")
    X = np.asarray(X, dtype=float)
    cur = np.asarray(xi, dtype=float)
    for step in range(1, max_steps + 1):
        nxt = hopfield_update_np(X, cur, beta)
        delta = np.linalg.norm(nxt - cur)
        cur = nxt
        if delta <= tol:
            return cur, step, True
    return cur, max_steps, False


def bayes_optimal_denoiser(patterns: np.ndarray, query: np.ndarray, sigma: float) -> np.ndarray:
    """Posterior mean of the clean pattern: softmax attention with beta = 1/sigma^2.

    ``patterns`` is ``K x d`` with unit rows; ``query`` is ``(..., d)``.
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    return hopfield_update_np(np.asarray(patterns, float).T, np.asarray(query, float), 1.0 / sigma ** 2)
