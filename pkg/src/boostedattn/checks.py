"""Randomized property suites: the geometric propositions and gradient checks.

Each check draws its instances from a seeded generator and returns a
:class:`CheckResult` holding the worst observed statistic and its limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .analysis import hull_distance, layernorm_jacobian, orthogonal_erasure_test, rowspan_residual
from .attention import (AttentionParams, attend, boosted_attention_forward, hopfield_energy,
                        hopfield_update_np, twicing_attention)


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    limit: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3e} vs limit {self.limit:.1e}{extra}"


def _max_check(name: str, values, limit: float, detail: str = "") -> CheckResult:
    worst = float(np.max(values))
    return CheckResult(name, worst, limit, worst <= limit, detail or f"n={len(values)}")


def hopfield_hull_check(rng: np.random.Generator, n: int = 100, limit: float = 1e-8) -> CheckResult:
    """One Hopfield step lands in the convex hull of the stored patterns."""
    dists = []
    for _ in range(n):
        d, N = int(rng.integers(2, 17)), int(rng.integers(1, 13))
        X = rng.standard_normal((d, N))
        xi = rng.standard_normal(d) * rng.uniform(0.5, 3.0)
        beta = float(np.exp(rng.uniform(np.log(0.05), np.log(20.0))))
        dists.append(hull_distance(hopfield_update_np(X, xi, beta), X.T).distance)
    return _max_check("hopfield output in conv(X)", dists, limit)


def erasure_check(rng: np.random.Generator, n: int = 100, limit: float = 1e-10) -> CheckResult:
    """Components of the query orthogonal to col(X) do not affect the update."""
    gaps = []
    for _ in range(n):
        X = rng.standard_normal((16, 4))
        xi = rng.standard_normal(16) * 2.0
        beta = float(rng.uniform(0.1, 4.0))
        gaps.append(orthogonal_erasure_test(X, xi, beta))
    return _max_check("orthogonal erasure", gaps, limit)


def twicing_rowspan_check(rng: np.random.Generator, n: int = 100, limit: float = 1e-8) -> CheckResult:
    """(2A - A^2)V stays in the row span of V."""
    res = []
    for _ in range(n):
        T, d = int(rng.integers(2, 7)), 12
        params = AttentionParams.init(d, n_heads=1, rng=rng)
        x = rng.standard_normal((T, d))
        _, _, v = attend(x, x, params)
        out = twicing_attention(x, params).data
        res.append(rowspan_residual(v.data[0], out))
    return _max_check("twicing output in rowspan(V)", res, limit)


def boosted_escape_check(rng: np.random.Generator, n: int = 100, threshold: float = 1e-3,
                         min_fraction: float = 0.95) -> CheckResult:
    """Boosted corrections generically leave the row span of the round-0 values."""
    res = []
    for _ in range(n):
        T, d = int(rng.integers(2, 7)), 12
        params = AttentionParams.init(d, n_heads=1, rounds=2, gate_kind="none", rng=rng)
        x = rng.standard_normal((T, d))
        _, diag = boosted_attention_forward(x, params)
        res.append(rowspan_residual(diag.values[0][0], diag.corrections[0]))
    frac = float(np.mean(np.array(res) > threshold))
    return CheckResult("boosted correction outside rowspan(V0)", frac, min_fraction, frac >= min_fraction,
                       f"fraction with residual > {threshold:g}, n={n}")


def layernorm_jacobian_check(rng: np.random.Generator, n: int = 20, dims=(2, 4, 16, 64),
                             limit: float = 1e-5) -> list[CheckResult]:
    """Analytic Jacobian matches finite differences and has rank d - 2."""
    errors, bad_rank = [], []
    for i in range(n):
        d = dims[i % len(dims)]
        u = rng.standard_normal(d) * rng.uniform(0.5, 2.0) + rng.standard_normal()
        gamma = rng.uniform(0.5, 1.5, d)
        rep = layernorm_jacobian(u, gamma)
        errors.append(rep.fd_max_error)
        if rep.rank != d - 2:
            bad_rank.append((d, rep.rank))
    return [_max_check("layernorm Jacobian vs finite differences", errors, limit),
            CheckResult("layernorm Jacobian rank d-2", float(len(bad_rank)), 0.0, not bad_rank,
                        f"mismatches {bad_rank}" if bad_rank else f"n={n}, d in {tuple(dims)}")]


def energy_identity_check(rng: np.random.Generator, n: int = 100, limit: float = 1e-10) -> CheckResult:
    """T(xi) = xi - grad E(xi) with the gradient from the tape."""
    gaps = []
    for _ in range(n):
        d, N = int(rng.integers(2, 17)), int(rng.integers(1, 13))
        X = rng.standard_normal((d, N))
        beta = float(np.exp(rng.uniform(np.log(0.05), np.log(10.0))))
        tape = ad.Tape()
        xi = tape.watch(rng.standard_normal(d))
        grad = tape.backward(hopfield_energy(X, xi, beta))[xi]
        gaps.append(float(np.linalg.norm(hopfield_update_np(X, xi.data, beta) - (xi.data - grad))))
    return _max_check("energy identity T = xi - grad E", gaps, limit)


def run_proposition_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [hopfield_hull_check(rng), erasure_check(rng), twicing_rowspan_check(rng),
            boosted_escape_check(rng), *layernorm_jacobian_check(rng), energy_identity_check(rng)]


# ---------------------------------------------------------------------------
# gradient checks


def boosted_loss_gradcheck(rng: np.random.Generator, rounds: int = 3, gate_kind: str = "mlp",
                           kv_source: str = "residual") -> float:
    """Worst relative error over all parameters (and the input) of a random boosted loss."""
    T, d = int(rng.integers(2, 6)), 6
    params = AttentionParams.init(d, n_heads=2, rounds=rounds, gate_kind=gate_kind,
                                  kv_source=kv_source, causal=bool(rng.integers(2)), rng=rng)
    x = rng.standard_normal((T, d))
    target = rng.standard_normal((T, d))
    names = list(params.weights)

    def loss(**kw):
        p = params.with_weights({k: kw[k] for k in names})
        out, _ = boosted_attention_forward(kw["x"], p)
        return ad.mse(out, target)

    errors = ad.gradcheck(loss, {"x": x, **params.arrays()})
    return max(errors.values())


def lm_block_gradcheck(rng: np.random.Generator, placement: str = "pre", mechanism: str = "boosted") -> float:
    """Worst relative error over all parameters of one transformer block."""
    from .lm import LmConfig, build_block, init_lm_params

    d = 4
    config = LmConfig(vocab_size=5, seq_len=4, n_layers=1, d_model=d, n_heads=2, ffn_mult=2,
                      mechanism=mechanism, norm_placement=placement, dropout=0.0)
    params = {k: v for k, v in init_lm_params(config, int(rng.integers(1 << 30))).items() if k.startswith("l0.")}
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    h = rng.standard_normal((3, d))
    weight = rng.standard_normal((3, d))
    block = build_block(config, 0)
    keys = list(params)

    def loss(**kw):
        return ad.sum_(ad.mul(block(h, {k: kw[k.replace(".", "__")] for k in keys}), weight))

    errors = ad.gradcheck(loss, {k.replace(".", "__"): v for k, v in params.items()})
    return max(errors.values())


def run_gradcheck_suite(seed: int = 0, instances: int = 10, limit: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    boosted = [boosted_loss_gradcheck(rng, rounds=int(rng.integers(1, 4)),
                                      gate_kind=("none", "scalar", "mlp")[i % 3],
                                      kv_source=("residual", "input")[i % 2]) for i in range(instances)]
    blocks = [lm_block_gradcheck(rng, ("pre", "post")[i % 2], ("standard", "twicing", "boosted")[i % 3])
              for i in range(instances)]
    return [_max_check("boosted attention loss gradients", boosted, limit, f"n={instances}"),
            _max_check("transformer block gradients", blocks, limit, f"n={instances}")]
