"""Synthetic pattern retrieval: task, models, training and evaluation.

The attention input for one query is the sequence ``[p_1, ..., p_K, x]``:
the K stored patterns followed by the noisy query. Every position attends to
the pattern positions only, so the pattern rows form a query-independent
memory stream and a batch of queries shares it. The model output is the
query position's output.

Model kinds:

* ``boosted`` with ``rounds`` M: gradient-boosted attention. M = 1 is the
  one-step model.
* ``one_step``: alias for ``boosted`` with M = 1.
* ``unrolled``: the one-step map applied ``unroll_steps`` times to its own
  output, trained by backpropagating through every application.
* ``deq``: the same map iterated to a fixed point, trained with implicit
  differentiation at the fixed point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, ParameterError, attend, gate, project
from .autodiff import value

log = logging.getLogger(__name__)

MODEL_KINDS = ("one_step", "boosted", "unrolled", "deq")


def rng_for(seed: int, stream: int) -> np.random.Generator:
    """Independent PCG64 stream ``stream`` of ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


# stream ids
_PATTERNS, _INIT, _BATCHES, _EVAL = 0, 1, 2, 3


@dataclass(frozen=True)
class PatternTask:
    d: int
    K: int
    sigma: float
    seed: int
    patterns: np.ndarray = field(repr=False)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` queries ``p_j + eps`` with j uniform and eps ~ N(0, sigma^2 I)."""
        return sample_queries(self.patterns, self.sigma, n, rng)

    @property
    def chance(self) -> float:
        return 1.0 / self.K


def unit_patterns(K: int, d: int, rng: np.random.Generator) -> np.ndarray:
    p = rng.standard_normal((K, d))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def sample_queries(patterns: np.ndarray, sigma: float, n: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    K, d = patterns.shape
    labels = rng.integers(0, K, n)
    noise = rng.standard_normal((n, d))
    return patterns[labels] + sigma * noise, labels


def generate_task(d: int, K: int, sigma: float, seed: int = 0) -> PatternTask:
    if d < 1 or K < 1 or sigma < 0:
        raise ParameterError(f"invalid task sizes d={d}, K={K}, sigma={sigma}")
    return PatternTask(d, K, float(sigma), seed, unit_patterns(K, d, rng_for(seed, _PATTERNS)))


def nearest_pattern(outputs: np.ndarray, patterns: np.ndarray) -> np.ndarray:
    """Index of the Euclidean-nearest pattern per row (lowest index on ties)."""
    d2 = (outputs * outputs).sum(1)[:, None] - 2.0 * outputs @ patterns.T + (patterns * patterns).sum(1)[None]
    return np.argmin(d2, axis=1)


def retrieval_accuracy(model_fn, task: PatternTask, n_queries: int = 10_000, seed: int = 0,
                       chunk: int = 10_000) -> float:
    """Fraction of queries whose output is nearest to the generating pattern."""
    if n_queries < 1:
        raise ParameterError("n_queries must be >= 1")
    queries, labels = task.sample(n_queries, rng_for(seed, _EVAL))
    hits = 0
    for s in range(0, n_queries, chunk):
        out = np.asarray(value(model_fn(queries[s:s + chunk])))
        hits += int((nearest_pattern(out, task.patterns) == labels[s:s + chunk]).sum())
    return hits / n_queries


def bayes_accuracy(d: int, K: int, sigma: float, n_queries: int = 50_000, seed: int = 0,
                   queries_per_task: int = 200) -> float:
    """Monte-Carlo accuracy of the Bayes denoiser, averaged over random pattern sets.

    A fresh pattern set is drawn for every ``queries_per_task`` queries, so the
    estimate converges to the expectation over tasks rather than the value
    for one particular draw of patterns.
    """
    from .attention import bayes_optimal_denoiser

    rng = rng_for(seed, 17)
    hits, done = 0, 0
    while done < n_queries:
        n = min(queries_per_task, n_queries - done)
        patterns = unit_patterns(K, d, rng)
        x, labels = sample_queries(patterns, sigma, n, rng)
        out = bayes_optimal_denoiser(patterns, x, sigma)
        hits += int((nearest_pattern(out, patterns) == labels).sum())
        done += n
    return hits / n_queries


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "one_step"
    rounds: int = 1
    gate_kind: str = "mlp"
    kv_source: str = "residual"
    out_proj: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ParameterError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.kind != "boosted" and self.rounds != 1:
            raise ParameterError(f"{self.kind} models use a single attention round")

    @classmethod
    def parse(cls, text: str) -> "ModelSpec":
        """``one_step``, ``unrolled``, ``deq`` or ``boosted(M[,gate[,kv_source]])``."""
        text = text.strip()
        if text.startswith("boosted"):
            inner = text[len("boosted"):].strip("() ")
            parts = [p.strip() for p in inner.split(",") if p.strip()]
            rounds = int(parts[0]) if parts else 2
            gate_kind = parts[1] if len(parts) > 1 else "mlp"
            kv = parts[2] if len(parts) > 2 else "residual"
            return cls("boosted", rounds, gate_kind, kv)
        return cls(text)

    @property
    def label(self) -> str:
        if self.kind == "boosted":
            return f"boosted(M={self.rounds},{self.gate_kind})"
        return self.kind


def init_params(spec: ModelSpec, d: int, seed: int) -> AttentionParams:
    params = AttentionParams.init(d, n_heads=1, rounds=spec.rounds, gate_kind=spec.gate_kind,
                                  kv_source=spec.kv_source, rng=rng_for(seed, _INIT))
    if not spec.out_proj:
        params.weights.pop("wout")
    return params


def boosted_forward(params: AttentionParams, patterns: np.ndarray, queries):
    """Boosted attention output at the query position for a batch of queries.

    Equivalent to running the generic boosted forward on each sequence
    ``[patterns; query]`` with keys restricted to the pattern positions.
    """
    M = params.rounds
    F_q = attend(queries, patterns, params, 0)[0]
    F_mem = attend(patterns, patterns, params, 0)[0] if M > 1 else None
    for m in range(1, M):
        r_q = ad.sub(queries, F_q)
        r_mem = ad.sub(patterns, F_mem)
        kv = r_mem if params.kv_source == "residual" else patterns
        c_q = attend(r_q, kv, params, m)[0]
        if m < M - 1:
            c_mem = attend(r_mem, kv, params, m)[0]
            F_mem = F_mem + gate(F_mem, c_mem, params, m) * c_mem
        F_q = F_q + gate(F_q, c_q, params, m) * c_q
    return project(F_q, params.weights["wout"]) if "wout" in params.weights else F_q


def one_step_map(params: AttentionParams, patterns: np.ndarray, xi):
    return boosted_forward(replace(params, rounds=1), patterns, xi)


def unrolled_forward(params: AttentionParams, patterns: np.ndarray, queries, steps: int = 20):
    xi = queries
    for _ in range(steps):
        xi = one_step_map(params, patterns, xi)
    return xi


def _map_np(w: dict, patterns: np.ndarray, xi: np.ndarray):
    """Numpy one-step map plus the pieces needed for its Jacobian."""
    d = patterns.shape[1]
    keys = patterns @ w["wk0"].T
    vals = patterns @ w["wv0"].T
    q = xi @ w["wq0"].T
    a = ad._softmax(q @ keys.T / np.sqrt(d), -1)
    out = a @ vals
    return (out @ w["wout"].T if "wout" in w else out), a, keys, vals


def deq_fixed_point(params: AttentionParams, patterns: np.ndarray, queries: np.ndarray,
                    tol: float = 1e-8, max_iter: int = 200) -> tuple[np.ndarray, int, bool]:
    """Iterate the one-step map from each query until every row moves <= tol."""
    w = {k: value(v) for k, v in params.weights.items()}
    xi = np.asarray(queries, dtype=float)
    for it in range(1, max_iter + 1):
        nxt = _map_np(w, patterns, xi)[0]
        step = np.linalg.norm(nxt - xi, axis=-1).max()
        xi = nxt
        if step <= tol:
            return xi, it, True
    return xi, max_iter, False


def map_jacobian(params: AttentionParams, patterns: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Per-row Jacobian of the one-step map at ``xi``: shape ``(B, d, d)``."""
    w = {k: value(v) for k, v in params.weights.items()}
    d = patterns.shape[1]
    _, a, keys, vals = _map_np(w, patterns, np.atleast_2d(xi))
    left = w["wout"] @ vals.T if "wout" in w else vals.T   # d x K
    right = keys @ w["wq0"] / np.sqrt(d)               # K x d
    # L (diag(a) - a a^T) R, batched over rows
    return (left[None] * a[:, None, :]) @ right - (a @ left.T)[:, :, None] * (a @ right)[:, None, :]


def deq_loss_and_grads(params: AttentionParams, patterns: np.ndarray, queries: np.ndarray,
                       targets: np.ndarray, tol: float = 1e-8, max_iter: int = 200):
    """MSE at the fixed point and its parameter gradients via the implicit function theorem.

    For each row solves ``(I - J)^T y = dL/dxi*`` with the dense Jacobian ``J``
    of the map at the fixed point, then backpropagates ``y`` through one
    application of the map.
    """
    xi, _, converged = deq_fixed_point(params, patterns, queries, tol, max_iter)
    if not converged:
        log.debug("DEQ forward hit max_iter=%d before tol=%g", max_iter, tol)
    B, d = xi.shape
    diff = xi - targets
    loss = float((diff * diff).sum(1).mean())
    g = 2.0 * diff / B
    system = np.eye(d)[None] - np.swapaxes(map_jacobian(params, patterns, xi), 1, 2)
    try:
        y = np.linalg.solve(system, g[..., None])[..., 0]
        if not np.all(np.isfinite(y)):
            raise np.linalg.LinAlgError("non-finite solve")
    except np.linalg.LinAlgError:
        log.warning("DEQ implicit system singular; using least squares")
        y = np.stack([np.linalg.lstsq(system[b], g[b], rcond=None)[0] for b in range(B)])
    tape = ad.Tape()
    bound = params.bind(tape)
    surrogate = ad.sum_(ad.mul(one_step_map(bound, patterns, xi), y))
    return loss, tape.backward(surrogate).named(), xi


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainRecipe:
    lr: float = 3e-3
    batch_size: int = 512
    epochs: int = 150
    steps_per_epoch: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = None
    unroll_steps: int = 20
    deq_tol: float = 1e-8
    deq_max_iter: int = 200
    eval_queries: int = 10_000

    def __post_init__(self):
        for name in ("lr", "batch_size", "epochs", "steps_per_epoch", "unroll_steps",
                     "deq_tol", "deq_max_iter", "eval_queries"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"TrainRecipe.{name} must be positive")


@dataclass
class RetrievalModel:
    spec: ModelSpec
    params: AttentionParams
    patterns: np.ndarray
    recipe: TrainRecipe = field(default_factory=TrainRecipe)
    losses: list = field(default_factory=list)

    def __call__(self, queries: np.ndarray) -> np.ndarray:
        queries = np.asarray(queries, dtype=float)
        if self.spec.kind == "unrolled":
            return value(unrolled_forward(self.params, self.patterns, queries, self.recipe.unroll_steps))
        if self.spec.kind == "deq":
            return deq_fixed_point(self.params, self.patterns, queries,
                                   self.recipe.deq_tol, self.recipe.deq_max_iter)[0]
        return value(boosted_forward(self.params, self.patterns, queries))


def _forward(spec: ModelSpec, params, patterns, queries, recipe: TrainRecipe):
    if spec.kind == "unrolled":
        return unrolled_forward(params, patterns, queries, recipe.unroll_steps)
    return boosted_forward(params, patterns, queries)


def train_retrieval_model(spec: ModelSpec | str, task: PatternTask, recipe: TrainRecipe | None = None,
                          seed: int | None = None) -> tuple[RetrievalModel, float]:
    """Adam on the squared error to the clean pattern; returns (model, test accuracy)."""
    spec = ModelSpec.parse(spec) if isinstance(spec, str) else spec
    recipe = TrainRecipe() if recipe is None else recipe
    seed = task.seed if seed is None else seed
    params = init_params(spec, task.d, seed)
    weights = params.arrays()
    state = ad.AdamState(lr=recipe.lr, beta1=recipe.beta1, beta2=recipe.beta2, eps=recipe.eps)
    batches = rng_for(seed, _BATCHES)
    losses = []
    for _ in range(recipe.epochs * recipe.steps_per_epoch):
        queries, labels = task.sample(recipe.batch_size, batches)
        targets = task.patterns[labels]
        if spec.kind == "deq":
            loss, grads, _ = deq_loss_and_grads(params.with_weights(weights), task.patterns, queries,
                                                targets, recipe.deq_tol, recipe.deq_max_iter)
        else:
            tape = ad.Tape()
            bound = params.with_weights(weights).bind(tape)
            loss_t = ad.mse(_forward(spec, bound, task.patterns, queries, recipe), targets)
            grads = tape.backward(loss_t).named()
            loss = loss_t.item()
        losses.append(loss)
        weights = ad.adam_step(weights, grads, state, clip=recipe.clip)
    model = RetrievalModel(spec, params.with_weights(weights), task.patterns, recipe, losses)
    return model, retrieval_accuracy(model, task, recipe.eval_queries, seed)
