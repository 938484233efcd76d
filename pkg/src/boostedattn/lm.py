"""Character-level causal language model with switchable attention and norm placement."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np

from . import autodiff as ad
from .attention import (AttentionParams, ParameterError, boosted_attention_forward, project,
                        standard_attention, twicing_attention)
from .autodiff import value
from .report import ExperimentReport

MECHANISMS = ("standard", "twicing", "boosted")
PLACEMENTS = ("pre", "post")
EMBED_STD = 0.02


@dataclass(frozen=True)
class Corpus:
    """Character corpus split into contiguous train / val / test ranges."""

    vocab: tuple
    train: np.ndarray = field(repr=False)
    val: np.ndarray = field(repr=False)
    test: np.ndarray = field(repr=False)

    @classmethod
    def from_text(cls, text: str, fractions=(0.9, 0.05, 0.05)) -> "Corpus":
        if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
            raise ParameterError(f"bad split fractions {fractions}")
        vocab = tuple(sorted(set(text)))
        index = {c: i for i, c in enumerate(vocab)}
        ids = np.fromiter((index[c] for c in text), dtype=np.int64, count=len(text))
        a = int(len(ids) * fractions[0])
        b = a + int(len(ids) * fractions[1])
        return cls(vocab, ids[:a], ids[a:b], ids[b:])

    @classmethod
    def bundled(cls, max_chars: int | None = None) -> "Corpus":
        """The packaged public-domain text (Paradise Lost, about 450k characters)."""
        text = resources.files("boostedattn").joinpath("data/paradise_lost.txt").read_text(encoding="ascii")
        return cls.from_text(text if max_chars is None else text[:max_chars])

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, s: str) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.vocab)}
        return np.array([index[c] for c in s], dtype=np.int64)

    def decode(self, ids) -> str:
        return "".join(self.vocab[int(i)] for i in ids)

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise ParameterError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 65
    seq_len: int = 64
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    ffn_mult: int = 4
    mechanism: str = "standard"
    rounds: int = 2
    gate_kind: str = "mlp"
    kv_source: str = "residual"
    norm_placement: str = "pre"
    dropout: float = 0.1
    weight_tying: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.seq_len < 2:
            raise ParameterError("seq_len must be >= 2")
        if self.mechanism not in MECHANISMS:
            raise ParameterError(f"unknown mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if self.norm_placement not in PLACEMENTS:
            raise ParameterError(f"unknown norm placement {self.norm_placement!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must lie in [0, 1)")

    @property
    def attn_rounds(self) -> int:
        return self.rounds if self.mechanism == "boosted" else 1

    @property
    def label(self) -> str:
        mech = f"boosted(M={self.rounds})" if self.mechanism == "boosted" else self.mechanism
        return f"{mech}/{self.norm_placement}/d={self.d_model}"


@dataclass(frozen=True)
class LmRecipe:
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 5
    steps_per_epoch: int | None = 40
    warmup_frac: float = 0.1
    clip: float | None = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_windows: int | None = None

    def total_steps(self, n_train: int, seq_len: int) -> int:
        per_epoch = self.steps_per_epoch or max(1, (n_train - 1) // (seq_len * self.batch_size))
        return per_epoch * self.epochs

    def lr_at(self, step: int, total: int) -> float:
        """Linear warmup to ``lr`` then cosine decay to zero (``step`` counts from 0)."""
        warm = max(1, int(round(self.warmup_frac * total)))
        if step < warm:
            return self.lr * (step + 1) / warm
        frac = (step - warm) / max(1, total - warm)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(1.0, frac)))


# ---------------------------------------------------------------------------
# parameters


def _attn_params(config: LmConfig, weights: dict | None = None) -> AttentionParams:
    return AttentionParams(config.d_model, config.n_heads, config.attn_rounds, config.gate_kind,
                           config.kv_source, causal=True, weights=weights or {})


def init_lm_params(config: LmConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 101])))
    d, f = config.d_model, config.ffn_mult * config.d_model
    p = {"tok_emb": rng.normal(0.0, EMBED_STD, (config.vocab_size, d)),
         "pos_emb": rng.normal(0.0, EMBED_STD, (config.seq_len, d))}
    for layer in range(config.n_layers):
        pre = f"l{layer}."
        attn = AttentionParams.init(d, config.n_heads, config.attn_rounds, config.gate_kind,
                                    config.kv_source, causal=True, rng=rng)
        p.update({pre + "attn." + k: v for k, v in attn.weights.items()})
        p[pre + "ln1_g"], p[pre + "ln1_b"] = np.ones(d), np.zeros(d)
        p[pre + "ln2_g"], p[pre + "ln2_b"] = np.ones(d), np.zeros(d)
        p[pre + "w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), (f, d))
        p[pre + "b1"] = np.zeros(f)
        p[pre + "w2"] = rng.normal(0.0, 1.0 / np.sqrt(f), (d, f))
        p[pre + "b2"] = np.zeros(d)
    if config.norm_placement == "pre":
        p["lnf_g"], p["lnf_b"] = np.ones(d), np.zeros(d)
    if not config.weight_tying:
        p["head"] = rng.normal(0.0, EMBED_STD, (config.vocab_size, d))
    return p


def count_params(params: dict) -> int:
    return int(sum(np.asarray(value(v)).size for v in params.values()))


def width_matched_d_model(config: LmConfig) -> int:
    """Smallest standard-attention width (multiple of n_heads) with at least the boosted parameter count."""
    target = count_params(init_lm_params(replace(config, mechanism="boosted")))
    d = config.d_model
    while count_params(init_lm_params(replace(config, mechanism="standard", d_model=d))) < target:
        d += config.n_heads
    return d


# ---------------------------------------------------------------------------
# forward


def _layer_view(params: dict, layer: int) -> dict:
    pre = f"l{layer}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def _attention(config: LmConfig, attn: AttentionParams, x, record: dict | None):
    if config.mechanism == "standard":
        out = standard_attention(x, attn)
    elif config.mechanism == "twicing":
        out = twicing_attention(x, attn)
    else:
        F, diag = boosted_attention_forward(x, attn, project_out=False)
        if record is not None:
            record.setdefault("diagnostics", []).append(diag)
        out = F
    return project(out, attn.weights["wout"])


def build_block(config: LmConfig, layer: int = 0):
    """Return ``block(h, params, rng=None, record=None)`` for one transformer layer.

    Pre-LN: ``h + Attn(LN(h))`` then ``h + FFN(LN(h))``.
    Post-LN: ``LN(h + Attn(h))`` then ``LN(h + FFN(h))``.
    ``params`` is the full flat parameter dict. ``record`` collects the sublayer outputs.
    """
    if config.mechanism not in MECHANISMS:
        raise ParameterError(f"unknown mechanism {config.mechanism!r}")
    pre_ln = config.norm_placement == "pre"

    def ffn(p, x):
        hidden = ad.gelu(project(x, p["w1"]) + p["b1"])
        return project(hidden, p["w2"]) + p["b2"]

    def block(h, params: dict, rng: np.random.Generator | None = None, record: dict | None = None):
        p = _layer_view(params, layer)
        attn = _attn_params(config, {k[5:]: v for k, v in p.items() if k.startswith("attn.")})
        rate = config.dropout if rng is not None else 0.0
        for sub in ("attn", "ffn"):
            g, b = (p["ln1_g"], p["ln1_b"]) if sub == "attn" else (p["ln2_g"], p["ln2_b"])
            x = ad.layer_norm(h, g, b) if pre_ln else h
            f = _attention(config, attn, x, record) if sub == "attn" else ffn(p, x)
            f = ad.dropout(f, rate, rng)
            if record is not None:
                record.setdefault("sublayers", []).append(value(f).copy())
            h = h + f if pre_ln else ad.layer_norm(h + f, g, b)
        return h

    return block


def lm_forward(params: dict, tokens: np.ndarray, config: LmConfig, rng: np.random.Generator | None = None,
               record: dict | None = None):
    """Logits ``(B, T, vocab)`` for integer tokens ``(B, T)``; dropout only when ``rng`` is given."""
    tokens = np.atleast_2d(np.asarray(tokens))
    T = tokens.shape[-1]
    if T > config.seq_len:
        raise ParameterError(f"sequence length {T} exceeds seq_len={config.seq_len}")
    h = ad.take_rows(params["tok_emb"], tokens) + ad.getitem(params["pos_emb"], slice(0, T))
    if record is not None:
        record["h0"] = value(h).copy()
    for layer in range(config.n_layers):
        h = build_block(config, layer)(h, params, rng, record)
    if record is not None:
        record["hL"] = value(h).copy()
    if config.norm_placement == "pre":
        h = ad.layer_norm(h, params["lnf_g"], params["lnf_b"])
    return project(h, params["tok_emb"] if config.weight_tying else params["head"])


def lm_loss(params: dict, tokens: np.ndarray, targets: np.ndarray, config: LmConfig,
            rng: np.random.Generator | None = None):
    logits = lm_forward(params, tokens, config, rng)
    V = config.vocab_size
    return ad.cross_entropy(ad.reshape(logits, (-1, V)), np.asarray(targets).reshape(-1))


@dataclass
class LanguageModel:
    config: LmConfig
    params: dict

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        return value(lm_forward(self.params, tokens, self.config))


def lm_diagnostics(model: LanguageModel, tokens: np.ndarray) -> list:
    """Per-layer boost diagnostics for a boosted model in evaluation mode."""
    if model.config.mechanism != "boosted":
        raise ParameterError("diagnostics need the boosted mechanism")
    record: dict = {}
    lm_forward(model.params, tokens, model.config, record=record)
    return record["diagnostics"]


def windows(ids: np.ndarray, seq_len: int, limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping (input, target) windows covering ``ids``."""
    n = (len(ids) - 1) // seq_len
    if limit is not None:
        n = min(n, limit)
    if n < 1:
        raise ParameterError(f"split of length {len(ids)} too short for seq_len={seq_len}")
    x = ids[:n * seq_len].reshape(n, seq_len)
    y = ids[1:n * seq_len + 1].reshape(n, seq_len)
    return x, y


def mean_nll(model, ids: np.ndarray, seq_len: int, batch: int = 64, limit: int | None = None) -> float:
    x, y = windows(ids, seq_len, limit)
    total = 0.0
    for s in range(0, len(x), batch):
        logits = np.asarray(model(x[s:s + batch]))
        logp = logits - logits.max(-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
        total += -np.take_along_axis(logp, y[s:s + batch, :, None], -1).sum()
    return total / y.size


def eval_ppl(model, ids: np.ndarray, seq_len: int | None = None, batch: int = 64,
             limit: int | None = None) -> float:
    """``exp`` of the mean next-token cross-entropy over non-overlapping windows."""
    seq_len = model.config.seq_len if seq_len is None else seq_len
    return float(np.exp(mean_nll(model, ids, seq_len, batch, limit)))


@dataclass
class TrainCurve:
    initial_loss: float
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)


def train_lm(corpus: Corpus, config: LmConfig, recipe: LmRecipe | None = None,
             seed: int = 0) -> tuple[LanguageModel, TrainCurve]:
    """AdamW on next-token cross-entropy with warmup, cosine decay and global-norm clipping."""
    recipe = recipe or LmRecipe()
    if config.vocab_size != corpus.vocab_size:
        config = replace(config, vocab_size=corpus.vocab_size)
    T = config.seq_len
    train = corpus.train
    if len(train) < T + 2:
        raise ParameterError("training split shorter than one window")
    params = init_lm_params(config, seed)
    state = ad.AdamState(lr=recipe.lr, beta1=recipe.beta1, beta2=recipe.beta2, eps=recipe.eps,
                         weight_decay=recipe.weight_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 102])))
    total = recipe.total_steps(len(train), T)
    per_epoch = total // recipe.epochs
    model = LanguageModel(config, params)
    curve = TrainCurve(initial_loss=mean_nll(model, corpus.val, T, limit=recipe.eval_windows))
    step = 0
    for _ in range(recipe.epochs):
        epoch_losses = []
        for _ in range(per_epoch):
            starts = rng.integers(0, len(train) - T, recipe.batch_size)
            x = np.stack([train[s:s + T] for s in starts])
            y = np.stack([train[s + 1:s + T + 1] for s in starts])
            tape = ad.Tape()
            bound = {k: tape.watch(v, name=k) for k, v in params.items()}
            loss = lm_loss(bound, x, y, config, rng if config.dropout > 0 else None)
            grads = tape.backward(loss).named()
            params = ad.adam_step(params, grads, state, clip=recipe.clip, lr=recipe.lr_at(step, total))
            epoch_losses.append(loss.item())
            step += 1
        model = LanguageModel(config, params)
        curve.step_loss.extend(epoch_losses)
        curve.train_loss.append(float(np.mean(epoch_losses)))
        curve.val_loss.append(mean_nll(model, corpus.val, T, limit=recipe.eval_windows))
    return model, curve


# ---------------------------------------------------------------------------
# normalization placement study


def study_cells(base: LmConfig) -> list[tuple[str, LmConfig]]:
    wide = width_matched_d_model(base)
    cells = []
    for placement in PLACEMENTS:
        cells.append((f"standard/{placement}", replace(base, mechanism="standard", norm_placement=placement)))
        cells.append((f"boosted/{placement}", replace(base, mechanism="boosted", norm_placement=placement)))
        cells.append((f"wide/{placement}", replace(base, mechanism="standard", norm_placement=placement,
                                                   d_model=wide)))
    return cells


def _study_trial(args) -> dict:
    corpus, name, config, recipe, seed = args
    model, curve = train_lm(corpus, config, recipe, seed)
    return {"condition": name, "seed": seed, "d_model": config.d_model,
            "params": count_params(model.params),
            "ppl": eval_ppl(model, corpus.test, limit=recipe.eval_windows),
            "initial_loss": curve.initial_loss, "final_val_loss": curve.val_loss[-1]}


def run_norm_placement_study(corpus: Corpus, seeds=(0, 1, 2), base: LmConfig | None = None,
                             recipe: LmRecipe | None = None, jobs: int = 1) -> ExperimentReport:
    """{standard, boosted, width-matched standard} x {Pre-LN, Post-LN}: test perplexity per seed."""
    from concurrent.futures import ProcessPoolExecutor

    base = replace(base or LmConfig(), vocab_size=corpus.vocab_size)
    recipe = recipe or LmRecipe()
    trials = [(corpus, name, cfg, recipe, seed) for seed in seeds for name, cfg in study_cells(base)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_study_trial, trials))
    else:
        rows = [_study_trial(t) for t in trials]
    report = ExperimentReport("norm_study", {"seeds": list(seeds), "base": asdict(base),
                                             "recipe": asdict(recipe)})
    for row in rows:
        report.add(**row)
    return report


def median_ppl(report: ExperimentReport, condition: str) -> float:
    return float(np.median(report.values("ppl", condition=condition)))
