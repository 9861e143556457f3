"""Minimal decoder-only byte-level LM with a hand-written training loop.

Pre-norm transformer: learned token and position embeddings, multi-head
causal self-attention, GELU MLP, untied output head. The forward and
backward passes are written out explicitly (no autodiff framework) so the
analytic gradients can be checked against central finite differences, and
so full training runs are bit-deterministic given a seed.

All arithmetic follows the parameter storage dtype (f32 or f64). Text is
tokenized at the byte level, so the default vocabulary of 256 covers any
UTF-8 input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import CongruenceError, ConfigError, TrainingDivergenceError, ValidationError
from .tensor_store import (
    DTYPES,
    NamedTensor,
    ParameterSet,
    load_checkpoint_with_meta,
    save_checkpoint,
)

LN_EPS = 1e-5
INIT_SCALE = 0.02

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    ctx_len: int = 128
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "ctx_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.ctx_len < 2:
            raise ConfigError("ctx_len must be at least 2")
        if self.dtype not in DTYPES:
            raise ConfigError(f"model.dtype must be one of {sorted(DTYPES)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 3e-3
    total_steps: int = 2000
    warmup_fraction: float = 0.10
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError("train.peak_lr must be positive")
        if self.total_steps <= 0:
            raise ConfigError("train.total_steps must be positive")
        if not 0 < self.warmup_fraction <= 1:
            raise ConfigError("train.warmup_fraction must be in (0, 1]")
        if self.batch_size <= 0:
            raise ConfigError("train.batch_size must be positive")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("train.grad_clip_norm must be positive or unset")
        if round(self.warmup_fraction * self.total_steps) < 1:
            raise ConfigError(
                "warmup_fraction * total_steps rounds to zero warmup steps"
            )

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_fraction * self.total_steps)


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank additive reparameterization of one frozen weight matrix.

    The adapted weight is W0 + a @ b where W0 (d x d') stays frozen,
    a is d x r and b is r x d'.
    """

    target_name: str
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.a)
        b = np.ascontiguousarray(self.b)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValidationError(
                f"adapter for {self.target_name!r}: a {a.shape} and b {b.shape} "
                "do not form a low-rank product"
            )
        if self.rank_of(a, b) > min(a.shape[0], b.shape[1]):
            raise ValidationError(
                f"adapter for {self.target_name!r}: rank {a.shape[1]} exceeds "
                f"min{(a.shape[0], b.shape[1])}"
            )
        for arr in (a, b):
            if arr.flags.writeable:
                arr.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @staticmethod
    def rank_of(a, b) -> int:
        return a.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def delta(self) -> np.ndarray:
        return self.a @ self.b


@dataclass
class ToyLmModel:
    """Model = config + parameters, plus optional low-rank adapters."""

    cfg: ModelConfig
    params: ParameterSet
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def with_params(self, params: ParameterSet) -> "ToyLmModel":
        return ToyLmModel(self.cfg, params, self.adapters)

    def with_adapters(self, adapters: dict[str, LoraAdapter]) -> "ToyLmModel":
        return ToyLmModel(self.cfg, self.params, dict(adapters))

    @property
    def ctx_len(self) -> int:
        return self.cfg.ctx_len

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def num_params(self) -> int:
        return self.params.num_scalars()

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, tokens: Iterable[int]) -> str:
        return bytes(int(t) & 0xFF for t in tokens).decode("utf-8", errors="replace")

    def logprob_rows(self, tokens: Sequence[int]) -> np.ndarray:
        return forward_logprobs(self, tokens)

    def next_token_logprobs_batch(self, sequences: Sequence[Sequence[int]]):
        return next_token_logprobs_batch(self, sequences)


@dataclass
class TrainState:
    """Single-owner training state; advanced only through train_step."""

    model: ToyLmModel
    adam_m: ParameterSet
    adam_v: ParameterSet
    step: int
    seed: int

    def __post_init__(self):
        trainable = trainable_parameter_set(self.model)
        trainable.check_congruent(self.adam_m)
        trainable.check_congruent(self.adam_v)
        if self.step < 0:
            raise ValidationError("step must be non-negative")


# ---------------------------------------------------------------------------
# Parameter layout and initialization
# ---------------------------------------------------------------------------

def _param_layout(cfg: ModelConfig) -> list[tuple[str, tuple, str, int]]:
    """(name, shape, kind, layer) in canonical order. kind drives the init."""
    d, f, v, c = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.ctx_len
    layout = [
        ("tok_emb", (v, d), "matrix", 0),
        ("pos_emb", (c, d), "matrix", 0),
    ]
    for i in range(1, cfg.n_layers + 1):
        p = f"block{i}"
        layout += [
            (f"{p}.ln1.g", (d,), "ln_gain", i),
            (f"{p}.ln1.b", (d,), "bias", i),
            (f"{p}.attn.wq", (d, d), "matrix", i),
            (f"{p}.attn.bq", (d,), "bias", i),
            (f"{p}.attn.wk", (d, d), "matrix", i),
            (f"{p}.attn.bk", (d,), "bias", i),
            (f"{p}.attn.wv", (d, d), "matrix", i),
            (f"{p}.attn.bv", (d,), "bias", i),
            (f"{p}.attn.wo", (d, d), "matrix", i),
            (f"{p}.attn.bo", (d,), "bias", i),
            (f"{p}.ln2.g", (d,), "ln_gain", i),
            (f"{p}.ln2.b", (d,), "bias", i),
            (f"{p}.mlp.w1", (d, f), "matrix", i),
            (f"{p}.mlp.b1", (f,), "bias", i),
            (f"{p}.mlp.w2", (f, d), "matrix", i),
            (f"{p}.mlp.b2", (d,), "bias", i),
        ]
    head_layer = cfg.n_layers + 1
    layout += [
        ("ln_f.g", (d,), "ln_gain", head_layer),
        ("ln_f.b", (d,), "bias", head_layer),
        ("head.w", (d, v), "matrix", head_layer),
        ("head.b", (v,), "bias", head_layer),
    ]
    return layout


def expected_param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _, _ in _param_layout(cfg))


def init_model(cfg: ModelConfig) -> ToyLmModel:
    """Deterministic init: N(0, 0.02) matrices, unit LN gains, zero biases."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    dt = cfg.np_dtype()
    tensors, layer_index = [], {}
    for name, shape, kind, layer in _param_layout(cfg):
        if kind == "matrix":
            arr = rng.normal(0.0, INIT_SCALE, size=shape).astype(dt)
        elif kind == "ln_gain":
            arr = np.ones(shape, dtype=dt)
        else:
            arr = np.zeros(shape, dtype=dt)
        tensors.append(NamedTensor(name, arr))
        layer_index[name] = layer
    return ToyLmModel(cfg, ParameterSet(tensors, layer_index))


def default_lora_targets(cfg: ModelConfig) -> list[str]:
    """All per-block projection matrices; embeddings and head excluded."""
    targets = []
    for i in range(1, cfg.n_layers + 1):
        targets += [f"block{i}.attn.{w}" for w in ("wq", "wk", "wv", "wo")]
        targets += [f"block{i}.mlp.{w}" for w in ("w1", "w2")]
    return targets


def init_adapters(
    model: ToyLmModel,
    rank: int,
    targets: Optional[Sequence[str]] = None,
    seed: int = 0,
) -> ToyLmModel:
    """Attach fresh adapters: a ~ N(0, 0.02), b = 0, so W is initially W0."""
    if rank <= 0:
        raise ConfigError("lora.rank must be positive")
    targets = list(targets) if targets is not None else default_lora_targets(model.cfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dt = model.cfg.np_dtype()
    adapters = {}
    for name in targets:
        if name not in model.params:
            raise ConfigError(f"lora target {name!r} is not a model tensor")
        w = model.params[name]
        if w.ndim != 2:
            raise ConfigError(f"lora target {name!r} is not a weight matrix")
        if rank > min(w.shape):
            raise ConfigError(
                f"lora rank {rank} exceeds min dim of {name!r} {w.shape}"
            )
        a = rng.normal(0.0, INIT_SCALE, size=(w.shape[0], rank)).astype(dt)
        b = np.zeros((rank, w.shape[1]), dtype=dt)
        adapters[name] = LoraAdapter(name, a, b)
    return model.with_adapters(adapters)


def trainable_parameter_set(model: ToyLmModel) -> ParameterSet:
    """Adapter tensors when adapters are active, the full set otherwise."""
    if not model.adapters:
        return model.params
    tensors, layer_index = [], {}
    for name, ad in model.adapters.items():
        layer = model.params.layer_index[name]
        for suffix, arr in (("lora_a", ad.a), ("lora_b", ad.b)):
            t = NamedTensor(f"{name}.{suffix}", arr)
            tensors.append(t)
            layer_index[t.name] = layer
    return ParameterSet(tensors, layer_index)


def merge_lora(w0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Return w0 + a @ b; w0 itself is never touched."""
    if w0.ndim != 2 or adapter.a.shape[0] != w0.shape[0] or adapter.b.shape[1] != w0.shape[1]:
        raise CongruenceError(
            f"adapter {adapter.target_name!r} {adapter.a.shape}x{adapter.b.shape} "
            f"does not conform to weight {w0.shape}"
        )
    return w0 + (adapter.a @ adapter.b).astype(w0.dtype)


def merged_params(model: ToyLmModel) -> ParameterSet:
    """Base parameters with all adapter products folded in."""
    updates = {
        name: merge_lora(model.params[name], ad) for name, ad in model.adapters.items()
    }
    return model.params.replace(updates)


def lora_shift(model: ToyLmModel) -> dict[int, float]:
    """Per-layer L2 norms of the adapter products a @ b.

    Layers without adapters report 0, matching
    l2_distance_per_layer(merged_params(model), model.params).
    """
    out = {layer: 0.0 for layer in model.params.layer_ids()}
    sumsq: dict[int, float] = {}
    for name, ad in model.adapters.items():
        delta = ad.delta().astype(np.float64)
        layer = model.params.layer_index[name]
        sumsq[layer] = sumsq.get(layer, 0.0) + float(np.dot(delta.ravel(), delta.ravel()))
    for layer, s in sumsq.items():
        out[layer] = float(np.sqrt(s))
    return out


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _gelu(u: np.ndarray):
    t = np.tanh(_GELU_K * (u + _GELU_A * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(dy: np.ndarray, u: np.ndarray, t: np.ndarray) -> np.ndarray:
    inner = _GELU_K * (1.0 + 3.0 * _GELU_A * u * u)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * inner)


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, xhat, inv, g):
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


def _effective_weights(model: ToyLmModel) -> dict[str, np.ndarray]:
    w = {name: arr for name, arr in model.params.items()}
    for name, ad in model.adapters.items():
        w[name] = merge_lora(model.params[name], ad)
    return w


def _validate_tokens(model: ToyLmModel, tokens: np.ndarray) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size):
        raise ValueError(
            f"token id out of range for vocab size {model.cfg.vocab_size}"
        )


def _forward_hidden(model: ToyLmModel, tokens: np.ndarray, want_cache: bool):
    """Run the trunk on a (B, T) token batch; returns final-LN output.

    T may be anything up to ctx_len; the cache holds every intermediate the
    backward pass needs.
    """
    cfg = model.cfg
    w = _effective_weights(model)
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)

    x = w["tok_emb"][tokens] + w["pos_emb"][:T]
    mask = np.triu(np.full((T, T), -np.inf, dtype=x.dtype), k=1)

    cache = {"tokens": tokens, "weights": w, "blocks": []} if want_cache else None
    for i in range(1, cfg.n_layers + 1):
        p = f"block{i}"
        x_in = x
        h1, ln1 = _layer_norm(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
        q = h1 @ w[f"{p}.attn.wq"] + w[f"{p}.attn.bq"]
        k = h1 @ w[f"{p}.attn.wk"] + w[f"{p}.attn.bk"]
        v = h1 @ w[f"{p}.attn.wv"] + w[f"{p}.attn.bv"]
        # (B, T, D) -> (B, H, T, dh)
        q = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale + mask
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = np.matmul(probs, v)  # (B, H, T, dh)
        ctx_m = ctx.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        attn_out = ctx_m @ w[f"{p}.attn.wo"] + w[f"{p}.attn.bo"]
        x_mid = x_in + attn_out

        h2, ln2 = _layer_norm(x_mid, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
        u = h2 @ w[f"{p}.mlp.w1"] + w[f"{p}.mlp.b1"]
        act, tanh_c = _gelu(u)
        mlp_out = act @ w[f"{p}.mlp.w2"] + w[f"{p}.mlp.b2"]
        x = x_mid + mlp_out

        if want_cache:
            cache["blocks"].append(
                {
                    "ln1": ln1, "h1": h1, "q": q, "k": k, "v": v,
                    "probs": probs, "ctx_m": ctx_m,
                    "x_mid": x_mid, "ln2": ln2, "h2": h2,
                    "u": u, "tanh": tanh_c, "act": act,
                }
            )

    hidden, ln_f = _layer_norm(x, w["ln_f.g"], w["ln_f.b"])
    if want_cache:
        cache["ln_f"] = ln_f
        cache["hidden"] = hidden
    return hidden, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward_logprobs(model: ToyLmModel, tokens: Sequence[int]) -> np.ndarray:
    """Per-position next-token log-probability rows for one sequence.

    Row t is the log-distribution over the vocabulary conditioned on tokens
    0..t (causal); each row exponentiates to a distribution summing to 1.
    """
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if arr.size > model.cfg.ctx_len:
        raise ValueError(
            f"sequence length {arr.size} exceeds ctx_len {model.cfg.ctx_len}"
        )
    _validate_tokens(model, arr)
    w = _effective_weights(model)
    hidden, _ = _forward_hidden(model, arr[None, :], want_cache=False)
    logits = hidden[0] @ w["head.w"] + w["head.b"]
    return _log_softmax(logits)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def _as_blocks(model: ToyLmModel, batch) -> np.ndarray:
    arr = np.asarray(batch, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("batch must contain at least one block")
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("batch must be a (B, T) array of token blocks")
    if arr.shape[1] < 2:
        raise ValueError("blocks must contain at least 2 tokens")
    if arr.shape[1] > model.cfg.ctx_len:
        raise ValueError(
            f"block length {arr.shape[1]} exceeds ctx_len {model.cfg.ctx_len}"
        )
    _validate_tokens(model, arr)
    return arr


def loss_and_grads(model: ToyLmModel, batch) -> tuple[float, ParameterSet]:
    """Mean next-token cross-entropy (nats) and its gradient.

    The gradient set is congruent with the trainable parameters: the full
    set normally, only the adapter factors when adapters are active.
    """
    cfg = model.cfg
    tokens = _as_blocks(model, batch)
    B, T = tokens.shape
    n_pos = B * (T - 1)
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)

    hidden, cache = _forward_hidden(model, tokens, want_cache=True)
    w = cache["weights"]
    logits = hidden @ w["head.w"] + w["head.b"]
    logprobs = _log_softmax(logits)

    targets = tokens[:, 1:]
    rows = np.arange(B)[:, None], np.arange(T - 1)[None, :]
    loss = float(-logprobs[:, :-1, :][rows + (targets,)].mean(dtype=np.float64))

    # d loss / d logits, zero at the final (unpredicted) position
    dlogits = np.exp(logprobs)
    dlogits[rows + (targets,)] -= 1.0
    dlogits[:, -1, :] = 0.0
    dlogits /= n_pos

    grads: dict[str, np.ndarray] = {}
    full_mode = not model.adapters

    def emit_linear(name_w, name_b, x, dy):
        """Gradient of y = x @ W + b; returns dx. Respects LoRA targets."""
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        if full_mode:
            grads[name_w] = x2.T @ dy2
            grads[name_b] = dy2.sum(axis=0)
        else:
            ad = model.adapters.get(name_w)
            if ad is not None:
                dw = x2.T @ dy2
                grads[f"{name_w}.lora_a"] = dw @ ad.b.T
                grads[f"{name_w}.lora_b"] = ad.a.T @ dw
        return (dy2 @ w[name_w].T).reshape(x.shape)

    def emit(name, value):
        if full_mode:
            grads[name] = value

    # head
    dhidden = emit_linear("head.w", "head.b", hidden, dlogits)

    xhat_f, inv_f = cache["ln_f"]
    dx, dg, db = _layer_norm_backward(dhidden, xhat_f, inv_f, w["ln_f.g"])
    emit("ln_f.g", dg)
    emit("ln_f.b", db)

    for i in range(cfg.n_layers, 0, -1):
        p = f"block{i}"
        c = cache["blocks"][i - 1]

        # MLP branch
        dmlp = dx
        dact = emit_linear(f"{p}.mlp.w2", f"{p}.mlp.b2", c["act"], dmlp)
        du = _gelu_backward(dact, c["u"], c["tanh"])
        dh2 = emit_linear(f"{p}.mlp.w1", f"{p}.mlp.b1", c["h2"], du)
        xhat2, inv2 = c["ln2"]
        dx_mid, dg2, db2 = _layer_norm_backward(dh2, xhat2, inv2, w[f"{p}.ln2.g"])
        emit(f"{p}.ln2.g", dg2)
        emit(f"{p}.ln2.b", db2)
        dx_mid = dx_mid + dx  # residual

        # attention branch
        dctx_m = emit_linear(f"{p}.attn.wo", f"{p}.attn.bo", c["ctx_m"], dx_mid)
        dctx = dctx_m.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        probs, q, k, v = c["probs"], c["q"], c["k"], c["v"]
        dprobs = np.matmul(dctx, v.transpose(0, 1, 3, 2))
        dv = np.matmul(probs.transpose(0, 1, 3, 2), dctx)
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dq = np.matmul(dscores, k) * scale
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), q) * scale

        def merge_heads(t4):
            return t4.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)

        h1 = c["h1"]
        dh1 = emit_linear(f"{p}.attn.wq", f"{p}.attn.bq", h1, merge_heads(dq))
        dh1 = dh1 + emit_linear(f"{p}.attn.wk", f"{p}.attn.bk", h1, merge_heads(dk))
        dh1 = dh1 + emit_linear(f"{p}.attn.wv", f"{p}.attn.bv", h1, merge_heads(dv))
        xhat1, inv1 = c["ln1"]
        dx_in, dg1, db1 = _layer_norm_backward(dh1, xhat1, inv1, w[f"{p}.ln1.g"])
        emit(f"{p}.ln1.g", dg1)
        emit(f"{p}.ln1.b", db1)
        dx = dx_in + dx_mid  # residual into the block input

    if full_mode:
        dtok = np.zeros_like(w["tok_emb"])
        np.add.at(dtok, tokens, dx)
        grads["tok_emb"] = dtok
        dpos = np.zeros_like(w["pos_emb"])
        dpos[:T] = dx.sum(axis=0)
        grads["pos_emb"] = dpos

    trainable = trainable_parameter_set(model)
    dt = cfg.np_dtype()
    grad_set = ParameterSet(
        [NamedTensor(name, np.ascontiguousarray(grads[name], dtype=dt)) for name in trainable.names],
        trainable.layer_index,
    )
    return loss, grad_set


# ---------------------------------------------------------------------------
# LR schedule and optimizer step
# ---------------------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to zero."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step <= w:
        return cfg.peak_lr * step / w
    progress = (step - w) / (cfg.total_steps - w)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def init_train_state(model: ToyLmModel, cfg: TrainConfig) -> TrainState:
    trainable = trainable_parameter_set(model)
    return TrainState(model, trainable.zeros_like(), trainable.zeros_like(), 0, cfg.seed)


def global_grad_norm(grads: ParameterSet) -> float:
    total = 0.0
    for t in grads:
        a = t.array.astype(np.float64).ravel()
        total += float(np.dot(a, a))
    return math.sqrt(total)


def train_step(state: TrainState, batch, cfg: TrainConfig) -> TrainState:
    """One AdamW step with the cosine schedule; returns the successor state.

    Optional global-norm gradient clipping is applied before the update.
    Weight decay is decoupled and uniform across trainable tensors.
    """
    model = state.model
    loss, grads = loss_and_grads(model, batch)
    if not math.isfinite(loss):
        raise TrainingDivergenceError("non-finite training loss", state.step)
    for t in grads:
        if not np.all(np.isfinite(t.array)):
            raise TrainingDivergenceError(
                f"non-finite gradient for {t.name!r}", state.step
            )

    clip_scale = 1.0
    if cfg.grad_clip_norm is not None:
        norm = global_grad_norm(grads)
        if norm > cfg.grad_clip_norm:
            clip_scale = cfg.grad_clip_norm / norm

    t_idx = state.step + 1
    lr = lr_at(t_idx, cfg)
    b1, b2, eps, wd = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay
    bc1 = 1.0 - b1**t_idx
    bc2 = 1.0 - b2**t_idx

    trainable = trainable_parameter_set(model)
    new_m, new_v, new_params = {}, {}, {}
    for tensor in trainable:
        name = tensor.name
        g = grads[name] * clip_scale
        m = b1 * state.adam_m[name] + (1.0 - b1) * g
        v = b2 * state.adam_v[name] + (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        theta = tensor.array - lr * update - lr * wd * tensor.array
        new_m[name], new_v[name], new_params[name] = m, v, theta

    if model.adapters:
        adapters = {}
        for target, ad in model.adapters.items():
            adapters[target] = LoraAdapter(
                target, new_params[f"{target}.lora_a"], new_params[f"{target}.lora_b"]
            )
        new_model = model.with_adapters(adapters)
    else:
        new_model = model.with_params(model.params.replace(new_params))

    return TrainState(
        new_model,
        state.adam_m.replace(new_m),
        state.adam_v.replace(new_v),
        state.step + 1,
        state.seed,
    )


# ---------------------------------------------------------------------------
# Generation and batched scoring
# ---------------------------------------------------------------------------

def generate_greedy(
    model: ToyLmModel,
    prompt: Sequence[int],
    max_new: int,
    stop: Optional[set[int]] = None,
) -> list[int]:
    """Append argmax tokens (ties -> lowest id) until a stop token or max_new."""
    return generate_greedy_batch(model, [prompt], max_new, stop)[0]


def generate_greedy_batch(
    model: ToyLmModel,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    stop: Optional[set[int]] = None,
) -> list[list[int]]:
    """Batched greedy decoding over prompts of unequal length.

    Sequences are right-padded; thanks to the causal mask the row at each
    sequence's own last position is unaffected by padding, so results are
    identical to decoding one prompt at a time.
    """
    cfg = model.cfg
    stop = stop or set()
    seqs = [list(int(t) for t in p) for p in prompts]
    for s in seqs:
        if not s:
            raise ValueError("prompt must be non-empty")
        if len(s) > cfg.ctx_len - 1:
            raise ValueError(
                f"prompt length {len(s)} exceeds ctx_len - 1 = {cfg.ctx_len - 1}"
            )
        _validate_tokens(model, np.asarray(s, dtype=np.int64))
    if max_new < 0:
        raise ValueError("max_new must be non-negative")

    w = _effective_weights(model)
    done = [False] * len(seqs)
    for _ in range(max_new):
        active = [i for i, d in enumerate(done) if not d]
        if not active:
            break
        windows = [seqs[i][-cfg.ctx_len:] for i in active]
        lens = np.array([len(win) for win in windows])
        t_max = int(lens.max())
        batch = np.zeros((len(active), t_max), dtype=np.int64)
        for r, win in enumerate(windows):
            batch[r, : len(win)] = win
        hidden, _ = _forward_hidden(model, batch, want_cache=False)
        rows = hidden[np.arange(len(active)), lens - 1]
        logits = rows @ w["head.w"] + w["head.b"]
        nxt = np.argmax(logits, axis=1)  # first max = lowest token id on ties
        for r, i in enumerate(active):
            tok = int(nxt[r])
            seqs[i].append(tok)
            if tok in stop:
                done[i] = True
    return seqs


def next_token_logprobs_batch(
    model: ToyLmModel,
    sequences: Sequence[Sequence[int]],
    chunk: int = 64,
) -> list[np.ndarray]:
    """Per-position log-prob of each realized next token, batched.

    For a sequence of length T returns an array of length T - 1 where entry
    t is log p(seq[t+1] | seq[:t+1]). Sequences are processed in right-padded
    chunks; results match forward_logprobs row gathers exactly.
    """
    cfg = model.cfg
    w = _effective_weights(model)
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    for s in seqs:
        if s.ndim != 1 or s.size < 2:
            raise ValueError("each sequence needs at least 2 tokens")
        if s.size > cfg.ctx_len:
            raise ValueError(f"sequence length {s.size} exceeds ctx_len {cfg.ctx_len}")
        _validate_tokens(model, s)

    out: list[np.ndarray] = [None] * len(seqs)  # type: ignore[list-item]
    for lo in range(0, len(seqs), chunk):
        part = seqs[lo : lo + chunk]
        t_max = max(s.size for s in part)
        batch = np.zeros((len(part), t_max), dtype=np.int64)
        for r, s in enumerate(part):
            batch[r, : s.size] = s
        hidden, _ = _forward_hidden(model, batch, want_cache=False)
        logits = hidden @ w["head.w"] + w["head.b"]
        # same operation order as _log_softmax so gathers agree bit-for-bit
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        for r, s in enumerate(part):
            pos = np.arange(s.size - 1)
            out[lo + r] = (z[r, pos, s[1:]] - lse[r, pos]).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------

def save_model(model: ToyLmModel, path) -> None:
    """Checkpoint base parameters (plus adapter factors) with config metadata."""
    tensors = list(model.params)
    layer_index = dict(model.params.layer_index)
    lora_meta = None
    if model.adapters:
        trainable = trainable_parameter_set(model)
        tensors += list(trainable)
        layer_index.update(trainable.layer_index)
        lora_meta = {
            "targets": list(model.adapters),
            "rank": next(iter(model.adapters.values())).rank,
        }
    meta = {"kind": "toy_lm", "model_config": _cfg_to_dict(model.cfg), "lora": lora_meta}
    save_checkpoint(ParameterSet(tensors, layer_index), path, meta=meta)


def load_model(path) -> ToyLmModel:
    ps, meta = load_checkpoint_with_meta(path)
    if "model_config" not in meta:
        raise ValidationError(f"{path!r} is not a model checkpoint (no model_config)")
    cfg = ModelConfig(**meta["model_config"])
    lora_meta = meta.get("lora")
    targets = lora_meta["targets"] if lora_meta else []
    base = ParameterSet(
        [ps.tensor(n) for n in ps.names if not n.endswith((".lora_a", ".lora_b"))],
        {n: ps.layer_index[n] for n in ps.names if not n.endswith((".lora_a", ".lora_b"))},
    )
    adapters = {
        t: LoraAdapter(t, ps[f"{t}.lora_a"], ps[f"{t}.lora_b"]) for t in targets
    }
    return ToyLmModel(cfg, base, adapters)


def _cfg_to_dict(cfg: ModelConfig) -> dict:
    return {
        "vocab_size": cfg.vocab_size,
        "d_model": cfg.d_model,
        "n_layers": cfg.n_layers,
        "n_heads": cfg.n_heads,
        "d_ff": cfg.d_ff,
        "ctx_len": cfg.ctx_len,
        "seed": cfg.seed,
        "dtype": cfg.dtype,
    }


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_tokens(tokens: Iterable[int]) -> str:
    return bytes(int(t) & 0xFF for t in tokens).decode("utf-8", errors="replace")
