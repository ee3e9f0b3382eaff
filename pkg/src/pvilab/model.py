"""Pre-norm DiT trunk for action-chunk velocity prediction.

Token layout per sample: 1 state token followed by `horizon` action tokens
(M = 1 + horizon). Conditioning tokens enter only through cross-attention
and carry no positional terms, so the trunk is order-insensitive in them.
All forward helpers are batch-first: activations are (B, tokens, hidden).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    concat,
    gelu,
    layernorm_lastdim,
    linear,
    matmul,
    mul,
    reshape,
    slice_axis,
    softmax_lastdim,
    transpose,
)
from .params import ParamStore


@dataclass(frozen=True)
class DiTConfig:
    n_blocks: int = 2
    hidden: int = 32
    heads: int = 4
    horizon: int = 8
    action_dim: int = 2
    state_dim: int = 4
    cond_len: int = 6
    cond_dim: int = 32
    aux_len: int = 0
    aux_raw_dim: int = 0

    def __post_init__(self):
        for field in ("n_blocks", "hidden", "heads", "horizon", "action_dim", "state_dim",
                      "cond_len", "cond_dim"):
            if getattr(self, field) < 1:
                raise ValueError(f"DiTConfig.{field} must be >= 1, got {getattr(self, field)}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.aux_len < 0 or self.aux_raw_dim < 0:
            raise ValueError("aux_len / aux_raw_dim must be >= 0")

    @property
    def token_count(self) -> int:
        return 1 + self.horizon


@dataclass
class ActionChunk:
    """A horizon x action_dim matrix in the normalized action space."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"action chunk must be rank 2, got shape {self.values.shape}")


@dataclass
class ConditioningBundle:
    """Single-sample conditioning: z_vl (cond_len, cond_dim), optional z_aux (aux_len, aux_raw_dim)."""

    z_vl: np.ndarray
    z_aux: np.ndarray | None = None


# ---------------------------------------------------------------- init

def init_linear_params(store: ParamStore, name: str, n_in: int, n_out: int, rng, dtype,
                       std: float = 0.02, bias: bool = True) -> None:
    w = rng.standard_normal((n_in, n_out)) * std
    store.add(f"{name}.w", Tensor(w.astype(dtype)))
    if bias:
        store.add(f"{name}.b", Tensor(np.zeros(n_out, dtype=dtype)))


def init_ln_params(store: ParamStore, name: str, dim: int, dtype) -> None:
    store.add(f"{name}.g", Tensor(np.ones(dim, dtype=dtype)))
    store.add(f"{name}.b", Tensor(np.zeros(dim, dtype=dtype)))


def init_block_params(store: ParamStore, prefix: str, cfg: DiTConfig, rng, dtype) -> None:
    d = cfg.hidden
    init_ln_params(store, f"{prefix}.ln1", d, dtype)
    for proj in ("wq", "wk", "wv", "wo"):
        init_linear_params(store, f"{prefix}.attn.{proj}", d, d, rng, dtype)
    init_ln_params(store, f"{prefix}.ln2", d, dtype)
    init_linear_params(store, f"{prefix}.xattn.wq", d, d, rng, dtype)
    init_linear_params(store, f"{prefix}.xattn.wk", cfg.cond_dim, d, rng, dtype)
    init_linear_params(store, f"{prefix}.xattn.wv", cfg.cond_dim, d, rng, dtype)
    init_linear_params(store, f"{prefix}.xattn.wo", d, d, rng, dtype)
    init_ln_params(store, f"{prefix}.ln3", d, dtype)
    init_linear_params(store, f"{prefix}.mlp.fc1", d, 4 * d, rng, dtype)
    init_linear_params(store, f"{prefix}.mlp.fc2", 4 * d, d, rng, dtype)


def block_param_names(prefix: str) -> list[str]:
    names = [f"{prefix}.ln1.g", f"{prefix}.ln1.b"]
    names += [f"{prefix}.attn.{p}.{s}" for p in ("wq", "wk", "wv", "wo") for s in ("w", "b")]
    names += [f"{prefix}.ln2.g", f"{prefix}.ln2.b"]
    names += [f"{prefix}.xattn.{p}.{s}" for p in ("wq", "wk", "wv", "wo") for s in ("w", "b")]
    names += [f"{prefix}.ln3.g", f"{prefix}.ln3.b"]
    names += [f"{prefix}.mlp.{p}.{s}" for p in ("fc1", "fc2") for s in ("w", "b")]
    return names


def init_trunk(cfg: DiTConfig, rng, dtype=np.float32) -> ParamStore:
    """Fresh main-pathway parameters plus embodiment adapters."""
    store = ParamStore()
    d = cfg.hidden
    init_linear_params(store, "adapters.state", cfg.state_dim, d, rng, dtype)
    init_linear_params(store, "adapters.action", cfg.action_dim, d, rng, dtype)
    init_linear_params(store, "adapters.head", d, cfg.action_dim, rng, dtype)
    init_linear_params(store, "main.time", d, d, rng, dtype)
    # zero-init so a fresh embedding stage is exactly adapters + time features
    store.add("main.pos", Tensor(np.zeros((cfg.token_count, d), dtype=dtype)))
    for i in range(cfg.n_blocks):
        init_block_params(store, f"main.block{i}", cfg, rng, dtype)
    init_ln_params(store, "main.ln_f", d, dtype)
    return store


# ---------------------------------------------------------------- forward

def sinusoid_features(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    """(B,) flow times in [0, 1] -> (B, dim) fixed sinusoidal features."""
    n_sin = (dim + 1) // 2
    omegas = np.exp(np.linspace(np.log(1.0), np.log(200.0), n_sin))
    phases = t[:, None] * omegas[None, :]
    feats = np.concatenate([np.sin(phases), np.cos(phases)], axis=1)[:, :dim]
    return feats.astype(dtype)


def ln_affine(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    normed = layernorm_lastdim(x)
    return add(mul(normed, store[f"{prefix}.g"]), store[f"{prefix}.b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    return transpose(reshape(x, (b, n, heads, dh)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, heads, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, heads * dh))


def attention(store: ParamStore, prefix: str, q_in: Tensor, kv_in: Tensor, heads: int,
              aux_ctx: Tensor | None = None, aux_prefix: str | None = None) -> Tensor:
    """Multi-head attention; optionally adds a second zero-init context term.

    The aux term reuses the main queries: softmax(q kz^T / sqrt(dh)) vz is
    added to the attention output before the output projection.
    """
    dh = q_in.shape[-1] // heads
    scale = 1.0 / float(np.sqrt(dh))
    q = _split_heads(linear(q_in, store[f"{prefix}.wq.w"], store[f"{prefix}.wq.b"]), heads)
    k = _split_heads(linear(kv_in, store[f"{prefix}.wk.w"], store[f"{prefix}.wk.b"]), heads)
    v = _split_heads(linear(kv_in, store[f"{prefix}.wv.w"], store[f"{prefix}.wv.b"]), heads)
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(np.asarray(scale, dtype=q.dtype)))
    out = matmul(softmax_lastdim(logits), v)
    if aux_ctx is not None:
        kz = _split_heads(linear(aux_ctx, store[f"{aux_prefix}.kz.w"], store[f"{aux_prefix}.kz.b"]), heads)
        vz = _split_heads(linear(aux_ctx, store[f"{aux_prefix}.vz.w"], store[f"{aux_prefix}.vz.b"]), heads)
        aux_logits = mul(matmul(q, transpose(kz, (0, 1, 3, 2))), Tensor(np.asarray(scale, dtype=q.dtype)))
        out = add(out, matmul(softmax_lastdim(aux_logits), vz))
    return linear(_merge_heads(out), store[f"{prefix}.wo.w"], store[f"{prefix}.wo.b"])


def dit_block(store: ParamStore, prefix: str, h: Tensor, cond: Tensor, heads: int,
              aux_ctx: Tensor | None = None, aux_prefix: str | None = None) -> Tensor:
    """Pre-norm residual block: self-attn, cross-attn over cond, MLP."""
    if cond.shape[-1] != store[f"{prefix}.xattn.wk.w"].shape[0]:
        raise ShapeError(
            f"cond width {cond.shape[-1]} does not match cross-attention input width "
            f"{store[f'{prefix}.xattn.wk.w'].shape[0]}"
        )
    n1 = ln_affine(store, f"{prefix}.ln1", h)
    h = add(h, attention(store, f"{prefix}.attn", n1, n1, heads))
    n2 = ln_affine(store, f"{prefix}.ln2", h)
    h = add(h, attention(store, f"{prefix}.xattn", n2, cond, heads,
                         aux_ctx=aux_ctx, aux_prefix=aux_prefix))
    n3 = ln_affine(store, f"{prefix}.ln3", h)
    mid = gelu(linear(n3, store[f"{prefix}.mlp.fc1.w"], store[f"{prefix}.mlp.fc1.b"]))
    return add(h, linear(mid, store[f"{prefix}.mlp.fc2.w"], store[f"{prefix}.mlp.fc2.b"]))


def embed_tokens_batch(cfg: DiTConfig, store: ParamStore, states: np.ndarray,
                       actions: np.ndarray, t: np.ndarray) -> Tensor:
    """(B, state_dim), (B, H, A), (B,) -> h0 (B, M, hidden)."""
    states = np.asarray(states)
    actions = np.asarray(actions)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if states.ndim != 2 or states.shape[1] != cfg.state_dim:
        raise ShapeError(f"states must be (B, {cfg.state_dim}), got {states.shape}")
    if actions.shape != (states.shape[0], cfg.horizon, cfg.action_dim):
        raise ShapeError(
            f"actions must be ({states.shape[0]}, {cfg.horizon}, {cfg.action_dim}), got {actions.shape}"
        )
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    dtype = store["adapters.state.w"].dtype
    b = states.shape[0]
    s_tok = linear(Tensor(states.astype(dtype)), store["adapters.state.w"], store["adapters.state.b"])
    s_tok = reshape(s_tok, (b, 1, cfg.hidden))
    a_tok = linear(Tensor(actions.astype(dtype)), store["adapters.action.w"], store["adapters.action.b"])
    h = concat([s_tok, a_tok], axis=1)
    tfeat = Tensor(sinusoid_features(t, cfg.hidden, dtype))
    temb = linear(tfeat, store["main.time.w"], store["main.time.b"])
    h = add(h, reshape(temb, (b, 1, cfg.hidden)))
    return add(h, store["main.pos"])


def embed_tokens(cfg: DiTConfig, store: ParamStore, state: np.ndarray,
                 a_t: np.ndarray, t: float) -> Tensor:
    """Single-sample embedding: returns (M, hidden)."""
    h = embed_tokens_batch(cfg, store, np.asarray(state)[None, :], np.asarray(a_t)[None, :, :],
                           np.asarray([t]))
    return reshape(h, (cfg.token_count, cfg.hidden))


def velocity_head(cfg: DiTConfig, store: ParamStore, h: Tensor) -> Tensor:
    """Final norm, drop the state token, project each action token to action_dim."""
    normed = ln_affine(store, "main.ln_f", h)
    act = slice_axis(normed, 1, 1, cfg.token_count)
    return linear(act, store["adapters.head.w"], store["adapters.head.b"])
