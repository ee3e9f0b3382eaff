"""Conditioning variants for plugging auxiliary visual features into the trunk.

Six variants share one base trunk. Four of them (PVI, ControlNetStyle,
ReferenceNetStyle, ControlVLAStyle) enter through zero-initialized maps and
are exactly output-equivalent to Baseline at construction; Concat is not,
because extra context tokens shift softmax normalization even when their
projected content is zero.

Variant        trainable set                                   main DiT
-------        -------------                                   --------
Baseline       main DiT, adapters                              trained
PVI            W_proj, copy blocks, per-block Z_i, adapters    frozen
Concat         main DiT, aux projector, adapters               trained
ControlNet...  branch, projector, injections, adapters         frozen
ReferenceNet.. main DiT, branch, projector, fusions, adapters  trained
ControlVLA...  main DiT, K_z/V_z, aux projector, adapters      trained

Encoders are frozen everywhere and own no entries in the policy store.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, add, concat, linear, matmul, no_grad, reshape, tmean
from .params import ParamStore
from .model import (
    DiTConfig,
    ConditioningBundle,
    dit_block,
    embed_tokens_batch,
    init_block_params,
    init_trunk,
    block_param_names,
    velocity_head,
)

VARIANTS = ("Baseline", "PVI", "Concat", "ControlNetStyle", "ReferenceNetStyle", "ControlVLAStyle")

# store-name prefix for each variant's own parameters
_GROUP = {
    "PVI": "pvi",
    "Concat": "concat",
    "ControlNetStyle": "ctrl",
    "ReferenceNetStyle": "ref",
    "ControlVLAStyle": "cvla",
}

# variants whose branch mirrors the main blocks
_COPIED_BRANCH = {"PVI": "copy", "ControlNetStyle": "ctrl", "ReferenceNetStyle": "ref"}


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


def needs_aux(variant: str) -> bool:
    return check_variant(variant) != "Baseline"


def projector_width(cfg: DiTConfig, variant: str) -> int:
    """PVI/Concat/ControlVLA project into the cross-attention space; the
    copied-branch entry points (ControlNet/ReferenceNet) project into the
    hidden space."""
    if variant in ("PVI", "Concat", "ControlVLAStyle"):
        return cfg.cond_dim
    return cfg.hidden


def freeze_plan(variant: str, names, freeze_projector: bool = False) -> frozenset:
    """The exact set of trainable parameter names for a variant.

    Encoder parameters never appear here: encoders live outside the store.
    """
    check_variant(variant)
    prefixes = {
        "Baseline": ("main.", "adapters."),
        "PVI": ("pvi.", "copy.", "adapters."),
        "Concat": ("main.", "concat.", "adapters."),
        "ControlNetStyle": ("ctrl.", "adapters."),
        "ReferenceNetStyle": ("main.", "ref.", "adapters."),
        "ControlVLAStyle": ("main.", "cvla.", "adapters."),
    }[variant]
    plan = {n for n in names if any(n.startswith(p) for p in prefixes)}
    if freeze_projector:
        plan = {n for n in plan if not n.endswith(".wproj")}
    return frozenset(plan)


def param_group(name: str) -> str:
    """Reporting group for a store entry."""
    if name.startswith("main."):
        return "main_dit"
    if name.startswith("adapters."):
        return "adapters"
    return "plugin_branch"


def _zero_or_small(shape, rng, dtype, zero_init: bool, std: float = 0.02) -> np.ndarray:
    if zero_init:
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * std).astype(dtype)


class PolicyModel:
    """A trunk plus one variant's extra parameters and its freeze plan."""

    def __init__(self, cfg: DiTConfig, store: ParamStore, variant: str,
                 zero_init: bool = True, freeze_projector: bool = False):
        self.cfg = cfg
        self.store = store
        self.variant = check_variant(variant)
        self.zero_init = zero_init
        self.freeze_projector = freeze_projector
        self.plan = freeze_plan(variant, store.names(), freeze_projector)
        for name in store.names():
            store.set_trainable(name, name in self.plan)

    @property
    def dtype(self):
        return self.store["adapters.state.w"].dtype

    def frozen_hash(self) -> str:
        return self.store.state_hash(self.store.frozen_names())

    def velocity_batch(self, states: np.ndarray, actions: np.ndarray, t: np.ndarray,
                       z_vl: np.ndarray, z_aux: np.ndarray | None = None) -> Tensor:
        """(B, state_dim), (B, H, A), (B,), (B, S, cond_dim)[, (B, L, d_E)] -> (B, H, A)."""
        z_vl = np.asarray(z_vl)
        if z_vl.ndim != 3 or z_vl.shape[-1] != self.cfg.cond_dim:
            raise ShapeError(f"z_vl must be (B, S, {self.cfg.cond_dim}), got {z_vl.shape}")
        if needs_aux(self.variant):
            if z_aux is None:
                raise ValueError(f"variant {self.variant} requires aux features, got z_aux=None")
            z_aux = np.asarray(z_aux)
            if z_aux.ndim != 3 or z_aux.shape[-1] != self.cfg.aux_raw_dim:
                raise ShapeError(
                    f"z_aux must be (B, L, {self.cfg.aux_raw_dim}), got {z_aux.shape}")
        h0 = embed_tokens_batch(self.cfg, self.store, states, actions, t)
        zvl_t = Tensor(z_vl.astype(self.dtype, copy=False))
        zaux_t = None
        if needs_aux(self.variant):
            zaux_t = Tensor(z_aux.astype(self.dtype, copy=False))
        h_n = _STACKS[self.variant](self, h0, zvl_t, zaux_t)
        return velocity_head(self.cfg, self.store, h_n)


def build_policy(cfg: DiTConfig, variant: str, base_store: ParamStore | None = None,
                 rng=None, dtype=np.float32, zero_init: bool = True,
                 freeze_projector: bool = False) -> PolicyModel:
    """Construct a variant policy, optionally seeding the trunk from a base checkpoint."""
    check_variant(variant)
    if rng is None:
        rng = np.random.default_rng(0)
    store = init_trunk(cfg, rng, dtype)
    if base_store is not None:
        for name, src in base_store.items():
            if name not in store:
                raise ValueError(f"base checkpoint entry {name!r} not part of this architecture")
            if src.shape != store[name].shape:
                raise ShapeError(
                    f"base entry {name!r} has shape {src.shape}, expected {store[name].shape}")
            store[name].data = src.data.astype(dtype, copy=True)
    _add_variant_params(cfg, store, variant, rng, dtype, zero_init)
    return PolicyModel(cfg, store, variant, zero_init=zero_init, freeze_projector=freeze_projector)


def policy_from_store(cfg: DiTConfig, variant: str, store: ParamStore,
                      zero_init: bool = True, freeze_projector: bool = False) -> PolicyModel:
    """Wrap a fully loaded checkpoint store (for example at eval time)."""
    missing = [n for n in expected_param_names(cfg, variant) if n not in store]
    if missing:
        raise ValueError(f"checkpoint missing {len(missing)} entries for {variant}: {missing[:4]}")
    return PolicyModel(cfg, store, variant, zero_init=zero_init, freeze_projector=freeze_projector)


def _add_variant_params(cfg: DiTConfig, store: ParamStore, variant: str, rng, dtype,
                        zero_init: bool) -> None:
    if variant == "Baseline":
        return
    if cfg.aux_len < 1 or cfg.aux_raw_dim < 1:
        raise ValueError(f"variant {variant} needs aux_len/aux_raw_dim >= 1 in the config")
    group = _GROUP[variant]
    store.add(f"{group}.wproj",
              Tensor(_zero_or_small((cfg.aux_raw_dim, projector_width(cfg, variant)), rng, dtype, zero_init)))
    branch = _COPIED_BRANCH.get(variant)
    if branch is not None:
        for i in range(cfg.n_blocks):
            for name in block_param_names(f"main.block{i}"):
                src = store[name]
                store.add(name.replace("main.", f"{branch}.", 1), Tensor(src.data.copy()))
    if variant in ("PVI", "ControlNetStyle", "ReferenceNetStyle"):
        for i in range(cfg.n_blocks):
            store.add(f"{group}.z{i}.w",
                      Tensor(_zero_or_small((cfg.hidden, cfg.hidden), rng, dtype, zero_init)))
            store.add(f"{group}.z{i}.b",
                      Tensor(_zero_or_small((cfg.hidden,), rng, dtype, zero_init)))
    if variant == "ControlVLAStyle":
        for i in range(cfg.n_blocks):
            for proj in ("kz", "vz"):
                store.add(f"cvla.block{i}.{proj}.w",
                          Tensor(_zero_or_small((cfg.cond_dim, cfg.hidden), rng, dtype, zero_init)))
                store.add(f"cvla.block{i}.{proj}.b",
                          Tensor(_zero_or_small((cfg.hidden,), rng, dtype, zero_init)))


def expected_param_names(cfg: DiTConfig, variant: str) -> list[str]:
    names = ["adapters.state.w", "adapters.state.b", "adapters.action.w", "adapters.action.b",
             "adapters.head.w", "adapters.head.b", "main.time.w", "main.time.b", "main.pos"]
    for i in range(cfg.n_blocks):
        names += block_param_names(f"main.block{i}")
    names += ["main.ln_f.g", "main.ln_f.b"]
    if variant == "Baseline":
        return names
    group = _GROUP[variant]
    names.append(f"{group}.wproj")
    branch = _COPIED_BRANCH.get(variant)
    if branch is not None:
        for i in range(cfg.n_blocks):
            names += block_param_names(f"{branch}.block{i}")
    if variant in ("PVI", "ControlNetStyle", "ReferenceNetStyle"):
        for i in range(cfg.n_blocks):
            names += [f"{group}.z{i}.w", f"{group}.z{i}.b"]
    if variant == "ControlVLAStyle":
        for i in range(cfg.n_blocks):
            names += [f"cvla.block{i}.{p}.{s}" for p in ("kz", "vz") for s in ("w", "b")]
    return names


# ---------------------------------------------------------------- forwards


def project_aux(model: PolicyModel, z_aux) -> Tensor:
    """Linear map of raw aux tokens into the variant's target space (no bias)."""
    if not needs_aux(model.variant):
        raise ValueError("Baseline has no aux projector")
    za = z_aux if isinstance(z_aux, Tensor) else Tensor(np.asarray(z_aux, dtype=model.dtype))
    if za.shape[-1] != model.cfg.aux_raw_dim:
        raise ShapeError(
            f"aux width {za.shape[-1]} does not match configured d_E {model.cfg.aux_raw_dim}")
    return matmul(za, model.store[f"{_GROUP[model.variant]}.wproj"])


def _stack_baseline(model, h0, zvl_t, zaux_t):
    h = h0
    for i in range(model.cfg.n_blocks):
        h = dit_block(model.store, f"main.block{i}", h, zvl_t, model.cfg.heads)
    return h


def _stack_pvi(model, h0, zvl_t, zaux_t):
    # copy pathway consumes projected aux; frozen main gets per-block residual injections
    ztilde = project_aux(model, zaux_t)
    store, heads = model.store, model.cfg.heads
    h_copy = h0
    h_main = h0
    for i in range(model.cfg.n_blocks):
        h_copy = dit_block(store, f"copy.block{i}", h_copy, ztilde, heads)
        inj = linear(h_copy, store[f"pvi.z{i}.w"], store[f"pvi.z{i}.b"])
        h_main = add(dit_block(store, f"main.block{i}", h_main, zvl_t, heads), inj)
    return h_main


def _stack_concat(model, h0, zvl_t, zaux_t):
    ctx = concat([zvl_t, project_aux(model, zaux_t)], axis=1)
    h = h0
    for i in range(model.cfg.n_blocks):
        h = dit_block(model.store, f"main.block{i}", h, ctx, model.cfg.heads)
    return h


def _stack_controlnet(model, h0, zvl_t, zaux_t):
    # pooled projected aux enters at the branch input; branch sees z_vl like main
    store, heads = model.store, model.cfg.heads
    pooled = tmean(project_aux(model, zaux_t), axis=1, keepdims=True)
    h_branch = add(h0, pooled)
    h_main = h0
    for i in range(model.cfg.n_blocks):
        h_branch = dit_block(store, f"ctrl.block{i}", h_branch, zvl_t, heads)
        inj = linear(h_branch, store[f"ctrl.z{i}.w"], store[f"ctrl.z{i}.b"])
        h_main = add(dit_block(store, f"main.block{i}", h_main, zvl_t, heads), inj)
    return h_main


def _stack_referencenet(model, h0, zvl_t, zaux_t):
    # branch runs on projected aux tokens; pooled states fuse back through zero-init maps
    store, heads = model.store, model.cfg.heads
    h_branch = project_aux(model, zaux_t)
    h_main = h0
    for i in range(model.cfg.n_blocks):
        h_branch = dit_block(store, f"ref.block{i}", h_branch, zvl_t, heads)
        fused = linear(tmean(h_branch, axis=1, keepdims=True),
                       store[f"ref.z{i}.w"], store[f"ref.z{i}.b"])
        h_main = add(dit_block(store, f"main.block{i}", h_main, zvl_t, heads), fused)
    return h_main


def _stack_controlvla(model, h0, zvl_t, zaux_t):
    # dual cross-attention: zero-init K_z/V_z read projected aux with shared queries
    ztilde = project_aux(model, zaux_t)
    h = h0
    for i in range(model.cfg.n_blocks):
        h = dit_block(model.store, f"main.block{i}", h, zvl_t, model.cfg.heads,
                      aux_ctx=ztilde, aux_prefix=f"cvla.block{i}")
    return h


_STACKS = {
    "Baseline": _stack_baseline,
    "PVI": _stack_pvi,
    "Concat": _stack_concat,
    "ControlNetStyle": _stack_controlnet,
    "ReferenceNetStyle": _stack_referencenet,
    "ControlVLAStyle": _stack_controlvla,
}


def _run_single(model: PolicyModel, fn, h0: Tensor, z_vl, z_aux) -> Tensor:
    cfg = model.cfg
    if h0.data.ndim == 2:
        h0 = reshape(h0, (1,) + h0.shape)
    zvl = np.asarray(z_vl)
    if zvl.ndim == 2:
        zvl = zvl[None]
    zvl_t = Tensor(zvl.astype(model.dtype, copy=False))
    zaux_t = None
    if z_aux is not None:
        za = np.asarray(z_aux)
        if za.ndim == 2:
            za = za[None]
        zaux_t = Tensor(za.astype(model.dtype, copy=False))
    h_n = fn(model, h0, zvl_t, zaux_t)
    return velocity_head(cfg, model.store, h_n)


def pvi_forward(model, h0, z_vl, z_aux):
    return _run_single(model, _stack_pvi, h0, z_vl, z_aux)


def concat_forward(model, h0, z_vl, z_aux):
    return _run_single(model, _stack_concat, h0, z_vl, z_aux)


def controlnet_forward(model, h0, z_vl, z_aux):
    return _run_single(model, _stack_controlnet, h0, z_vl, z_aux)


def referencenet_forward(model, h0, z_vl, z_aux):
    return _run_single(model, _stack_referencenet, h0, z_vl, z_aux)


def controlvla_forward(model, h0, z_vl, z_aux):
    return _run_single(model, _stack_controlvla, h0, z_vl, z_aux)


def forward_velocity(model: PolicyModel, state: np.ndarray, a_t: np.ndarray, t: float,
                     cond: ConditioningBundle, variant: str | None = None) -> np.ndarray:
    """Single-sample velocity prediction as a plain (H, A) array."""
    if variant is not None and variant != model.variant:
        raise ValueError(f"model was built for {model.variant}, not {variant}")
    with no_grad():
        out = model.velocity_batch(
            np.asarray(state)[None, :], np.asarray(a_t)[None, :, :], np.asarray([t]),
            np.asarray(cond.z_vl)[None, :, :],
            None if cond.z_aux is None else np.asarray(cond.z_aux)[None, :, :],
        )
    return out.data[0]
