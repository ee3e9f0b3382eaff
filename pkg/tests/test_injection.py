import numpy as np
import pytest
from scipy.special import erf

from pvilab.injection import (VARIANTS, build_policy, check_variant, expected_param_names,
                              freeze_plan, needs_aux, param_group, policy_from_store,
                              project_aux, projector_width)
from pvilab.model import sinusoid_features
from pvilab.params import optimizer_step
from pvilab.tensor import ShapeError, Tensor, no_grad, softmax_lastdim

from conftest import tiny_dit

AUX = dict(aux_len=3, aux_raw_dim=5)
ZERO_START = ("PVI", "ControlNetStyle", "ReferenceNetStyle", "ControlVLAStyle")


def build(variant, rng=None, dtype=np.float64, **kw):
    cfg = tiny_dit(**(AUX if variant != "Baseline" else {}))
    rng = np.random.default_rng(0) if rng is None else rng
    return build_policy(cfg, variant, rng=rng, dtype=dtype, **kw)


def probe_inputs(cfg, rng, b=4):
    return (rng.standard_normal((b, cfg.state_dim)),
            rng.standard_normal((b, cfg.horizon, cfg.action_dim)),
            rng.uniform(0, 1, size=b),
            rng.standard_normal((b, cfg.cond_len, cfg.cond_dim)),
            rng.standard_normal((b, cfg.aux_len, cfg.aux_raw_dim)) if cfg.aux_len else None)


def test_variant_names_and_checks():
    assert VARIANTS == ("Baseline", "PVI", "Concat", "ControlNetStyle",
                        "ReferenceNetStyle", "ControlVLAStyle")
    with pytest.raises(ValueError):
        check_variant("LoRA")
    assert not needs_aux("Baseline") and needs_aux("PVI")


def test_projector_width_per_variant():
    cfg = tiny_dit(**AUX)
    for variant in ("PVI", "Concat", "ControlVLAStyle"):
        assert projector_width(cfg, variant) == cfg.cond_dim
    for variant in ("ControlNetStyle", "ReferenceNetStyle"):
        assert projector_width(cfg, variant) == cfg.hidden


def _names_by(store, prefix):
    return {n for n in store.names() if n.startswith(prefix)}


def test_freeze_plan_declared_table():
    """Trainable sets per variant, stated in full."""
    for variant in VARIANTS:
        policy = build(variant)
        names = policy.store.names()
        plan = set(freeze_plan(variant, names))
        main = _names_by(policy.store, "main.")
        adapters = _names_by(policy.store, "adapters.")
        expected = {
            "Baseline": main | adapters,
            "PVI": _names_by(policy.store, "pvi.") | _names_by(policy.store, "copy.") | adapters,
            "Concat": main | _names_by(policy.store, "concat.") | adapters,
            "ControlNetStyle": _names_by(policy.store, "ctrl.") | adapters,
            "ReferenceNetStyle": main | _names_by(policy.store, "ref.") | adapters,
            "ControlVLAStyle": main | _names_by(policy.store, "cvla.") | adapters,
        }[variant]
        assert plan == expected, variant
        # the plan is exactly what the store marks trainable
        assert set(policy.store.trainable_names()) == expected
        # hand-counted sizes for a 2-block trunk (26 tensors per block)
        hand_count = {"Baseline": 63, "PVI": 63, "Concat": 64, "ControlNetStyle": 63,
                      "ReferenceNetStyle": 120, "ControlVLAStyle": 72}[variant]
        assert len(plan) == hand_count, variant


def test_main_dit_frozen_only_where_stated():
    frozen_main = {"PVI": True, "ControlNetStyle": True,
                   "Concat": False, "ReferenceNetStyle": False, "ControlVLAStyle": False}
    for variant, is_frozen in frozen_main.items():
        policy = build(variant)
        main_trainable = [n for n in policy.store.trainable_names() if n.startswith("main.")]
        assert (len(main_trainable) == 0) == is_frozen, variant


def test_freeze_projector_drops_only_wproj():
    policy = build("PVI", freeze_projector=True)
    trainable = set(policy.store.trainable_names())
    default = set(freeze_plan("PVI", policy.store.names()))
    assert default - trainable == {"pvi.wproj"}


def test_expected_param_names_matches_build():
    for variant in VARIANTS:
        policy = build(variant)
        assert policy.store.names() == expected_param_names(policy.cfg, variant), variant


def test_param_group_classification():
    assert param_group("main.block0.attn.wq.w") == "main_dit"
    assert param_group("main.pos") == "main_dit"
    assert param_group("adapters.head.w") == "adapters"
    for prefix in ("pvi", "copy", "concat", "ctrl", "ref", "cvla"):
        assert param_group(f"{prefix}.anything.w") == "plugin_branch"


@pytest.mark.parametrize("variant", ZERO_START)
def test_init_equivalence_zero_start(variant, rng):
    base = build("Baseline", rng=np.random.default_rng(0))
    policy = build(variant, rng=np.random.default_rng(0))
    cfg = policy.cfg
    worst = 0.0
    for trial in range(20):
        trial_rng = np.random.default_rng(100 + trial)
        states, actions, t, z_vl, z_aux = probe_inputs(cfg, trial_rng)
        with no_grad():
            v_new = policy.velocity_batch(states, actions, t, z_vl, z_aux).data
            v_old = base.velocity_batch(states, actions, t, z_vl).data
        worst = max(worst, float(np.max(np.abs(v_new - v_old))))
    assert worst <= 1e-6, f"{variant}: {worst}"


def test_concat_breaks_equivalence(rng):
    """Concat is the documented counterexample: extra tokens shift attention."""
    base = build("Baseline", rng=np.random.default_rng(0))
    policy = build("Concat", rng=np.random.default_rng(0))
    states, actions, t, z_vl, z_aux = probe_inputs(policy.cfg, np.random.default_rng(7))
    with no_grad():
        v_new = policy.velocity_batch(states, actions, t, z_vl, z_aux).data
        v_old = base.velocity_batch(states, actions, t, z_vl).data
    assert np.max(np.abs(v_new - v_old)) > 1e-3


def test_copy_blocks_bitwise_at_build():
    policy = build("PVI")
    store = policy.store
    for i in range(policy.cfg.n_blocks):
        for name in store.names():
            if name.startswith(f"copy.block{i}."):
                main_name = name.replace("copy.", "main.", 1)
                np.testing.assert_array_equal(store[name].data, store[main_name].data)


def test_training_diverges_copy_from_main(rng):
    """A few steps move the copy branch while main stays bit-frozen.

    Step 0 cannot move the copy blocks (the zero injection maps gate their
    gradients); once the maps leave zero, gradient flows into the branch.
    """
    policy = build("PVI", dtype=np.float32)
    cfg = policy.cfg
    main_hash = policy.store.state_hash([n for n in policy.store.names()
                                         if n.startswith("main.")])
    from pvilab.flow import fm_loss, make_flow_batch
    for _ in range(4):
        states, actions, t, z_vl, z_aux = probe_inputs(cfg, rng)
        batch = make_flow_batch(actions.astype(np.float32), rng)
        loss = fm_loss(policy, batch, states, z_vl, z_aux)
        loss.backward()
        optimizer_step(policy.store, lr=1e-2)
    assert policy.store.state_hash([n for n in policy.store.names()
                                    if n.startswith("main.")]) == main_hash
    copy_names = [n for n in policy.store.names() if n.startswith("copy.block0.")]
    main_twins = [n.replace("copy.", "main.", 1) for n in copy_names]
    diffs = [np.max(np.abs(policy.store[c].data - policy.store[m].data))
             for c, m in zip(copy_names, main_twins)]
    assert max(diffs) > 0.0


def test_gradient_routing_exact(rng):
    """Gradients land on plan entries only; frozen main gets none."""
    policy = build("PVI", dtype=np.float64)
    states, actions, t, z_vl, z_aux = probe_inputs(policy.cfg, rng)
    from pvilab.flow import fm_loss, make_flow_batch
    batch = make_flow_batch(actions, rng)
    loss = fm_loss(policy, batch, states, z_vl, z_aux)
    loss.backward()
    with_grad = {n for n, p in policy.store.items() if p.grad is not None}
    assert with_grad == set(policy.plan)


def test_zero_init_flag_off_breaks_equivalence(rng):
    base = build("Baseline", rng=np.random.default_rng(0))
    policy = build("PVI", rng=np.random.default_rng(0), zero_init=False)
    states, actions, t, z_vl, z_aux = probe_inputs(policy.cfg, rng)
    with no_grad():
        v_new = policy.velocity_batch(states, actions, t, z_vl, z_aux).data
        v_old = base.velocity_batch(states, actions, t, z_vl).data
    assert np.max(np.abs(v_new - v_old)) > 1e-6


def test_controlvla_attention_oracle(rng):
    """Dense numpy recomputation of the shared-query aux attention path."""
    cfg = tiny_dit(heads=1, **AUX)
    policy = build_policy(cfg, "ControlVLAStyle", rng=np.random.default_rng(3),
                          dtype=np.float64)
    store = policy.store
    # give the zero-initialized aux projections real weights
    for i in range(cfg.n_blocks):
        store[f"cvla.block{i}.kz.w"].data = rng.standard_normal((cfg.cond_dim, cfg.hidden)) * 0.3
        store[f"cvla.block{i}.vz.w"].data = rng.standard_normal((cfg.cond_dim, cfg.hidden)) * 0.3

    states, actions, t, z_vl, z_aux = probe_inputs(cfg, rng, b=1)
    with no_grad():
        v_model = policy.velocity_batch(states, actions, t, z_vl, z_aux).data

    # replicate with plain numpy using the same parameters
    def lin(x, prefix):
        return x @ store[f"{prefix}.w"].data + store[f"{prefix}.b"].data

    def ln(x, prefix, eps=1e-6):
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        xn = (x - mu) / np.sqrt(var + eps)
        return xn * store[f"{prefix}.g"].data + store[f"{prefix}.b"].data

    def softmax(x):
        e = np.exp(x - x.max(-1, keepdims=True))
        return e / e.sum(-1, keepdims=True)

    d = cfg.hidden
    scale = 1.0 / np.sqrt(d)  # single head: dh == hidden
    state_tok = lin(states, "adapters.state")[:, None]
    act_tok = lin(actions, "adapters.action")
    h = np.concatenate([state_tok, act_tok], axis=1)
    h = h + lin(sinusoid_features(t, d, np.float64), "main.time")[:, None]
    h = h + store["main.pos"].data
    zt = z_aux @ store["cvla.wproj"].data
    for i in range(cfg.n_blocks):
        p = f"main.block{i}"
        x = ln(h, f"{p}.ln1")
        q, k, v = lin(x, f"{p}.attn.wq"), lin(x, f"{p}.attn.wk"), lin(x, f"{p}.attn.wv")
        h = h + lin(softmax(q @ k.transpose(0, 2, 1) * scale) @ v, f"{p}.attn.wo")
        x = ln(h, f"{p}.ln2")
        q = lin(x, f"{p}.xattn.wq")
        k, v = lin(z_vl, f"{p}.xattn.wk"), lin(z_vl, f"{p}.xattn.wv")
        att = softmax(q @ k.transpose(0, 2, 1) * scale) @ v
        kz = lin(zt, f"cvla.block{i}.kz")
        vz = lin(zt, f"cvla.block{i}.vz")
        att = att + softmax(q @ kz.transpose(0, 2, 1) * scale) @ vz
        h = h + lin(att, f"{p}.xattn.wo")
        x = ln(h, f"{p}.ln3")
        u = lin(x, f"{p}.mlp.fc1")
        u = 0.5 * u * (1 + erf(u / np.sqrt(2)))
        h = h + lin(u, f"{p}.mlp.fc2")
    h = ln(h, "main.ln_f")
    v_ref = lin(h[:, 1:], "adapters.head")
    np.testing.assert_allclose(v_model, v_ref, atol=1e-10)


def test_referencenet_pooled_fusion_is_token_order_invariant(rng):
    policy = build("ReferenceNetStyle", rng=np.random.default_rng(2))
    # make the fusion maps nonzero so the branch actually contributes
    for name in policy.store.names():
        if name.startswith("ref.z"):
            policy.store[name].data = rng.standard_normal(policy.store[name].shape) * 0.1
    states, actions, t, z_vl, z_aux = probe_inputs(policy.cfg, rng)
    perm = rng.permutation(policy.cfg.aux_len)
    with no_grad():
        v1 = policy.velocity_batch(states, actions, t, z_vl, z_aux).data
        v2 = policy.velocity_batch(states, actions, t, z_vl, z_aux[:, perm]).data
    np.testing.assert_allclose(v1, v2, atol=1e-9)


def test_controlnet_entry_depends_on_aux_mean_only(rng):
    policy = build("ControlNetStyle", rng=np.random.default_rng(4))
    for name in policy.store.names():
        if name.startswith("ctrl.z"):
            policy.store[name].data = rng.standard_normal(policy.store[name].shape) * 0.1
    cfg = policy.cfg
    states, actions, t, z_vl, z_aux = probe_inputs(cfg, rng)
    # a different token set with the same mean must leave the output unchanged
    shift = rng.standard_normal((states.shape[0], 1, cfg.aux_raw_dim))
    z_same_mean = np.concatenate([z_aux[:, :1] + shift, z_aux[:, 1:2] - shift,
                                  z_aux[:, 2:]], axis=1)
    with no_grad():
        v1 = policy.velocity_batch(states, actions, t, z_vl, z_aux).data
        v2 = policy.velocity_batch(states, actions, t, z_vl, z_same_mean).data
    np.testing.assert_allclose(v1, v2, atol=1e-9)


def test_project_aux_width_validation(rng):
    policy = build("PVI")
    with pytest.raises(ShapeError):
        project_aux(policy, Tensor(rng.standard_normal((2, 3, 7))))  # d_E is 5


def test_missing_aux_rejected(rng):
    policy = build("PVI")
    states, actions, t, z_vl, _ = probe_inputs(policy.cfg, rng)
    with pytest.raises(ValueError):
        policy.velocity_batch(states, actions, t, z_vl, None)


def test_policy_from_store_validates_names(rng):
    policy = build("PVI", dtype=np.float32)
    store = policy.store
    with pytest.raises(ValueError):
        policy_from_store(policy.cfg, "Concat", store)  # wrong variant for these names
    rebuilt = policy_from_store(policy.cfg, "PVI", store)
    assert set(rebuilt.store.trainable_names()) == set(policy.plan)
