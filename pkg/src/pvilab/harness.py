"""Experiment harness: training runs, rollout evaluation, comparisons, ablations.

A run directory is the unit of provenance. Every training run writes:

    config.cfg            exact flat config the run used
    metrics.csv           one `step,loss` row per optimizer step
    checkpoint.pvt        all parameters (trainable and frozen)
    freeze_manifest.json  trainable/frozen name lists, frozen-state hashes
                          at start and end of training, base checkpoint digest

Evaluation re-reads the manifest, recomputes the frozen-state hash from the
checkpoint, and refuses to score a run whose frozen weights moved or whose
manifest disagrees with the stored parameters (ContractViolation, exit 3 on
the command line). Nothing in a run directory contains a timestamp, so two
runs with identical configs are byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, config_to_flat, dump_config, flat_to_config, parse_config_text
from .encoders import EncoderSpec, build_encoder
from .flow import euler_sample_batch, fm_loss, make_flow_batch
from .injection import build_policy, needs_aux, param_group, policy_from_store
from .params import file_sha256, load_checkpoint, optimizer_step, save_checkpoint
from .taskbench import eval_episodes, make_dataset, success
from .tensor import no_grad

log = logging.getLogger("pvilab")

DEFAULT_FAMILIES = ("reach", "intercept", "multiphase")
ZERO_START_VARIANTS = ("PVI", "ControlNetStyle", "ReferenceNetStyle", "ControlVLAStyle")
ABLATIONS = ("temporal_context", "freeze_projector", "no_zero_init", "sampler_k")

MANIFEST_NAME = "freeze_manifest.json"
CHECKPOINT_NAME = "checkpoint.pvt"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.cfg"


class ContractViolation(RuntimeError):
    """Frozen weights moved, a manifest disagrees with its checkpoint, or an
    init-equivalence audit failed."""


def derived_seed(*parts) -> int:
    """Stable 62-bit seed from a tuple of labels; independent of call order."""
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 2


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial rate (about +-0.05 at n=400)."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if not 0 <= successes <= n:
        raise ValueError(f"successes must be in [0, {n}], got {successes}")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


# ---------------------------------------------------------------------------
# encoders and features
# ---------------------------------------------------------------------------

def build_vlm_encoder(cfg: RunConfig):
    spec = EncoderSpec(kind="vlm_proxy", out_len=cfg.dit.cond_len, out_dim=cfg.dit.cond_dim,
                       frames=1, seed=cfg.vlm.seed)
    return build_encoder(spec, cfg.task.grid, bottleneck=cfg.vlm.bottleneck, gain=cfg.vlm.gain)


def build_aux_encoder(cfg: RunConfig):
    if cfg.variant == "Baseline" or cfg.encoder.kind == "none":
        return None
    frames = 1 if cfg.encoder.kind == "static" else cfg.encoder.frames
    spec = EncoderSpec(kind=cfg.encoder.kind, out_len=cfg.encoder.out_len,
                       out_dim=cfg.encoder.out_dim, frames=frames, seed=cfg.encoder.seed)
    return build_encoder(spec, cfg.task.grid)


def encode_features(vlm_enc, aux_enc, frames: np.ndarray):
    """Frames (n, V, T, P, P) -> (z_vl, z_aux or None), both float32."""
    z_vl = vlm_enc.encode_batch(frames).astype(np.float32)
    z_aux = None
    if aux_enc is not None:
        z_aux = aux_enc.encode_batch(frames).astype(np.float32)
    return z_vl, z_aux


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _train_loop(policy, z_vl, z_aux, states, actions, train_params, rng):
    n = states.shape[0]
    rows = []
    for step_i in range(train_params.steps):
        idx = rng.integers(0, n, size=train_params.batch)
        flow = make_flow_batch(actions[idx], rng)
        aux = None if z_aux is None else z_aux[idx]
        loss = fm_loss(policy, flow, states[idx], z_vl[idx], aux)
        loss.backward()
        optimizer_step(policy.store, train_params.lr, kind=train_params.optimizer)
        rows.append((step_i, float(loss.data)))
    return rows


def _write_metrics(path: Path, rows) -> None:
    lines = ["step,loss"] + [f"{step_i},{value:.8f}" for step_i, value in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _finish_run(out_dir: Path, cfg: RunConfig, policy, rows, manifest: dict) -> Path:
    """Audit the frozen set, then persist every run artifact."""
    out_dir.mkdir(parents=True, exist_ok=True)
    end_hash = policy.frozen_hash()
    manifest["frozen_hash_end"] = end_hash
    if end_hash != manifest["frozen_hash_start"]:
        manifest["status"] = "FAILED"
        _write_manifest(out_dir / MANIFEST_NAME, manifest)
        raise ContractViolation(
            f"frozen parameters moved during training in {out_dir}: "
            f"{manifest['frozen_hash_start'][:12]} -> {end_hash[:12]}")
    manifest["status"] = "ok"
    dump_config(cfg, out_dir / CONFIG_NAME)
    _write_metrics(out_dir / METRICS_NAME, rows)
    ckpt = out_dir / CHECKPOINT_NAME
    save_checkpoint(policy.store, ckpt)
    manifest["checkpoint_sha256"] = file_sha256(ckpt)
    _write_manifest(out_dir / MANIFEST_NAME, manifest)
    return out_dir


def _base_manifest(cfg: RunConfig, policy, base_sha: str | None) -> dict:
    return {
        "variant": policy.variant,
        "flags": {"zero_init": cfg.flags.zero_init,
                  "freeze_projector": cfg.flags.freeze_projector},
        "budget": {"steps": cfg.train.steps, "batch": cfg.train.batch,
                   "lr": cfg.train.lr, "optimizer": cfg.train.optimizer,
                   "seed": cfg.train.seed},
        "trainable": sorted(policy.store.trainable_names()),
        "frozen": sorted(policy.store.frozen_names()),
        "frozen_hash_start": policy.frozen_hash(),
        "base_checkpoint_sha256": base_sha,
    }


def pretrain(cfg: RunConfig, out_dir, families=DEFAULT_FAMILIES) -> Path:
    """Train the shared base policy on a mixture of task families.

    The variant is forced to Baseline and no aux encoder is used; the
    resulting checkpoint is the starting point every fine-tune loads.
    """
    flat = config_to_flat(cfg)
    flat.update({"variant": "Baseline", "encoder.kind": "none",
                 "dit.aux_len": "0", "dit.aux_raw_dim": "0"})
    cfg = flat_to_config(flat)
    out_dir = Path(out_dir)

    windows, states, actions = [], [], []
    for family in families:
        spec = replace(cfg.task, family=family)
        ds = make_dataset(spec, seed=derived_seed(cfg.train.seed, "pretrain-data", family))
        windows.append(ds.windows)
        states.append(ds.states)
        actions.append(ds.actions)
    windows = np.concatenate(windows)
    states = np.concatenate(states)
    actions = np.concatenate(actions)

    vlm_enc = build_vlm_encoder(cfg)
    z_vl, _ = encode_features(vlm_enc, None, windows)

    rng_init = np.random.default_rng(derived_seed(cfg.train.seed, "init", "Baseline"))
    policy = build_policy(cfg.dit, "Baseline", rng=rng_init)
    manifest = _base_manifest(cfg, policy, base_sha=None)
    manifest["pretrain_families"] = list(families)

    rng_train = np.random.default_rng(derived_seed(cfg.train.seed, "train", "Baseline"))
    rows = _train_loop(policy, z_vl, None, states, actions, cfg.train, rng_train)
    log.info("pretrain: %d steps on %d demos, final loss %.4f",
             cfg.train.steps, len(states), rows[-1][1])
    return _finish_run(out_dir, cfg, policy, rows, manifest)


def _equivalence_probe(cfg: RunConfig, policy, base_store) -> float:
    """Max |v_variant - v_base| over a few random inputs at initialization."""
    base = policy_from_store(cfg.dit, "Baseline", base_store)
    rng = np.random.default_rng(derived_seed(cfg.train.seed, "probe", cfg.variant))
    b = 4
    states = rng.standard_normal((b, cfg.dit.state_dim))
    actions = rng.standard_normal((b, cfg.dit.horizon, cfg.dit.action_dim))
    t = rng.uniform(0.0, 1.0, size=b)
    z_vl = rng.standard_normal((b, cfg.dit.cond_len, cfg.dit.cond_dim))
    z_aux = None
    if needs_aux(cfg.variant):
        z_aux = rng.standard_normal((b, cfg.dit.aux_len, cfg.dit.aux_raw_dim))
    with no_grad():
        v_new = policy.velocity_batch(states, actions, t, z_vl, z_aux).data
        v_old = base.velocity_batch(states, actions, t, z_vl).data
    return float(np.max(np.abs(v_new - v_old)))


def train(cfg: RunConfig, base_checkpoint, out_dir) -> Path:
    """Fine-tune one variant from a pretrained base checkpoint."""
    out_dir = Path(out_dir)
    base_checkpoint = Path(base_checkpoint)
    base_store = load_checkpoint(base_checkpoint)
    base_sha = file_sha256(base_checkpoint)

    rng_init = np.random.default_rng(derived_seed(cfg.train.seed, "init", cfg.variant))
    policy = build_policy(cfg.dit, cfg.variant, base_store=base_store, rng=rng_init,
                          zero_init=cfg.flags.zero_init,
                          freeze_projector=cfg.flags.freeze_projector)

    if cfg.variant in ZERO_START_VARIANTS:
        diff = _equivalence_probe(cfg, policy, base_store)
        if cfg.flags.zero_init:
            if diff > 1e-6:
                raise ContractViolation(
                    f"{cfg.variant} must start output-identical to the base "
                    f"(max deviation {diff:.3e} > 1e-6)")
        elif diff > 1e-6:
            log.warning("zero_init disabled: %s no longer matches the base at "
                        "initialization (max deviation %.3e)", cfg.variant, diff)

    ds = make_dataset(cfg.task, seed=derived_seed(cfg.train.seed, "data", cfg.task.family))
    vlm_enc = build_vlm_encoder(cfg)
    aux_enc = build_aux_encoder(cfg)
    z_vl, z_aux = encode_features(vlm_enc, aux_enc, ds.windows)

    manifest = _base_manifest(cfg, policy, base_sha=base_sha)
    rng_train = np.random.default_rng(derived_seed(cfg.train.seed, "train", cfg.variant))
    rows = _train_loop(policy, z_vl, z_aux, ds.states, ds.actions, cfg.train, rng_train)
    log.info("train[%s @ %s, %s]: %d steps, final loss %.4f", cfg.variant,
             cfg.encoder.kind, cfg.task.family, cfg.train.steps, rows[-1][1])
    return _finish_run(out_dir, cfg, policy, rows, manifest)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def load_run(run_dir):
    """(cfg, manifest, store) for a finished run, after integrity checks."""
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractViolation(f"unreadable freeze manifest in {run_dir}: {exc}") from None
    cfg = flat_to_config(parse_config_text((run_dir / CONFIG_NAME).read_text(encoding="utf-8")))
    required = ("variant", "status", "trainable", "frozen",
                "frozen_hash_start", "frozen_hash_end")
    missing = [key for key in required if key not in manifest]
    if missing:
        raise ContractViolation(f"freeze manifest in {run_dir} is missing {missing}")
    if manifest["status"] != "ok":
        raise ContractViolation(f"run {run_dir} has status {manifest['status']!r}")
    if manifest["variant"] != cfg.variant:
        raise ContractViolation(
            f"manifest variant {manifest['variant']!r} != config variant {cfg.variant!r}")

    store = load_checkpoint(run_dir / CHECKPOINT_NAME)
    declared = set(manifest["trainable"]) | set(manifest["frozen"])
    if declared != set(store.names()):
        raise ContractViolation(f"manifest parameter names disagree with checkpoint in {run_dir}")
    try:
        frozen_now = store.state_hash(manifest["frozen"])
    except KeyError as exc:
        raise ContractViolation(f"manifest lists unknown parameter {exc}") from None
    if frozen_now != manifest["frozen_hash_end"]:
        raise ContractViolation(
            f"frozen-state hash mismatch in {run_dir}: checkpoint {frozen_now[:12]} "
            f"!= manifest {manifest['frozen_hash_end'][:12]}")
    return cfg, manifest, store


def _policy_from_run(cfg: RunConfig, manifest: dict, store):
    policy = policy_from_store(cfg.dit, cfg.variant, store,
                               zero_init=cfg.flags.zero_init,
                               freeze_projector=cfg.flags.freeze_projector)
    if sorted(policy.store.trainable_names()) != manifest["trainable"]:
        raise ContractViolation("manifest trainable set disagrees with the freeze plan")
    return policy


def rollout_outcomes(episodes, actions: np.ndarray, spec) -> list[bool]:
    """Score a stack of action chunks (n, H, 2) against matching episodes."""
    if len(episodes) != actions.shape[0]:
        raise ValueError(f"{len(episodes)} episodes vs {actions.shape[0]} action chunks")
    return [success(actions[i], ep, spec) for i, ep in enumerate(episodes)]


def evaluate(run_dir, seed: int = 1, rollouts: int | None = None,
             k_steps: int | None = None) -> dict:
    """Roll out a trained run on fresh episodes and write eval artifacts."""
    run_dir = Path(run_dir)
    cfg, manifest, store = load_run(run_dir)
    policy = _policy_from_run(cfg, manifest, store)
    k = cfg.sampler_k if k_steps is None else int(k_steps)
    if k < 1:
        raise ConfigError(f"sampler steps must be >= 1, got {k}")

    episodes = eval_episodes(cfg.task, seed, rollouts)
    frames = np.stack([ep.window.frames for ep in episodes])
    states = np.stack([ep.window.state for ep in episodes])
    vlm_enc = build_vlm_encoder(cfg)
    aux_enc = build_aux_encoder(cfg)
    z_vl, z_aux = encode_features(vlm_enc, aux_enc, frames)

    rng = np.random.default_rng(derived_seed(seed, "rollout", cfg.variant, k))
    actions = euler_sample_batch(policy, states, z_vl, z_aux, k, rng)
    outcomes = rollout_outcomes(episodes, actions, cfg.task)
    final_dist = np.linalg.norm(
        actions[:, -1, :] - np.stack([ep.goal for ep in episodes]), axis=-1)

    n = len(episodes)
    successes = int(sum(outcomes))
    lo, hi = wilson_interval(successes, n)
    summary = {
        "variant": cfg.variant,
        "encoder": cfg.encoder.kind if cfg.variant != "Baseline" else "none",
        "family": cfg.task.family,
        "n": n,
        "successes": successes,
        "success_rate": successes / n,
        "ci_lo": lo,
        "ci_hi": hi,
        "k_steps": k,
        "eval_seed": seed,
    }
    stem = f"eval_seed{seed}_k{k}"
    lines = ["index,episode_seed,success,final_dist"]
    lines += [f"{i},{ep.seed},{int(outcomes[i])},{final_dist[i]:.6f}"
              for i, ep in enumerate(episodes)]
    (run_dir / f"{stem}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (run_dir / f"{stem}.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# ---------------------------------------------------------------------------
# comparison grid
# ---------------------------------------------------------------------------

def _cell_config(base_cfg: RunConfig, family: str, variant: str, encoder_kind: str | None,
                 seed: int, extra: dict | None = None) -> RunConfig:
    flat = config_to_flat(base_cfg)
    flat["task.family"] = family
    flat["variant"] = variant
    flat["encoder.kind"] = encoder_kind if encoder_kind else "none"
    flat["train.seed"] = str(seed)
    flat["dit.aux_len"] = "0"
    flat["dit.aux_raw_dim"] = "0"
    if extra:
        flat.update({key: str(value) for key, value in extra.items()})
    return flat_to_config(flat)


def _column_label(variant: str, encoder_kind: str | None) -> str:
    return "Baseline" if variant == "Baseline" else f"{variant}@{encoder_kind}"


def compare(base_cfg: RunConfig, base_checkpoint, out_dir,
            families=DEFAULT_FAMILIES, variants=("Baseline", "PVI"),
            encoders=("static", "temporal"), rollouts: int | None = None,
            eval_seed: int = 1) -> dict:
    """Train and score a families x (variant@encoder) grid from one base.

    Every cell gets the same training budget and a seed derived only from the
    cell's own coordinates, so results are independent of iteration order.
    """
    out_dir = Path(out_dir)
    columns: list[tuple[str, str | None]] = []
    for variant in variants:
        if variant == "Baseline":
            columns.append(("Baseline", None))
        else:
            columns.extend((variant, enc) for enc in encoders)

    cells: dict[str, dict] = {}
    for family in families:
        for variant, enc in columns:
            label = _column_label(variant, enc)
            cell_seed = derived_seed(base_cfg.train.seed, "cell", family, variant, enc or "none")
            cfg = _cell_config(base_cfg, family, variant, enc, cell_seed)
            run_dir = out_dir / "cells" / f"{family}__{label}"
            train(cfg, base_checkpoint, run_dir)
            summary = evaluate(run_dir, seed=eval_seed, rollouts=rollouts)
            cells[f"{family}/{label}"] = summary
            log.info("compare cell %s/%s: %.3f", family, label, summary["success_rate"])

    labels = [_column_label(v, e) for v, e in columns]
    table_rows = []
    for family in families:
        table_rows.append([family] + [f"{cells[f'{family}/{lab}']['success_rate']:.3f}"
                                      for lab in labels])
    averages = {lab: float(np.mean([cells[f"{fam}/{lab}"]["success_rate"]
                                    for fam in families])) for lab in labels}
    table_rows.append(["average"] + [f"{averages[lab]:.3f}" for lab in labels])
    if "Baseline" in labels:
        base_avg = averages["Baseline"]
        table_rows.append(["delta_vs_Baseline_pp"] +
                          [f"{(averages[lab] - base_avg) * 100.0:+.1f}" for lab in labels])

    result = {
        "families": list(families),
        "columns": labels,
        "cells": cells,
        "averages": averages,
        "base_checkpoint_sha256": file_sha256(base_checkpoint),
        "budget": {"steps": base_cfg.train.steps, "batch": base_cfg.train.batch,
                   "lr": base_cfg.train.lr, "optimizer": base_cfg.train.optimizer},
    }
    header = ",".join(["task"] + labels)
    lines = [header] + [",".join(row) for row in table_rows]
    (out_dir / "compare.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / "compare.json").write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def ablate(kind: str, base_cfg: RunConfig, base_checkpoint, out_dir,
           rollouts: int | None = None, eval_seed: int = 1) -> list[dict]:
    """One ablation axis at a time; everything else pinned to the base config."""
    if kind not in ABLATIONS:
        raise ConfigError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")
    out_dir = Path(out_dir)
    family = base_cfg.task.family
    variant = base_cfg.variant if base_cfg.variant != "Baseline" else "PVI"
    rows: list[dict] = []

    def run_cell(tag: str, encoder_kind: str, extra: dict) -> dict:
        cell_seed = derived_seed(base_cfg.train.seed, "ablate", kind, tag)
        cfg = _cell_config(base_cfg, family, variant, encoder_kind, cell_seed, extra)
        run_dir = out_dir / f"{kind}__{tag}"
        train(cfg, base_checkpoint, run_dir)
        return evaluate(run_dir, seed=eval_seed, rollouts=rollouts)

    if kind == "temporal_context":
        for frames in (2, 4, 8, 16):
            summary = run_cell(f"T{frames}", "temporal", {"encoder.frames": frames})
            rows.append({"setting": f"frames={frames}", "frames": frames, **summary})
    elif kind == "freeze_projector":
        for tag, frozen in (("default", False), ("frozen_projector", True)):
            summary = run_cell(tag, "temporal", {"flags.freeze_projector": str(frozen).lower()})
            rows.append({"setting": tag, "freeze_projector": frozen, **summary})
    elif kind == "no_zero_init":
        for tag, zero in (("default", True), ("no_zero_init", False)):
            summary = run_cell(tag, "temporal", {"flags.zero_init": str(zero).lower()})
            rows.append({"setting": tag, "zero_init": zero, **summary})
    elif kind == "sampler_k":
        cell_seed = derived_seed(base_cfg.train.seed, "ablate", kind, "shared")
        cfg = _cell_config(base_cfg, family, variant, "temporal", cell_seed)
        run_dir = out_dir / f"{kind}__shared"
        train(cfg, base_checkpoint, run_dir)
        for k in (1, 4, 16):
            summary = evaluate(run_dir, seed=eval_seed, rollouts=rollouts, k_steps=k)
            rows.append({"setting": f"k={k}", "k": k, **summary})

    for row in rows:
        log.info("ablate %s [%s]: %.3f", kind, row["setting"], row["success_rate"])
    fields = ["setting", "success_rate", "ci_lo", "ci_hi", "n", "k_steps"]
    lines = [",".join(fields)]
    lines += [",".join(f"{row[f]:.4f}" if isinstance(row[f], float) else str(row[f])
                       for f in fields) for row in rows]
    (out_dir / f"ablate_{kind}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / f"ablate_{kind}.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return rows


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

PARAM_GROUPS = ("vlm_proxy", "main_dit", "adapters", "aux_encoder", "plugin_branch")


def param_report(cfg: RunConfig) -> tuple[str, dict]:
    """Trainable/total parameter counts by functional group for one variant."""
    rng = np.random.default_rng(derived_seed(cfg.train.seed, "init", cfg.variant))
    policy = build_policy(cfg.dit, cfg.variant, rng=rng,
                          zero_init=cfg.flags.zero_init,
                          freeze_projector=cfg.flags.freeze_projector)
    vlm_enc = build_vlm_encoder(cfg)
    aux_enc = build_aux_encoder(cfg)

    groups = {g: {"trainable": 0, "total": 0} for g in PARAM_GROUPS}
    groups["vlm_proxy"]["total"] = vlm_enc.param_count
    if aux_enc is not None:
        groups["aux_encoder"]["total"] = aux_enc.param_count
    trainable_names = set(policy.store.trainable_names())
    for name, tensor in policy.store.items():
        group = param_group(name)
        groups[group]["total"] += tensor.data.size
        if name in trainable_names:
            groups[group]["trainable"] += tensor.data.size

    total = sum(g["total"] for g in groups.values())
    trainable = sum(g["trainable"] for g in groups.values())
    ratio = trainable / total if total else 0.0
    report = {"variant": cfg.variant, "groups": groups,
              "trainable": trainable, "total": total, "ratio": ratio}

    width = max(len(g) for g in PARAM_GROUPS)
    lines = [f"parameter report: {cfg.variant}"
             + (f" @ {cfg.encoder.kind}" if cfg.variant != "Baseline" else ""),
             f"{'group':<{width}}  {'trainable':>10}  {'total':>10}"]
    for group in PARAM_GROUPS:
        entry = groups[group]
        lines.append(f"{group:<{width}}  {entry['trainable']:>10}  {entry['total']:>10}")
    lines.append(f"{'TOTAL':<{width}}  {trainable:>10}  {total:>10}  "
                 f"({100.0 * ratio:.2f}% trainable)")
    return "\n".join(lines) + "\n", report


# ---------------------------------------------------------------------------
# run reporting
# ---------------------------------------------------------------------------

def report(run_dirs) -> str:
    """Human-readable digest of finished runs; audits each one first."""
    blocks = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        cfg, manifest, store = load_run(run_dir)
        metrics = (run_dir / METRICS_NAME).read_text(encoding="utf-8").strip().splitlines()
        last_step, last_loss = metrics[-1].split(",") if len(metrics) > 1 else ("-", "nan")
        lines = [
            f"run {run_dir}",
            f"  variant   {manifest['variant']} (status {manifest['status']})",
            f"  task      {cfg.task.family} (grid {cfg.task.grid}, horizon {cfg.task.horizon})",
            f"  budget    {manifest['budget']['steps']} steps, batch "
            f"{manifest['budget']['batch']}, lr {manifest['budget']['lr']}",
            f"  params    {len(manifest['trainable'])} trainable / "
            f"{len(manifest['trainable']) + len(manifest['frozen'])} tensors",
            f"  last loss {last_loss} (step {last_step})",
        ]
        for eval_json in sorted(run_dir.glob("eval_seed*.json")):
            summary = json.loads(eval_json.read_text(encoding="utf-8"))
            lines.append(f"  eval      {eval_json.name}: {summary['success_rate']:.3f} "
                         f"[{summary['ci_lo']:.3f}, {summary['ci_hi']:.3f}] "
                         f"(n={summary['n']}, K={summary['k_steps']})")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
