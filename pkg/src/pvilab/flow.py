"""Flow-matching objective and fixed-grid Euler sampling for action chunks.

The path is the straight interpolation a_t = (1 - t) * noise + t * action,
the regression target is (action - noise), and sampling integrates the
learned velocity field from pure noise with K uniform Euler steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, mse, no_grad


@dataclass
class FlowBatch:
    """Paired clean actions and noise draws with per-sample flow times."""

    actions: np.ndarray  # (B, H, A)
    noise: np.ndarray    # (B, H, A)
    t: np.ndarray        # (B,) in [0, 1]

    def __post_init__(self):
        self.actions = np.asarray(self.actions)
        self.noise = np.asarray(self.noise)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.actions.ndim != 3:
            raise ShapeError(f"actions must be (B, H, A), got {self.actions.shape}")
        if self.noise.shape != self.actions.shape:
            raise ShapeError(
                f"noise shape {self.noise.shape} must match actions {self.actions.shape}")
        if self.t.shape != (self.actions.shape[0],):
            raise ShapeError(f"t must be ({self.actions.shape[0]},), got {self.t.shape}")
        if self.actions.shape[0] < 1:
            raise ShapeError("empty flow batch")
        if np.any(self.t < 0.0) or np.any(self.t > 1.0):
            raise ValueError("flow times must lie in [0, 1]")


def make_flow_batch(actions: np.ndarray, rng) -> FlowBatch:
    actions = np.asarray(actions)
    noise = rng.standard_normal(actions.shape)
    t = rng.uniform(0.0, 1.0, size=actions.shape[0])
    return FlowBatch(actions, noise, t)


def interpolate(action: np.ndarray, noise: np.ndarray, t: float) -> np.ndarray:
    """Point on the straight path at flow time t; endpoints are exact."""
    action = np.asarray(action)
    noise = np.asarray(noise)
    if action.shape != noise.shape:
        raise ShapeError(f"action {action.shape} and noise {noise.shape} must match")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    return (1.0 - t) * noise + t * action


def interpolate_batch(batch: FlowBatch) -> np.ndarray:
    t = batch.t[:, None, None]
    return (1.0 - t) * batch.noise + t * batch.actions


def fm_loss(policy, batch: FlowBatch, states: np.ndarray, z_vl: np.ndarray,
            z_aux: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of the squared error ||v_hat - (action - noise)||^2.

    `policy` only needs a velocity_batch(states, actions, t, z_vl, z_aux)
    method returning a (B, H, A) Tensor.
    """
    a_t = interpolate_batch(batch)
    v_hat = policy.velocity_batch(states, a_t, batch.t, z_vl, z_aux)
    if v_hat.shape != batch.actions.shape:
        raise ShapeError(
            f"velocity shape {v_hat.shape} must match actions {batch.actions.shape}")
    target = Tensor((batch.actions - batch.noise).astype(v_hat.dtype, copy=False))
    per_elem = mse(v_hat, target)
    # mean over batch of the squared norm = elementwise MSE * (H * A)
    return per_elem * float(batch.actions.shape[1] * batch.actions.shape[2])


def euler_sample(policy, state: np.ndarray, z_vl: np.ndarray, z_aux: np.ndarray | None,
                 k_steps: int, seed: int) -> np.ndarray:
    """Draw one action chunk by integrating the velocity field from noise."""
    out = euler_sample_batch(policy, np.asarray(state)[None, :],
                             np.asarray(z_vl)[None, :, :],
                             None if z_aux is None else np.asarray(z_aux)[None, :, :],
                             k_steps, np.random.default_rng(seed))
    return out[0]


def euler_sample_batch(policy, states: np.ndarray, z_vl: np.ndarray,
                       z_aux: np.ndarray | None, k_steps: int, rng) -> np.ndarray:
    """Vectorized sampler: one Euler chain per row, shared step grid k/K."""
    if k_steps < 1:
        raise ValueError(f"k_steps must be >= 1, got {k_steps}")
    cfg = policy.cfg
    b = states.shape[0]
    a = rng.standard_normal((b, cfg.horizon, cfg.action_dim))
    step = 1.0 / k_steps
    with no_grad():
        for k in range(k_steps):
            t = np.full(b, k / k_steps)
            v = policy.velocity_batch(states, a, t, z_vl, z_aux)
            a = a + step * v.data.astype(np.float64)
    return a
