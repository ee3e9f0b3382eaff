"""Frozen synthetic scene encoders standing in for large pretrained towers.

All encoders are deterministic functions of their construction seed and are
frozen in every training variant: none of their weights ever enters the
policy parameter store. Three structural roles:

* vlm_proxy: current frame squeezed through a narrow saturating bottleneck
  and re-expanded. Deliberately lossy in fine spatial detail.
* static: current frame through a wide frozen net. High spatial fidelity,
  but blind to motion by construction.
* temporal: current frame plus early/late frame-difference channels. The
  difference pathway is linear and keeps first-moment (mean-flow) readouts,
  so target velocity stays linearly decodable downstream.

combined is the token-axis concatenation of static and temporal outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

ENCODER_KINDS = ("vlm_proxy", "static", "temporal", "combined")


@dataclass
class ObservationWindow:
    """frames: (views, T, P, P) grayscale in [0, 1]; state: proprioceptive vector."""

    frames: np.ndarray
    state: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.state = np.asarray(self.state)
        if self.frames.ndim != 4:
            raise ShapeError(f"frames must be (V, T, P, P), got {self.frames.shape}")
        if self.frames.shape[2] != self.frames.shape[3]:
            raise ShapeError(f"frames must be square grids, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    out_len: int
    out_dim: int
    frames: int
    seed: int

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.out_len < 1 or self.out_dim < 1:
            raise ValueError("out_len and out_dim must be >= 1")
        if self.kind in ("vlm_proxy", "static") and self.frames != 1:
            raise ValueError(f"{self.kind} consumes exactly the current frame (frames=1), got {self.frames}")
        if self.kind in ("temporal", "combined") and self.frames < 2:
            raise ValueError(f"{self.kind} needs frames >= 2, got {self.frames}")


def _ortho(rng, n_in: int, n_out: int) -> np.ndarray:
    """(n_in, n_out) with orthonormal rows or columns, whichever fits."""
    if n_in >= n_out:
        q, _ = np.linalg.qr(rng.standard_normal((n_in, n_out)))
        return q
    q, _ = np.linalg.qr(rng.standard_normal((n_out, n_in)))
    return q.T


def _take_window(frames: np.ndarray, t_consume: int) -> np.ndarray:
    """Last t_consume frames along axis 2 of (n, V, T, P, P); nearest-frame pad."""
    t_have = frames.shape[2]
    if t_consume <= t_have:
        return frames[:, :, t_have - t_consume:]
    pad = np.repeat(frames[:, :, :1], t_consume - t_have, axis=2)
    return np.concatenate([pad, frames], axis=2)


def _flat_centered(frame: np.ndarray) -> np.ndarray:
    flat = frame.reshape(frame.shape[0], -1).astype(np.float64)
    return flat - flat.mean(axis=1, keepdims=True)


class _EncoderBase:
    spec: EncoderSpec

    @property
    def out_tokens(self) -> int:
        return self.spec.out_len

    @property
    def out_dim(self) -> int:
        return self.spec.out_dim

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self._arrays())

    def encode(self, window: ObservationWindow) -> np.ndarray:
        return self.encode_batch(window.frames[None])[0]

    def _arrays(self):
        raise NotImplementedError


class VlmProxyEncoder(_EncoderBase):
    """Current frame -> narrow saturated bottleneck -> (out_len, out_dim) tokens."""

    def __init__(self, spec: EncoderSpec, grid: int, views: int = 1,
                 bottleneck: int | None = None, gain: float = 12.0):
        self.spec = spec
        self.grid = grid
        self.views = views
        self.gain = float(gain)
        width = bottleneck if bottleneck is not None else max(1, spec.out_dim // 8)
        if width > spec.out_dim // 4 and spec.out_dim >= 4:
            raise ValueError(f"bottleneck width {width} exceeds out_dim/4 = {spec.out_dim // 4}")
        self.bottleneck = width
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        n_in = views * grid * grid
        self.w1 = _ortho(rng, n_in, width)
        self.b1 = rng.normal(0.0, 0.1, size=width)
        self.w2 = _ortho(rng, width, spec.out_len * spec.out_dim)
        self.b2 = np.zeros(spec.out_len * spec.out_dim)

    def _arrays(self):
        return (self.w1, self.b1, self.w2, self.b2)

    def encode_batch(self, frames: np.ndarray) -> np.ndarray:
        x = _flat_centered(frames[:, :, -1].reshape(frames.shape[0], -1))
        u = np.tanh(self.gain * (x @ self.w1 + self.b1))
        y = u @ self.w2 + self.b2
        return y.reshape(-1, self.spec.out_len, self.spec.out_dim)


class StaticEncoder(_EncoderBase):
    """Current frame through a wide frozen net; no bottleneck, no motion info."""

    def __init__(self, spec: EncoderSpec, grid: int, views: int = 1, hidden: int = 96):
        self.spec = spec
        self.grid = grid
        self.views = views
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        n_in = views * grid * grid
        self.w1 = _ortho(rng, n_in, hidden) * np.sqrt(n_in / hidden)
        self.b1 = rng.normal(0.0, 0.2, size=hidden)
        self.w2 = _ortho(rng, hidden, spec.out_len * spec.out_dim)
        self.b2 = np.zeros(spec.out_len * spec.out_dim)

    def _arrays(self):
        return (self.w1, self.b1, self.w2, self.b2)

    def encode_batch(self, frames: np.ndarray) -> np.ndarray:
        x = _flat_centered(frames[:, :, -1].reshape(frames.shape[0], -1))
        u = np.tanh(x @ self.w1 + self.b1)
        y = u @ self.w2 + self.b2
        return y.reshape(-1, self.spec.out_len, self.spec.out_dim)


class TemporalEncoder(_EncoderBase):
    """Current frame plus early/late frame-difference channels.

    The difference pathway is purely linear and its projection keeps four
    fixed coordinate-moment rows (mean flow of each half-window), so any
    full-rank readout downstream leaves velocity linearly decodable.
    """

    def __init__(self, spec: EncoderSpec, grid: int, views: int = 1,
                 static_hidden: int = 96, diff_feats: int = 64):
        self.spec = spec
        self.grid = grid
        self.views = views
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        n_pix = views * grid * grid
        self.w1 = _ortho(rng, n_pix, static_hidden) * np.sqrt(n_pix / static_hidden)
        self.b1 = rng.normal(0.0, 0.2, size=static_hidden)
        if diff_feats < 4:
            raise ValueError("diff pathway needs at least the 4 moment features")
        coords = (np.arange(grid) + 0.5) / grid * 2.0 - 1.0
        ys, xs = np.meshgrid(coords, coords, indexing="ij")
        xrow = np.tile(xs.reshape(-1), views)
        yrow = np.tile(ys.reshape(-1), views)
        xrow = xrow / np.linalg.norm(xrow)
        yrow = yrow / np.linalg.norm(yrow)
        zeros = np.zeros(n_pix)
        moments = np.stack([
            np.concatenate([xrow, zeros]),  # x-moment of the early diff
            np.concatenate([yrow, zeros]),
            np.concatenate([zeros, xrow]),  # x-moment of the late diff
            np.concatenate([zeros, yrow]),
        ], axis=1)
        rand = _ortho(rng, 2 * n_pix, diff_feats - 4)
        self.wd = np.concatenate([moments, rand], axis=1)
        n_feat = static_hidden + diff_feats
        self.w2 = _ortho(rng, n_feat, spec.out_len * spec.out_dim)
        self.b2 = np.zeros(spec.out_len * spec.out_dim)
        self.static_hidden = static_hidden
        self.diff_feats = diff_feats

    def _arrays(self):
        return (self.w1, self.b1, self.wd, self.w2, self.b2)

    def _features(self, frames: np.ndarray):
        f = _take_window(frames, self.spec.frames)
        n = f.shape[0]
        t = self.spec.frames
        mid = t // 2
        cur = _flat_centered(f[:, :, -1].reshape(n, -1))
        d_early = (f[:, :, mid] - f[:, :, 0]).reshape(n, -1) / max(1, mid)
        d_late = (f[:, :, -1] - f[:, :, mid]).reshape(n, -1) / max(1, t - 1 - mid)
        static_part = np.tanh(cur @ self.w1 + self.b1)
        diff_part = np.concatenate([d_early, d_late], axis=1) @ self.wd
        return static_part, diff_part

    def static_component_batch(self, frames: np.ndarray) -> np.ndarray:
        """Output with the difference pathway zeroed (what a static scene yields)."""
        static_part, diff_part = self._features(frames)
        y = np.concatenate([static_part, np.zeros_like(diff_part)], axis=1) @ self.w2 + self.b2
        return y.reshape(-1, self.spec.out_len, self.spec.out_dim)

    def encode_batch(self, frames: np.ndarray) -> np.ndarray:
        static_part, diff_part = self._features(frames)
        y = np.concatenate([static_part, diff_part], axis=1) @ self.w2 + self.b2
        return y.reshape(-1, self.spec.out_len, self.spec.out_dim)


class CombinedEncoder(_EncoderBase):
    """Token-axis concatenation: static tokens first, then temporal tokens."""

    def __init__(self, spec: EncoderSpec, grid: int, views: int = 1):
        self.spec = spec
        self.grid = grid
        self.views = views
        seeds = np.random.SeedSequence(spec.seed).spawn(2)
        static_spec = EncoderSpec("static", spec.out_len, spec.out_dim, 1,
                                  int(seeds[0].generate_state(1)[0]))
        temporal_spec = EncoderSpec("temporal", spec.out_len, spec.out_dim, spec.frames,
                                    int(seeds[1].generate_state(1)[0]))
        self.static = StaticEncoder(static_spec, grid, views)
        self.temporal = TemporalEncoder(temporal_spec, grid, views)
        if self.static.out_dim != self.temporal.out_dim:
            raise ValueError("combined encoder requires equal out_dim in both sub-encoders")

    @property
    def out_tokens(self) -> int:
        return self.static.out_tokens + self.temporal.out_tokens

    def _arrays(self):
        return self.static._arrays() + self.temporal._arrays()

    def encode_batch(self, frames: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [self.static.encode_batch(frames), self.temporal.encode_batch(frames)], axis=1)


def build_encoder(spec: EncoderSpec, grid: int, views: int = 1, **kwargs) -> _EncoderBase:
    cls = {
        "vlm_proxy": VlmProxyEncoder,
        "static": StaticEncoder,
        "temporal": TemporalEncoder,
        "combined": CombinedEncoder,
    }[spec.kind]
    return cls(spec, grid, views, **kwargs)
