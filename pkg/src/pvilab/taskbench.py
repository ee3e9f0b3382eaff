"""Synthetic planar control tasks with known Bayes-optimal structure.

Scenes are P x P grayscale grids containing one Gaussian blob target at a
sub-pixel position; coordinates are normalized so the grid spans [-1, 1]^2.
Actions are H waypoints of a planar effector that starts at the origin;
success is a closed-ball test on the final waypoint against the true
(future) target position.

Families:
* reach: static target, fully solvable from the current frame.
* intercept: target drifts at constant velocity (uniform direction, fixed
  speed); the policy must land on the target's position H ticks ahead, so
  single-frame observers face an irreducible direction ambiguity.
* multiphase: the target moved during the first half of the history window
  and has been at rest since, so the required waypoint depends on a cue that
  is strictly temporal; the rollout must pass the cued waypoint, then stop
  on the target.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import ShapeError
from .encoders import ObservationWindow

FAMILIES = ("reach", "intercept", "multiphase")
BLOB_SIGMA_PX = 1.2
VIEWS = 1
# multiphase waypoint candidates, indexed by phase
WAYPOINTS = (np.array([0.45, 0.0]), np.array([-0.45, 0.0]))


@dataclass(frozen=True)
class TaskSpec:
    family: str
    grid: int = 16
    horizon: int = 8
    noise_std: float = 0.0375
    n_demos: int = 512
    eval_rollouts: int = 100
    success_radius: float = 0.15
    speed: float = 0.06
    hist_frames: int = 8
    state_dim: int = 4

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.grid < 8:
            raise ValueError(f"grid must be >= 8, got {self.grid}")
        if self.horizon < 2 or self.horizon % 2 != 0:
            raise ValueError(f"horizon must be even and >= 2, got {self.horizon}")
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")
        if self.noise_std < 0 or self.speed < 0:
            raise ValueError("noise_std and speed must be >= 0")
        if self.n_demos < 1 or self.eval_rollouts < 1 or self.hist_frames < 1:
            raise ValueError("n_demos, eval_rollouts and hist_frames must be >= 1")

    @property
    def center_bound(self) -> float:
        """Largest |coordinate| at which a blob center stays fully rendered."""
        return 1.0 - 4.0 * (2.0 / self.grid)


@dataclass
class Episode:
    window: ObservationWindow
    family: str
    seed: int
    position: np.ndarray          # target position in the current frame
    velocity: np.ndarray          # per-tick target velocity
    phase: int | None
    waypoint: np.ndarray | None
    goal: np.ndarray              # true future target (success reference)
    oracle: np.ndarray            # (H, 2) noiseless expert actions


def render_frame(grid: int, center: np.ndarray) -> np.ndarray:
    """One grayscale frame with a Gaussian blob at a sub-pixel position."""
    coords = (np.arange(grid) + 0.5) / grid * 2.0 - 1.0
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    sigma = BLOB_SIGMA_PX * 2.0 / grid
    d2 = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _render_window(spec: TaskSpec, positions: list[np.ndarray]) -> np.ndarray:
    frames = np.stack([render_frame(spec.grid, p) for p in positions])
    return frames[None, :, :, :]  # (VIEWS, T, P, P)


def line_oracle(goal: np.ndarray, horizon: int) -> np.ndarray:
    steps = np.arange(1, horizon + 1)[:, None] / horizon
    return steps * goal[None, :]


def multiphase_oracle(waypoint: np.ndarray, goal: np.ndarray, horizon: int) -> np.ndarray:
    mid = horizon // 2
    first = np.arange(1, mid + 1)[:, None] / mid * waypoint[None, :]
    second = waypoint[None, :] + np.arange(1, horizon - mid + 1)[:, None] / (horizon - mid) \
        * (goal - waypoint)[None, :]
    return np.concatenate([first, second], axis=0)


def assemble_episode(spec: TaskSpec, position: np.ndarray, velocity: np.ndarray,
                     phase: int | None, seed: int) -> Episode:
    """Deterministic episode construction from its hidden variables."""
    p = np.asarray(position, dtype=np.float64)
    v = np.asarray(velocity, dtype=np.float64)
    t_hist = spec.hist_frames
    if spec.family == "multiphase":
        if phase not in (0, 1):
            raise ValueError(f"multiphase needs phase 0 or 1, got {phase}")
        mid = t_hist // 2
        positions = [p - v * max(0, mid - j) for j in range(t_hist)]
        waypoint = WAYPOINTS[phase].copy()
        goal = p.copy()
        oracle = multiphase_oracle(waypoint, goal, spec.horizon)
    else:
        positions = [p - v * (t_hist - 1 - j) for j in range(t_hist)]
        waypoint = None
        goal = p + spec.horizon * v
        oracle = line_oracle(goal, spec.horizon)
    window = ObservationWindow(
        frames=_render_window(spec, positions).astype(np.float32),
        state=np.zeros(spec.state_dim, dtype=np.float32),
    )
    return Episode(window=window, family=spec.family, seed=seed, position=p, velocity=v,
                   phase=phase, waypoint=waypoint, goal=goal, oracle=oracle)


def _sample_span_position(rng, bound: float, offsets: np.ndarray) -> np.ndarray:
    """Uniform position such that position + every offset stays inside [-bound, bound]^2."""
    lo = -bound - offsets.min(axis=0)
    hi = bound - offsets.max(axis=0)
    if np.any(hi < lo):
        raise ValueError("task geometry infeasible: swept span exceeds the renderable area")
    return rng.uniform(lo, hi)


def gen_episode(spec: TaskSpec, seed: int) -> Episode:
    rng = np.random.default_rng(seed)
    b = spec.center_bound
    if spec.family == "reach":
        p = rng.uniform(-b, b, size=2)
        return assemble_episode(spec, p, np.zeros(2), None, seed)
    if spec.family == "intercept":
        theta = rng.uniform(0.0, 2.0 * np.pi)
        v = spec.speed * np.array([np.cos(theta), np.sin(theta)])
        ks = np.arange(-(spec.hist_frames - 1), spec.horizon + 1)
        offsets = ks[:, None] * v[None, :]
        p = _sample_span_position(rng, b, offsets)
        return assemble_episode(spec, p, v, None, seed)
    # multiphase: cue direction along the x axis, motion confined to the first half
    phase = int(rng.integers(0, 2))
    v = spec.speed * np.array([1.0, 0.0]) * (1.0 if phase == 0 else -1.0)
    mid = spec.hist_frames // 2
    offsets = np.array([[0.0, 0.0], [-mid * v[0], -mid * v[1]]])
    p = _sample_span_position(rng, b, offsets)
    return assemble_episode(spec, p, v, phase, seed)


def success(actions: np.ndarray, episode: Episode, spec: TaskSpec) -> bool:
    """Closed-ball success test; multiphase additionally requires a waypoint pass."""
    actions = np.asarray(actions)
    if actions.ndim != 2 or actions.shape != (spec.horizon, 2):
        raise ShapeError(f"actions must be ({spec.horizon}, 2), got {actions.shape}")
    eps = spec.success_radius
    if np.linalg.norm(actions[-1] - episode.goal) > eps:
        return False
    if episode.waypoint is not None:
        gaps = np.linalg.norm(actions - episode.waypoint[None, :], axis=1)
        if gaps.min() > eps:
            return False
    return True


def ambiguity_bound(spec: TaskSpec, n_draws: int = 200_000, seed: int = 0) -> float:
    """Monte-Carlo success probability of the Bayes-optimal single-frame policy.

    The policy knows the current target position exactly but only the prior
    over velocity (uniform direction, fixed speed), so it picks the single
    endpoint maximizing the chance of landing within the success radius of
    the true future position. Brute force over guess radii; >= 1e5 draws.
    """
    if spec.family != "intercept":
        raise ValueError(f"ambiguity_bound applies to intercept only, got {spec.family!r}")
    if n_draws < 100_000:
        raise ValueError(f"need at least 1e5 draws for a stable bound, got {n_draws}")
    radius = spec.horizon * spec.speed
    eps = spec.success_radius
    if radius <= eps * 1e-12 or radius == 0.0:
        return 1.0  # point-mass prior: the future position is known exactly
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_draws)
    tx = radius * np.cos(theta)
    ty = radius * np.sin(theta)
    best = 0.0
    for r in np.linspace(0.0, radius, 129):
        hits = (tx - r) ** 2 + ty ** 2 <= eps * eps
        best = max(best, float(hits.mean()))
    return best


def closed_form_intercept_bound(eps: float, radius: float) -> float:
    """Analytic optimum for the circle prior (independent of the Monte Carlo path)."""
    if radius <= 0.0 or eps >= radius:
        return 1.0
    return float(np.arcsin(eps / radius) / np.pi)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    spec: TaskSpec
    seed: int
    windows: np.ndarray  # (n, V, T, P, P) float32
    states: np.ndarray   # (n, state_dim) float32
    actions: np.ndarray  # (n, H, 2) float32

    def __len__(self) -> int:
        return self.windows.shape[0]


def make_dataset(spec: TaskSpec, seed: int) -> Dataset:
    """Noisy expert demonstrations: oracle actions plus Gaussian perturbation."""
    master = np.random.default_rng(np.random.SeedSequence(seed))
    ep_seeds = master.integers(0, 2**62, size=spec.n_demos)
    windows, states, actions = [], [], []
    for ep_seed in ep_seeds:
        ep = gen_episode(spec, int(ep_seed))
        noisy = ep.oracle + master.normal(0.0, spec.noise_std, size=ep.oracle.shape)
        windows.append(ep.window.frames)
        states.append(ep.window.state)
        actions.append(noisy.astype(np.float32))
    return Dataset(spec=spec, seed=seed,
                   windows=np.stack(windows).astype(np.float32),
                   states=np.stack(states).astype(np.float32),
                   actions=np.stack(actions))


def eval_episodes(spec: TaskSpec, seed: int, count: int | None = None) -> list[Episode]:
    """Fresh evaluation episodes, disjoint seed stream from any demo set."""
    count = spec.eval_rollouts if count is None else count
    master = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1)))
    ep_seeds = master.integers(0, 2**62, size=count)
    return [gen_episode(spec, int(s)) for s in ep_seeds]


def save_dataset(ds: Dataset, path) -> None:
    """Header JSON line (task spec, seed, count), then fixed-width little-endian records."""
    header = {"task": asdict(ds.spec), "seed": ds.seed, "count": len(ds), "views": VIEWS}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for i in range(len(ds)):
            fh.write(ds.windows[i].astype("<f4").tobytes())
            fh.write(ds.states[i].astype("<f4").tobytes())
            fh.write(ds.actions[i].astype("<f4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    spec = TaskSpec(**header["task"])
    n = header["count"]
    w_n = VIEWS * spec.hist_frames * spec.grid * spec.grid
    s_n = spec.state_dim
    a_n = spec.horizon * 2
    record = (w_n + s_n + a_n) * 4
    if len(blob) != n * record:
        raise ValueError(f"{path}: expected {n * record} payload bytes, found {len(blob)}")
    windows = np.empty((n, VIEWS, spec.hist_frames, spec.grid, spec.grid), dtype=np.float32)
    states = np.empty((n, s_n), dtype=np.float32)
    actions = np.empty((n, spec.horizon, 2), dtype=np.float32)
    for i in range(n):
        base = i * record
        windows[i] = np.frombuffer(blob, "<f4", w_n, base).reshape(windows.shape[1:])
        states[i] = np.frombuffer(blob, "<f4", s_n, base + w_n * 4)
        actions[i] = np.frombuffer(blob, "<f4", a_n, base + (w_n + s_n) * 4).reshape(spec.horizon, 2)
    return Dataset(spec=spec, seed=header["seed"], windows=windows, states=states, actions=actions)
