"""Benchmark dynamical systems, RK4 integration, and trajectory datasets.

All systems are continuous-time control-affine-ish benchmarks with pinned
parameters (see ``SYSTEM_PARAMS``); integration is classical RK4 with
zero-order-hold controls.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SystemSpec",
    "Trajectory",
    "Dataset",
    "ConfigurationError",
    "IntegrationError",
    "get_system",
    "list_systems",
    "flow",
    "step_rk4",
    "simulate",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

PARAMS_VERSION = 1

# Pinned physical parameters, one dict per system.  Versioned so that
# serialized datasets/models can record which parameter set produced them.
SYSTEM_PARAMS = {
    "double_integrator": {},
    "poly3d": {},
    "cartpole": {"mc": 1.0, "mp": 0.1, "l": 0.5, "g": 9.8},
    # normalized pendulum (time in units of sqrt(l/g)): light damping and
    # torque authority comparable to gravity keep 100-step rollouts
    # well-conditioned in both time directions
    "damping_pendulum": {"m": 1.0, "l": 1.0, "b": 0.1, "g": 1.0},
    "undamped_pendulum": {"m": 1.0, "l": 1.0, "b": 0.0, "g": 9.81},
    "acrobot": {
        "m1": 1.0, "m2": 1.0, "l1": 1.0, "lc1": 0.5, "lc2": 0.5,
        "I1": 1.0, "I2": 1.0, "g": 9.8,
    },
    "planar_quadrotor": {"m": 0.5, "r": 0.25, "I": 0.01, "g": 9.81},
}


class ConfigurationError(ValueError):
    """Unknown system name or inconsistent spec fields."""


class IntegrationError(RuntimeError):
    """Raised when integration produces non-finite states."""


@dataclass(frozen=True)
class SystemSpec:
    """A benchmark system: dimensions, bounds, and integration step."""

    name: str
    n: int
    m: int
    u_lo: np.ndarray
    u_hi: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    dt: float = 0.05

    def __post_init__(self):
        for attr in ("u_lo", "u_hi", "x_lo", "x_hi"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=float))
        if self.n < 1 or self.m < 1:
            raise ConfigurationError("n and m must be >= 1")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if not np.all(self.u_lo < self.u_hi):
            raise ConfigurationError("u_lo must be < u_hi elementwise")
        if not np.all(self.x_lo < self.x_hi):
            raise ConfigurationError("x_lo must be < x_hi elementwise")
        if self.u_lo.shape != (self.m,) or self.x_lo.shape != (self.n,):
            raise ConfigurationError("bound shapes inconsistent with n, m")


@dataclass
class Trajectory:
    """A simulated state/control rollout on a fixed time grid."""

    states: np.ndarray   # (N, n)
    controls: np.ndarray  # (N-1, m)
    dt: float
    truncated: bool = False

    def __len__(self):
        return self.states.shape[0]


@dataclass
class Dataset:
    """Train/validation/test trajectory splits, regenerable from the seed."""

    system: str
    seed: int
    dt: float
    splits: dict = field(default_factory=dict)  # name -> list[Trajectory]

    def __getitem__(self, split):
        return self.splits[split]


def _flow_double_integrator(x, u, p):
    dx = np.empty_like(x)
    dx[..., 0] = x[..., 1]
    dx[..., 1] = u[..., 0]
    return dx


def _flow_poly3d(x, u, p):
    dx = np.empty_like(x)
    x1, x2 = x[..., 0], x[..., 1]
    dx[..., 0] = x2
    dx[..., 1] = -x1 + x2 * (1.0 - x1 ** 2) + u[..., 0]
    dx[..., 2] = x1 * x2 + u[..., 1]
    return dx


def _flow_cartpole(x, u, p):
    # theta = 0 hanging down, theta = pi upright (unstable).
    mc, mp, l, g = p["mc"], p["mp"], p["l"], p["g"]
    th, thd = x[..., 2], x[..., 3]
    f = u[..., 0]
    s, c = np.sin(th), np.cos(th)
    den = mc + mp * s ** 2
    xdd = (f + mp * s * (l * thd ** 2 + g * c)) / den
    thdd = (-f * c - mp * l * thd ** 2 * c * s - (mc + mp) * g * s) / (l * den)
    dx = np.empty_like(x)
    dx[..., 0] = x[..., 1]
    dx[..., 1] = xdd
    dx[..., 2] = thd
    dx[..., 3] = thdd
    return dx


def _flow_pendulum(x, u, p):
    m, l, b, g = p["m"], p["l"], p["b"], p["g"]
    th, om = x[..., 0], x[..., 1]
    dx = np.empty_like(x)
    dx[..., 0] = om
    dx[..., 1] = (u[..., 0] - b * om - m * g * l * np.sin(th)) / (m * l ** 2)
    return dx


def _flow_acrobot(x, u, p):
    m1, m2 = p["m1"], p["m2"]
    l1, lc1, lc2 = p["l1"], p["lc1"], p["lc2"]
    I1, I2, g = p["I1"], p["I2"], p["g"]
    th1, th2, d1dt, d2dt = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    tau = u[..., 0]
    c2, s2 = np.cos(th2), np.sin(th2)
    d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * c2) + I1 + I2
    d2 = m2 * (lc2 ** 2 + l1 * lc2 * c2) + I2
    phi2 = m2 * lc2 * g * np.cos(th1 + th2 - np.pi / 2)
    phi1 = (-m2 * l1 * lc2 * d2dt ** 2 * s2
            - 2 * m2 * l1 * lc2 * d2dt * d1dt * s2
            + (m1 * lc1 + m2 * l1) * g * np.cos(th1 - np.pi / 2)
            + phi2)
    a2 = (tau + (d2 / d1) * phi1 - m2 * l1 * lc2 * d1dt ** 2 * s2 - phi2) / (
        m2 * lc2 ** 2 + I2 - d2 ** 2 / d1)
    a1 = -(d2 * a2 + phi1) / d1
    dx = np.empty_like(x)
    dx[..., 0] = d1dt
    dx[..., 1] = d2dt
    dx[..., 2] = a1
    dx[..., 3] = a2
    return dx


def _flow_quadrotor(x, u, p):
    m, r, I, g = p["m"], p["r"], p["I"], p["g"]
    th = x[..., 2]
    u1, u2 = u[..., 0], u[..., 1]
    dx = np.empty_like(x)
    dx[..., 0] = x[..., 3]
    dx[..., 1] = x[..., 4]
    dx[..., 2] = x[..., 5]
    dx[..., 3] = -(u1 + u2) * np.sin(th) / m
    dx[..., 4] = (u1 + u2) * np.cos(th) / m - g
    dx[..., 5] = r * (u1 - u2) / I
    return dx


_REGISTRY = {
    "double_integrator": (
        _flow_double_integrator,
        dict(n=2, m=1, u_lo=[-1], u_hi=[1], x_lo=[-6, -6], x_hi=[6, 6]),
    ),
    "poly3d": (
        _flow_poly3d,
        dict(n=3, m=2, u_lo=[-1, -1], u_hi=[1, 1],
             x_lo=[-4, -4, -4], x_hi=[4, 4, 4]),
    ),
    "cartpole": (
        _flow_cartpole,
        dict(n=4, m=1, u_lo=[-10], u_hi=[10],
             x_lo=[-4, -5, -2 * np.pi, -8], x_hi=[4, 5, 2 * np.pi, 8]),
    ),
    "damping_pendulum": (
        _flow_pendulum,
        dict(n=2, m=1, u_lo=[-1], u_hi=[1],
             x_lo=[-np.pi, -3], x_hi=[np.pi, 3]),
    ),
    "undamped_pendulum": (
        _flow_pendulum,
        dict(n=2, m=1, u_lo=[-2], u_hi=[2],
             x_lo=[-2 * np.pi, -8], x_hi=[2 * np.pi, 8]),
    ),
    "acrobot": (
        _flow_acrobot,
        dict(n=4, m=1, u_lo=[-4], u_hi=[4],
             x_lo=[-np.pi, -np.pi, -6, -9], x_hi=[np.pi, np.pi, 6, 9]),
    ),
    "planar_quadrotor": (
        _flow_quadrotor,
        dict(n=6, m=2, u_lo=[0, 0], u_hi=[7.5, 7.5],
             x_lo=[-5, -5, -np.pi, -4, -4, -4], x_hi=[5, 5, np.pi, 4, 4, 4]),
    ),
}


def list_systems():
    return sorted(_REGISTRY)


def get_system(name, dt=0.05):
    """Build the SystemSpec for a registered benchmark system."""
    if name not in _REGISTRY:
        raise ConfigurationError(f"unknown system {name!r}; known: {list_systems()}")
    _, kw = _REGISTRY[name]
    return SystemSpec(name=name, dt=dt, **kw)


def flow(spec, x, u):
    """Continuous-time derivative f(x, u); broadcasts over leading axes."""
    if spec.name not in _REGISTRY:
        raise ConfigurationError(f"unknown system {spec.name!r}")
    fn = _REGISTRY[spec.name][0]
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return fn(x, u, SYSTEM_PARAMS[spec.name])


def step_rk4(spec, x, u, delta):
    """One classical RK4 step with zero-order-hold control."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if delta == 0:
        return x.copy()
    k1 = flow(spec, x, u)
    k2 = flow(spec, x + 0.5 * delta * k1, u)
    k3 = flow(spec, x + 0.5 * delta * k2, u)
    k4 = flow(spec, x + delta * k3, u)
    out = x + (delta / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationError(f"non-finite state integrating {spec.name}")
    return out


def simulate(spec, x0, controls, delta=None):
    """Roll out a control sequence; truncates if the state leaves its bounds.

    Returns a Trajectory whose length is ``len(controls) + 1`` unless the
    state exits ``[x_lo, x_hi]``, in which case the trajectory stops at the
    last in-bounds state and ``truncated`` is set.
    """
    if delta is None:
        delta = spec.dt
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    x = np.asarray(x0, dtype=float)
    states = [x]
    used = 0
    truncated = False
    for u in controls:
        x = step_rk4(spec, x, u, delta)
        if np.any(x < spec.x_lo) or np.any(x > spec.x_hi):
            truncated = True
            break
        states.append(x)
        used += 1
    return Trajectory(
        states=np.asarray(states),
        controls=controls[:used].copy(),
        dt=delta,
        truncated=truncated,
    )


def generate_dataset(spec, counts, horizon, seed):
    """Sample trajectory splits with uniform initial states and controls.

    counts: mapping with keys train/val/test (or a 3-tuple in that order).
    Deterministic for a given seed; each split draws from an independent
    child generator so split sizes can change without reshuffling others.
    """
    if not isinstance(counts, dict):
        counts = dict(zip(("train", "val", "test"), counts))
    for k, v in counts.items():
        if v <= 0:
            raise ValueError(f"count for split {k!r} must be positive")
    root = np.random.SeedSequence(seed)
    children = dict(zip(("train", "val", "test"), root.spawn(3)))
    ds = Dataset(system=spec.name, seed=seed, dt=spec.dt)
    for split in ("train", "val", "test"):
        rng = np.random.default_rng(children[split])
        trajs = []
        for _ in range(counts[split]):
            x0 = rng.uniform(spec.x_lo, spec.x_hi)
            u = rng.uniform(spec.u_lo, spec.u_hi, size=(horizon, spec.m))
            trajs.append(simulate(spec, x0, u))
        ds.splits[split] = trajs
    return ds


def save_dataset(ds, out_dir):
    """Persist a dataset: meta.json plus one npz file per split."""
    os.makedirs(out_dir, exist_ok=True)
    spec = get_system(ds.system, dt=ds.dt)
    meta = {
        "system": ds.system,
        "n": spec.n,
        "m": spec.m,
        "dt": ds.dt,
        "seed": ds.seed,
        "params_version": PARAMS_VERSION,
        "counts": {k: len(v) for k, v in ds.splits.items()},
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    for split, trajs in ds.splits.items():
        max_len = max(len(t) for t in trajs)
        states = np.zeros((len(trajs), max_len, spec.n))
        controls = np.zeros((len(trajs), max(max_len - 1, 1), spec.m))
        lengths = np.zeros(len(trajs), dtype=np.int64)
        for i, t in enumerate(trajs):
            states[i, : len(t)] = t.states
            controls[i, : len(t) - 1] = t.controls
            lengths[i] = len(t)
        trunc = np.array([t.truncated for t in trajs], dtype=bool)
        np.savez(os.path.join(out_dir, f"{split}.npz"),
                 states=states, controls=controls, lengths=lengths,
                 truncated=trunc)


def load_dataset(in_dir):
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    ds = Dataset(system=meta["system"], seed=meta["seed"], dt=meta["dt"])
    for split in meta["counts"]:
        with np.load(os.path.join(in_dir, f"{split}.npz")) as z:
            states, controls, lengths = z["states"], z["controls"], z["lengths"]
            trunc = z["truncated"]
        trajs = []
        for i in range(states.shape[0]):
            L = int(lengths[i])
            trajs.append(Trajectory(states=states[i, :L].copy(),
                                    controls=controls[i, : L - 1].copy(),
                                    dt=meta["dt"],
                                    truncated=bool(trunc[i])))
        ds.splits[split] = trajs
    return ds
