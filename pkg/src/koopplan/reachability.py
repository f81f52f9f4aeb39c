"""Sampling-based reachability over the learned bidirectional surrogate.

Forward/backward flowpipes are built by propagating M sampled
(state, control-sequence) tuples, optionally inflated by projected gradient
ascent that pushes the tuples away from per-slice centroids.  A
TimeInformedSet pairs forward slices with the admissible backward slice
range for a given time cost; shrinking/expanding the cost re-pairs indices
over the persistent flowpipes instead of doing set algebra on point clouds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diku, systems
from .geometry import (PointCloudHull, facet_contains, hnr_sample,
                       hull_contains, intersection_point)

__all__ = [
    "InitialSet", "Flowpipe", "TimeInformedSet", "NoFeasibleEstimate",
    "sample_tuples", "propagate", "adversarial_inflate",
    "build_tis", "shrink_tis", "expand_tis",
]


class NoFeasibleEstimate(RuntimeError):
    """Backward containment scan hit the horizon cap."""


@dataclass
class InitialSet:
    """Box / ellipsoid / point region used as start or goal set."""

    kind: str
    center: np.ndarray
    half_widths: np.ndarray = None   # box semi-extents
    shape: np.ndarray = None         # ellipsoid PD matrix: (x-c)' S^-1 (x-c) <= 1

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.kind == "box":
            self.half_widths = np.asarray(self.half_widths, dtype=float)
            if np.any(self.half_widths <= 0):
                raise ValueError("box half-widths must be positive")
        elif self.kind == "ellipsoid":
            self.shape = np.asarray(self.shape, dtype=float)
            eig = np.linalg.eigvalsh(self.shape)
            if np.any(eig <= 0):
                raise ValueError("ellipsoid shape matrix must be positive definite")
            self._shape_inv = np.linalg.inv(self.shape)
        elif self.kind != "point":
            raise ValueError(f"unknown set kind {self.kind!r}")

    @property
    def dim(self):
        return self.center.size

    def contains(self, x, tol=1e-9):
        x = np.asarray(x, dtype=float)
        v = x - self.center
        if self.kind == "point":
            return bool(np.max(np.abs(v)) <= tol)
        if self.kind == "box":
            return bool(np.all(np.abs(v) <= self.half_widths + tol))
        return float(v @ self._shape_inv @ v) <= 1.0 + tol

    def sample(self, rng, count):
        if self.kind == "point":
            return np.tile(self.center, (count, 1))
        if self.kind == "box":
            return rng.uniform(self.center - self.half_widths,
                               self.center + self.half_widths,
                               size=(count, self.dim))
        # ellipsoid: rejection from the axis-aligned bounding box
        hw = np.sqrt(np.diag(self.shape))
        out = np.empty((count, self.dim))
        got, tries = 0, 0
        while got < count:
            cand = rng.uniform(self.center - hw, self.center + hw,
                               size=(count, self.dim))
            v = cand - self.center
            ok = np.einsum("ij,jk,ik->i", v, self._shape_inv, v) <= 1.0
            take = cand[ok][: count - got]
            out[got: got + take.shape[0]] = take
            got += take.shape[0]
            tries += count
            if tries > 1_000_000:
                raise RuntimeError("ellipsoid rejection sampling stalled")
        return out

    def project(self, x):
        """Project points onto the set (clamping / radial scaling)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "point":
            return np.tile(self.center, (x.shape[0], 1))
        if self.kind == "box":
            return np.clip(x, self.center - self.half_widths,
                           self.center + self.half_widths)
        v = x - self.center
        q = np.einsum("ij,jk,ik->i", v, self._shape_inv, v)
        scale = np.where(q > 1.0, 1.0 / np.sqrt(np.maximum(q, 1e-300)), 1.0)
        return self.center + v * scale[:, None]


@dataclass
class Flowpipe:
    """Time-indexed point-cloud slices plus the tuples that generated them."""

    direction: str               # 'forward' | 'backward'
    dt: float
    slices: list                 # k -> (M_k, n) array
    x0: np.ndarray               # latest-generation initial states (M, n)
    controls: np.ndarray         # latest-generation controls (M, T, m)
    carry: np.ndarray            # propagation state at the last slice
    uses_model: bool
    dropped: int = 0
    # Surrogate-error margin: each slice set is the point-cloud hull fattened
    # by an L1 ball of this radius, absorbing model-vs-true discrepancy that
    # input-space inflation alone cannot cover.
    margin: float = 0.0
    _hulls: dict = field(default_factory=dict, repr=False)

    @property
    def n_steps(self):
        return len(self.slices) - 1

    def anchor(self, k):
        """A propagated trajectory point guaranteed inside slice k's hull."""
        return self.slices[k][0]

    def slice_hull(self, k):
        if k not in self._hulls:
            self._hulls[k] = PointCloudHull(self.slices[k]).reduced()
        return self._hulls[k]

    def invalidate(self, k=None):
        if k is None:
            self._hulls.clear()
        else:
            self._hulls.pop(k, None)


def sample_tuples(iset, spec, M, horizon_steps, rng, hold_control=False):
    """M i.i.d. (state, control-sequence) tuples.

    States are uniform in the set; controls are per-step uniform in the
    control box, or a single held value per tuple when hold_control is set.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    X0 = iset.sample(rng, M)
    if hold_control:
        u = rng.uniform(spec.u_lo, spec.u_hi, size=(M, 1, spec.m))
        U = np.tile(u, (1, max(horizon_steps, 1), 1))[:, :horizon_steps]
    else:
        U = rng.uniform(spec.u_lo, spec.u_hi, size=(M, horizon_steps, spec.m))
    return X0, U


def _step(model, spec, z_or_x, u, direction, dt, uses_model):
    if uses_model:
        if direction == "forward":
            return diku.forward_step(model, z_or_x, u)
        return diku.backward_step(model, z_or_x, u)
    return systems.step_rk4(spec, z_or_x, u, dt)


def propagate(tuples, steps, direction, model=None, spec=None, dt=0.05):
    """Propagate tuples into a Flowpipe.

    With a model, states are lifted once and stepped in the lifted space
    (backward uses the exact inverse step); true-dynamics mode (spec only)
    integrates forward with RK4.  Tuples that go non-finite are dropped and
    counted.
    """
    X0, U = tuples
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    U = np.asarray(U, dtype=float)
    if U.ndim == 2:
        U = U[None]
    uses_model = model is not None
    if not uses_model:
        if direction != "forward":
            raise ValueError("true-dynamics propagation is forward only")
        if spec is None:
            raise ValueError("need a model or a system spec")
    if steps > U.shape[1]:
        raise ValueError("not enough control columns for requested steps")
    carry = diku.lift(model, X0) if uses_model else X0.copy()
    slices = [X0.copy()]
    alive = np.ones(X0.shape[0], dtype=bool)
    for k in range(steps):
        carry = _step(model, spec, carry, U[:, k], direction, dt, uses_model)
        bad = ~np.all(np.isfinite(carry), axis=1)
        if np.any(bad):
            alive &= ~bad
            carry[bad] = 0.0
        slices.append(diku.recover(model, carry) if uses_model else carry.copy())
    dropped = int((~alive).sum())
    if dropped:
        if not np.any(alive):
            raise FloatingPointError("all tuples diverged during propagation")
        slices = [s[alive] for s in slices]
        X0, U = X0[alive], U[alive]
        carry = carry[alive]
    return Flowpipe(direction=direction, dt=dt, slices=slices, x0=X0.copy(),
                    controls=U[:, :steps].copy(), carry=carry,
                    uses_model=uses_model, dropped=dropped)


def _rollout_gradient(model, fp, eta, normalize_grad):
    """One ascent step of the mean squared distance from slice centroids."""
    T = fp.n_steps
    preds = np.stack(fp.slices[1:], axis=1)          # (M, T, n) latest union
    M = fp.x0.shape[0]
    preds = preds[-M:] if preds.shape[0] != M else preds
    centroids = np.stack([s.mean(axis=0) for s in fp.slices[1:]], axis=0)
    gX = 2.0 * (preds - centroids[None]) / T
    if fp.direction == "forward":
        _, gx0, gU = diku.forward_rollout_grads(model, fp.x0, fp.controls, gX)
    else:
        # backcast chain: prediction at array index k is chronologically the
        # k-th past state; reuse the backward sweep with controls as stored.
        _, gx0, gU = _backcast_grads(model, fp.x0, fp.controls, gX)
    if normalize_grad:
        g_norm = np.sqrt(np.mean(gx0 ** 2) + np.mean(gU ** 2))
        p_norm = np.sqrt(np.mean(fp.x0 ** 2) + np.mean(fp.controls ** 2))
        if g_norm > 0:
            scale = p_norm / g_norm
            gx0, gU = gx0 * scale, gU * scale
    return fp.x0 + eta * gx0, fp.controls + eta * gU


def _backcast_grads(model, x_start, U, gX):
    # The flowpipe's backward chain consumes controls in column order; map it
    # onto the time-indexed backcast sweep by flipping the control axis.
    Ur = U[:, ::-1]
    gXr = gX[:, ::-1]
    grads, gx, gUr = diku.backward_rollout_grads(model, x_start, Ur, gXr)
    return grads, gx, gUr[:, ::-1]


def adversarial_inflate(fp, iset, model, spec, eta, rounds=1,
                        normalize_grad=False, margin=0.0):
    """Inflate a flowpipe by adversarially re-sampled tuples.

    Each round takes one projected gradient-ascent step on the tuples,
    re-propagates them, and unions the new trajectories into every slice,
    so inflation can only grow each slice.  ``margin`` additionally fattens
    every slice by an L1 ball (added to the flowpipe's existing margin),
    covering surrogate prediction error that no admissible input can
    reproduce.  Returns a new Flowpipe.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if not fp.uses_model:
        raise ValueError("inflation requires a model-propagated flowpipe")
    slices = [s.copy() for s in fp.slices]
    cur = fp
    for _ in range(rounds):
        x0_new, U_new = _rollout_gradient(model, cur, eta, normalize_grad)
        x0_new = iset.project(x0_new)
        U_new = np.clip(U_new, spec.u_lo, spec.u_hi)
        cur = propagate((x0_new, U_new), cur.n_steps, fp.direction,
                        model=model, spec=spec, dt=fp.dt)
        for k in range(len(slices)):
            slices[k] = np.vstack([slices[k], cur.slices[k]])
    return Flowpipe(direction=fp.direction, dt=fp.dt, slices=slices,
                    x0=cur.x0, controls=cur.controls, carry=cur.carry,
                    uses_model=True, dropped=fp.dropped + cur.dropped,
                    margin=fp.margin + margin)


@dataclass
class TimeInformedSet:
    """Paired forward/backward flowpipes for a given time cost.

    On the dt grid, forward slice k is admissible with backward slices
    j in [0, n_steps - k]; membership in the slice-k region means lying in
    the forward hull and at least one admissible backward hull.
    """

    cost: float
    forward: Flowpipe
    backward: Flowpipe
    dt: float
    degenerate: bool = False
    _feasible: dict = field(default_factory=dict, repr=False)
    _chains: dict = field(default_factory=dict, repr=False)
    _rng: np.random.Generator = None

    @property
    def n_steps(self):
        return int(round(self.cost / self.dt))

    def max_backward_index(self, k):
        return self.n_steps - k

    def pair_feasible(self, k, j, tol=1e-7):
        """Cached intersection test of forward slice k and backward slice j;
        returns (bool, witness point or None)."""
        key = (k, j)
        if key not in self._feasible:
            pt = intersection_point(self.forward.slice_hull(k),
                                    self.backward.slice_hull(j), tol=tol)
            self._feasible[key] = (pt is not None, pt)
        return self._feasible[key]

    def slice_membership(self, x, k, tol=1e-7):
        """x belongs to the admissible region at forward grid index k.

        Each side is tested against its margin-fattened slice set: the hull
        membership tolerance absorbs the flowpipe's L1 margin exactly.
        """
        if k > self.n_steps or k < 0:
            return False
        if not hull_contains(self.forward.slice_hull(k), x,
                             tol=tol + self.forward.margin):
            return False
        # scan from the largest admissible backcast depth down: states on
        # near-time-optimal paths sit in the deepest backward slices
        for j in range(self.max_backward_index(k), -1, -1):
            if hull_contains(self.backward.slice_hull(j), x,
                             tol=tol + self.backward.margin):
                return True
        return False

    def sample_in_pair(self, k, j, rng, burn_in=50, thin=5, tol=1e-7):
        """Hit-and-run sample from forward-slice-k ∩ backward-slice-j.

        The chain for each pair persists across calls: the first draw pays
        the full burn-in from a feasible start, later draws continue the
        warm chain with `thin` fresh steps.
        """
        ok, witness = self.pair_feasible(k, j, tol=tol)
        if not ok:
            raise ValueError(f"pair ({k}, {j}) has empty intersection")
        hulls = [self.forward.slice_hull(k), self.backward.slice_hull(j)]
        warm = self._chains.get((k, j))
        if warm is not None:
            x = hnr_sample(hulls, warm, rng, burn_in=thin, thin=1)
        else:
            def inside(h, p):
                fc = facet_contains(h, p)
                return hull_contains(h, p, tol=tol) if fc is None else fc
            start = 0.5 * (hulls[0].centroid + hulls[1].centroid)
            for _ in range(80):
                if all(inside(h, start) for h in hulls):
                    break
                start = 0.5 * (start + witness)
            else:
                start = witness
            x = hnr_sample(hulls, start, rng, burn_in=burn_in, thin=thin)
        self._chains[(k, j)] = x
        return x


def build_tis(x0, goal, model, spec, M=1000, eta_fwd=0.015, eta_bwd=0.04,
              dt=0.05, T_max=5.0, rng=None, rounds=1, hold_control=False,
              normalize_grad=False, tol=1e-7, margin_fwd=0.2, margin_bwd=0.2):
    """Estimate the minimum time cost and assemble the paired flowpipes.

    Backcasts M goal tuples until the start state enters the backward hull
    (cost = elapsed backward time), forecasts M tuples from the start over
    that cost, inflates both, and returns the TimeInformedSet.  The cost
    scan uses the raw (unmargined) hulls, so the estimate stays on the
    conservative side; the margins only fatten the assembled slice sets.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x0 = np.asarray(x0, dtype=float)
    max_steps = int(round(T_max / dt))
    Xg, Ug = sample_tuples(goal, spec, M, max_steps, rng, hold_control)
    if goal.contains(x0):
        fp = propagate((Xg, Ug), 0, "backward", model=model, spec=spec, dt=dt)
        return TimeInformedSet(0.0, fp, fp, dt, degenerate=True, _rng=rng)
    # Step the backward chain until the start state is contained.
    z = diku.lift(model, Xg)
    slices = [Xg.copy()]
    cost_idx = -1
    for j in range(max_steps):
        z = diku.backward_step(model, z, Ug[:, j])
        slices.append(diku.recover(model, z))
        if hull_contains(PointCloudHull(slices[-1]).reduced(), x0, tol=tol):
            cost_idx = j + 1
            break
    if cost_idx < 0:
        raise NoFeasibleEstimate(
            f"start not contained in backward hulls within T_max={T_max}")
    bwd = Flowpipe(direction="backward", dt=dt, slices=slices,
                   x0=Xg, controls=Ug[:, :cost_idx].copy(), carry=z,
                   uses_model=True)
    cost = cost_idx * dt
    start_set = InitialSet("point", x0)
    Xs, Us = sample_tuples(start_set, spec, M, cost_idx, rng, hold_control)
    fwd = propagate((Xs, Us), cost_idx, "forward", model=model, spec=spec, dt=dt)
    fwd = adversarial_inflate(fwd, start_set, model, spec, eta_fwd,
                              rounds=rounds, normalize_grad=normalize_grad,
                              margin=margin_fwd)
    bwd = adversarial_inflate(bwd, goal, model, spec, eta_bwd,
                              rounds=rounds, normalize_grad=normalize_grad,
                              margin=margin_bwd)
    return TimeInformedSet(cost, fwd, bwd, dt, _rng=rng)


def shrink_tis(tis, cost_new):
    """Re-pair the stored flowpipes for a smaller cost."""
    if cost_new <= 0:
        raise ValueError("cost_new must be positive")
    if cost_new >= tis.cost:
        raise ValueError("shrink requires cost_new < current cost")
    out = TimeInformedSet(cost_new, tis.forward, tis.backward, tis.dt,
                          _rng=tis._rng)
    out._feasible = tis._feasible  # shared caches; pairs are index-identical
    out._chains = tis._chains
    return out


def expand_tis(tis, cost_new, model=None, spec=None):
    """Re-pair for a larger cost, extending flowpipes by propagation
    (with freshly drawn controls) when the stored horizon is too short."""
    if cost_new <= tis.cost:
        raise ValueError("expand requires cost_new > current cost")
    n_new = int(round(cost_new / tis.dt))
    for fp in (tis.forward, tis.backward):
        if fp.n_steps < n_new:
            if model is None or spec is None:
                raise ValueError("expansion beyond stored horizon needs model+spec")
            _extend(fp, n_new - fp.n_steps, model, spec, tis._rng)
    out = TimeInformedSet(cost_new, tis.forward, tis.backward, tis.dt,
                          _rng=tis._rng)
    out._feasible = tis._feasible
    out._chains = tis._chains
    return out


def _extend(fp, extra, model, spec, rng):
    if rng is None:
        rng = np.random.default_rng(0)
    M = fp.carry.shape[0]
    U_extra = rng.uniform(spec.u_lo, spec.u_hi, size=(M, extra, spec.m))
    carry = fp.carry
    for k in range(extra):
        carry = _step(model, spec, carry, U_extra[:, k], fp.direction, fp.dt,
                      fp.uses_model)
        fp.slices.append(diku.recover(model, carry) if fp.uses_model
                         else carry.copy())
    fp.carry = carry
    fp.controls = np.concatenate([fp.controls, U_extra], axis=1)
