"""Time-informed sampling-based kinodynamic planning.

The tree is grown SST-style: random control shooting for extension, witness
sparsification for pruning dominated nodes.  The informed planner restricts
most samples to time-slice intersections of the TimeInformedSet via
hit-and-run, shrinks the set and prunes the tree on improvement, and expands
the admissible cost when a round fails to reach the goal.  A plain baseline
uses the identical machinery with heuristic sampling disabled.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import systems
from .reachability import InitialSet, build_tis, expand_tis, shrink_tis

__all__ = [
    "PlanProblem", "PlannerConfig", "PlanTree", "PlanResult",
    "collision_check", "skmp_extend", "tree_growth", "prune",
    "plan", "plan_sst_baseline", "load_problem", "solution_controls",
]

# Versioned per-system SST radii (delta_bn, delta_s); systems without an
# entry fall back to fractions of the state-range norm.
SST_RADII = {
    "double_integrator": (0.5, 0.25),
    "poly3d": (0.5, 0.25),
    "damping_pendulum": (0.6, 0.3),
    "cartpole": (0.8, 0.4),
    "acrobot": (0.8, 0.4),
    "planar_quadrotor": (0.8, 0.4),
}


@dataclass
class PlanProblem:
    spec: systems.SystemSpec
    x0: np.ndarray
    goal: InitialSet
    obstacles: list = field(default_factory=list)   # [(lo, hi) boxes]
    projection: np.ndarray = None                   # state -> workspace

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.obstacles = [(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
                          for lo, hi in self.obstacles]
        if collision_check(self.x0[None], self.obstacles, self.projection):
            raise ValueError("start state is in collision")


@dataclass
class PlannerConfig:
    iterations: int = 500        # N per growth round
    mu: float = 0.9              # heuristic-sampling probability
    eps: float = 0.01            # relative-improvement termination
    delta2: float = 0.5          # cost expansion increment [s]
    delta_bn: float = None       # selection radius (per-system default)
    delta_s: float = None        # witness radius
    min_prop_steps: int = 1
    max_prop_steps: int = 10
    seed: int = 0
    max_rounds: int = 60
    max_time: float = 120.0
    # TIS / reachability knobs
    M: int = 1000
    eta_fwd: float = 0.015
    eta_bwd: float = 0.04
    T_max: float = 5.0
    tis_rounds: int = 1
    hold_control: bool = False   # held controls spread samples ballistically
    hnr_burn_in: int = 15
    hnr_thin: int = 3

    def __post_init__(self):
        if not (0.0 <= self.mu <= 1.0):
            raise ValueError("mu must be in [0, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def radii(self, spec):
        if self.delta_bn is not None and self.delta_s is not None:
            return self.delta_bn, self.delta_s
        if spec.name in SST_RADII:
            return SST_RADII[spec.name]
        rng_norm = float(np.linalg.norm(spec.x_hi - spec.x_lo))
        return 0.2 * rng_norm, 0.1 * rng_norm


def collision_check(states, obstacles, projection=None):
    """True iff any (projected) sample lies inside any obstacle box.

    The caller supplies states at integrator resolution; grazing contacts
    between samples are accepted by contract.
    """
    if not obstacles:
        return False
    pts = np.atleast_2d(np.asarray(states, dtype=float))
    if projection is not None:
        pts = pts @ np.asarray(projection, dtype=float).T
    for lo, hi in obstacles:
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        if np.any(inside):
            return True
    return False


class PlanTree:
    """SST search tree with witness-based sparsification."""

    def __init__(self, x0, delta_bn, delta_s):
        n = np.asarray(x0).size
        self._buf = np.zeros((256, n))
        self._buf[0] = x0
        self.size = 1
        self.cost = [0.0]
        self.parent = [-1]
        self.controls = [None]       # incoming control segment (k, m)
        self.active = [True]
        self.removed = [False]
        self.children = [0]
        self.delta_bn = delta_bn
        self.delta_s = delta_s
        self.witness_pts = np.zeros((64, n))
        self.witness_pts[0] = x0
        self.witness_rep = [0]
        self.n_witness = 1
        self.goal_nodes = set()
        self.first_solution = None   # (wall time, cost)
        self.t0 = time.perf_counter()

    # -- storage helpers ---------------------------------------------------

    @property
    def states(self):
        return self._buf[: self.size]

    def _append_state(self, x):
        if self.size == self._buf.shape[0]:
            self._buf = np.vstack([self._buf, np.zeros_like(self._buf)])
        self._buf[self.size] = x
        self.size += 1

    def _append_witness(self, x, rep):
        if self.n_witness == self.witness_pts.shape[0]:
            self.witness_pts = np.vstack([self.witness_pts,
                                          np.zeros_like(self.witness_pts)])
        self.witness_pts[self.n_witness] = x
        self.witness_rep.append(rep)
        self.n_witness += 1

    def add_node(self, x, cost, parent, controls):
        self._append_state(x)
        self.cost.append(cost)
        self.parent.append(parent)
        self.controls.append(controls)
        self.active.append(True)
        self.removed.append(False)
        self.children.append(0)
        self.children[parent] += 1
        return self.size - 1

    def n_nodes(self):
        return sum(1 for r in self.removed if not r)

    def active_mask(self):
        return np.asarray(self.active) & ~np.asarray(self.removed)

    # -- SST bookkeeping ---------------------------------------------------

    def deactivate(self, idx):
        self.active[idx] = False
        self._trim_from(idx)

    def _trim_from(self, idx):
        # remove chains of inactive leaves; recorded solutions are kept
        while idx >= 0 and not self.active[idx] and not self.removed[idx] \
                and self.children[idx] == 0 and idx not in self.goal_nodes:
            self.removed[idx] = True
            self.goal_nodes.discard(idx)
            p = self.parent[idx]
            if p >= 0:
                self.children[p] -= 1
            idx = p

    def remove_subtree(self, idx):
        stack = [idx]
        kids = {}
        for j in range(self.size):
            if not self.removed[j] and self.parent[j] >= 0:
                kids.setdefault(self.parent[j], []).append(j)
        while stack:
            j = stack.pop()
            if self.removed[j]:
                continue
            self.removed[j] = True
            self.active[j] = False
            self.goal_nodes.discard(j)
            p = self.parent[j]
            if p >= 0 and not self.removed[p]:
                self.children[p] -= 1
            stack.extend(kids.get(j, []))

    def rebuild_witnesses(self):
        """Re-derive the witness set from surviving nodes, cheapest first."""
        self.n_witness = 0
        self.witness_rep = []
        order = sorted((self.cost[i], i) for i in range(self.size)
                       if not self.removed[i] and self.active[i])
        for _, i in order:
            x = self._buf[i]
            w = self._nearest_witness(x)
            if w is None or np.linalg.norm(self.witness_pts[w] - x) > self.delta_s:
                self._append_witness(x, i)
            # later (costlier) nodes within an occupied witness ball lose
            elif self.cost[i] > self.cost[self.witness_rep[w]]:
                self.active[i] = False
        for i in range(self.size):
            if not self.removed[i] and not self.active[i]:
                self._trim_from(i)

    def _nearest_witness(self, x):
        if self.n_witness == 0:
            return None
        d = np.linalg.norm(self.witness_pts[: self.n_witness] - x, axis=1)
        return int(np.argmin(d))

    def best_goal(self):
        live = [i for i in self.goal_nodes if not self.removed[i]]
        if not live:
            return None, np.inf
        i = min(live, key=lambda j: self.cost[j])
        return i, self.cost[i]


def skmp_extend(tree, problem, x_new, rng, config, t_hint=None):
    """One SST extension toward x_new: best-cost active node nearby (nearest
    otherwise), random constant control for a random duration, witness-based
    acceptance.  Returns the new node index or None."""
    spec = problem.spec
    mask = tree.active_mask()
    if t_hint is not None:
        mask = mask & (np.asarray(tree.cost) <= t_hint + 1e-9)
    idxs = np.flatnonzero(mask)
    if idxs.size == 0:
        idxs = np.flatnonzero(tree.active_mask())
    d = np.linalg.norm(tree.states[idxs] - x_new, axis=1)
    near = idxs[d <= tree.delta_bn]
    if near.size:
        src = int(near[np.argmin(np.asarray(tree.cost)[near])])
    else:
        src = int(idxs[np.argmin(d)])

    k = int(rng.integers(config.min_prop_steps, config.max_prop_steps + 1))
    u = rng.uniform(spec.u_lo, spec.u_hi)
    traj = systems.simulate(spec, tree.states[src], np.tile(u, (k, 1)))
    if traj.truncated:
        return None
    if collision_check(traj.states, problem.obstacles, problem.projection):
        return None
    x_end = traj.states[-1]
    cost_new = tree.cost[src] + k * spec.dt

    w = tree._nearest_witness(x_end)
    if w is not None and np.linalg.norm(tree.witness_pts[w] - x_end) <= tree.delta_s:
        rep = tree.witness_rep[w]
        if not tree.removed[rep] and tree.cost[rep] <= cost_new:
            return None
        node = tree.add_node(x_end, cost_new, src, traj.controls)
        if not tree.removed[rep]:
            tree.deactivate(rep)
        tree.witness_rep[w] = node
    else:
        node = tree.add_node(x_end, cost_new, src, traj.controls)
        tree._append_witness(x_end, node)

    if problem.goal.contains(x_end):
        tree.goal_nodes.add(node)
        if tree.first_solution is None:
            tree.first_solution = (time.perf_counter() - tree.t0, cost_new)
    return node


def tree_growth(tree, cost, tis, problem, config, rng):
    """One round of N extensions, sampling inside the TIS with probability mu.

    Returns (cost_new, stats); cost_new is the best goal cost or inf.
    """
    spec = problem.spec
    n_steps = tis.n_steps if tis is not None else 0
    stats = {"heuristic": 0, "heuristic_accepted": 0, "uniform": 0,
             "fallback": 0}
    for _ in range(config.iterations):
        x_new, t_hint = None, None
        if tis is not None and not tis.degenerate and rng.random() < config.mu:
            k = int(round(rng.uniform(0.0, cost) / tis.dt))
            k = min(k, n_steps)
            feasible = []
            for j in range(tis.max_backward_index(k), -1, -1):
                ok, _ = tis.pair_feasible(k, j)
                if not ok:
                    break
                feasible.append(j)
            if feasible:
                j_bar = int(feasible[int(rng.integers(len(feasible)))])
                x_new = tis.sample_in_pair(k, j_bar, rng,
                                           burn_in=config.hnr_burn_in,
                                           thin=config.hnr_thin)
                t_hint = k * tis.dt
                stats["heuristic"] += 1
            else:
                stats["fallback"] += 1
        if x_new is None:
            x_new = rng.uniform(spec.x_lo, spec.x_hi)
            stats["uniform"] += 1
        node = skmp_extend(tree, problem, x_new, rng, config, t_hint=t_hint)
        if node is not None and t_hint is not None:
            stats["heuristic_accepted"] += 1
    _, cost_new = tree.best_goal()
    return cost_new, stats


def prune(tree, tis, cost):
    """Drop nodes whose cost exceeds the incumbent or whose state fails
    membership in its own time-slice region; subtrees go with them.  The
    incumbent solution path is exempt: the informed set is model-based and
    approximate, and must never invalidate an already verified solution."""
    tol = 1e-9
    protected = set()
    best, _ = tree.best_goal()
    i = best
    while i is not None and i >= 0:
        protected.add(i)
        i = tree.parent[i]
    for i in range(tree.size):
        if tree.removed[i] or i == 0 or i in protected:
            continue
        if tree.cost[i] > cost + tol:
            tree.remove_subtree(i)
    for i in range(1, tree.size):
        if tree.removed[i] or i in protected:
            continue
        k = int(round(tree.cost[i] / tis.dt))
        if not tis.slice_membership(tree.states[i], k):
            tree.remove_subtree(i)
    assert not tree.removed[0], "root must survive pruning"
    tree.rebuild_witnesses()
    return tree


@dataclass
class PlanResult:
    tree: PlanTree
    solution_node: int
    metrics: dict
    events: list


def _finish(tree, problem, t0, tis_time, rounds, events, flagged):
    node, c_op = tree.best_goal()
    t_in, c_in = (tree.first_solution if tree.first_solution else (np.inf, np.inf))
    metrics = {
        "T_IN": t_in,
        "C_IN": c_in,
        "T_OP": time.perf_counter() - t0,
        "C_OP": c_op,
        "N_node": tree.n_nodes(),
        "tis_time": tis_time,
        "rounds": rounds,
        "best_effort": flagged,
    }
    return PlanResult(tree, node if node is not None else -1, metrics, events)


def plan(problem, model, config):
    """Online time-informed planning loop.

    Builds the TIS for an initial cost estimate, alternates growth rounds
    with shrink+prune on improvement or cost expansion on failure, and stops
    once the relative cost change falls within eps.
    """
    spec = problem.spec
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    tis = build_tis(problem.x0, problem.goal, model, spec, M=config.M,
                    eta_fwd=config.eta_fwd, eta_bwd=config.eta_bwd,
                    dt=spec.dt, T_max=config.T_max, rng=rng,
                    rounds=config.tis_rounds, hold_control=config.hold_control)
    tis_time = time.perf_counter() - t0
    cost = tis.cost
    events = [("tis_built", cost, tis_time)]
    delta_bn, delta_s = config.radii(spec)
    tree = PlanTree(problem.x0, delta_bn, delta_s)
    tree.t0 = t0
    if tis.degenerate:
        return _finish(tree, problem, t0, tis_time, 0, events, False)
    flagged = False
    rounds = 0
    while True:
        if rounds >= config.max_rounds or time.perf_counter() - t0 > config.max_time:
            flagged = True
            break
        rounds += 1
        cost_entry = cost
        cost_new, stats = tree_growth(tree, cost, tis, problem, config, rng)
        events.append(("growth", rounds, cost_new, stats))
        if np.isfinite(cost_new):
            if cost_new < cost_entry:
                cost = cost_new
                if cost < tis.cost:
                    tis = shrink_tis(tis, cost)
                prune(tree, tis, cost)
                events.append(("shrink_prune", cost, tree.n_nodes()))
            elif cost_new > tis.cost:
                cost = cost_new
                tis = expand_tis(tis, cost, model, spec)
                events.append(("expand_to_solution", cost))
            else:
                cost = cost_new
        else:
            cost = cost_entry + config.delta2
            tis = expand_tis(tis, cost, model, spec)
            events.append(("expand", cost))
        if (np.isfinite(cost_entry) and tree.first_solution is not None
                and abs(cost - cost_entry) / cost_entry <= config.eps):
            break
    return _finish(tree, problem, t0, tis_time, rounds, events, flagged)


def plan_sst_baseline(problem, config):
    """Plain SST: identical machinery, uniform sampling only, no TIS/prune."""
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    delta_bn, delta_s = config.radii(problem.spec)
    tree = PlanTree(problem.x0, delta_bn, delta_s)
    tree.t0 = t0
    cfg = config
    events = []
    flagged = False
    rounds = 0
    cost = np.inf
    while True:
        if rounds >= cfg.max_rounds or time.perf_counter() - t0 > cfg.max_time:
            flagged = True
            break
        rounds += 1
        cost_entry = cost
        cost_new, stats = tree_growth(tree, 0.0, None, problem,
                                      PlannerConfig(**{**cfg.__dict__, "mu": 0.0}),
                                      rng)
        events.append(("growth", rounds, cost_new, stats))
        if np.isfinite(cost_new):
            cost = cost_new
        if (np.isfinite(cost_entry) and np.isfinite(cost)
                and abs(cost - cost_entry) / cost_entry <= cfg.eps):
            break
    return _finish(tree, problem, t0, 0.0, rounds, events, flagged)


def solution_controls(tree, node):
    """Concatenated control segments from root to node."""
    segs = []
    i = node
    while i > 0:
        segs.append(tree.controls[i])
        i = tree.parent[i]
    if not segs:
        return np.zeros((0, 1))
    return np.vstack(segs[::-1])


def load_problem(path, spec):
    """Problem JSON: x0, goal {kind, center, ...}, obstacle boxes,
    optional projection matrix."""
    with open(path) as fh:
        data = json.load(fh)
    g = data["goal"]
    goal = InitialSet(g["kind"], np.asarray(g["center"]),
                      half_widths=np.asarray(g["half_widths"]) if "half_widths" in g else None,
                      shape=np.asarray(g["shape"]) if "shape" in g else None)
    obstacles = [(np.asarray(o[0]), np.asarray(o[1]))
                 for o in data.get("obstacles", [])]
    proj = np.asarray(data["projection"]) if "projection" in data else None
    return PlanProblem(spec=spec, x0=np.asarray(data["x0"]), goal=goal,
                       obstacles=obstacles, projection=proj)
