"""Convex-set machinery over point clouds.

Sets are represented by finite point clouds whose convex hull is the set;
every predicate (membership, intersection, chords) reduces to a small dense
LP solved by a two-phase simplex with Bland's rule.  Only 2D gets explicit
polygon construction, for diagnostics and area estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LpProblem", "LpResult", "LpError", "lp_solve",
    "PointCloudHull", "hull_contains", "hulls_intersect", "intersection_point",
    "chord", "hnr_sample", "hull_2d", "polygon_area",
]

_PIVOT_TOL = 1e-9


class LpError(RuntimeError):
    """Simplex iteration cap exceeded or malformed problem."""


@dataclass
class LpProblem:
    """min (or max) c @ x  s.t.  A_ub x <= b_ub, A_eq x = b_eq, bounds.

    bounds is a list of (lo, hi) per variable; None means unbounded on that
    side.  Default bound is (0, None).
    """

    c: np.ndarray
    A_ub: np.ndarray = None
    b_ub: np.ndarray = None
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    bounds: list = None
    maximize: bool = False


@dataclass
class LpResult:
    status: str          # optimal | infeasible | unbounded
    value: float = np.nan
    x: np.ndarray = None


def _pivot(T, basis, row, col):
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]
    basis[row] = col


def _simplex_core(T, r, basis, tol, max_iter):
    """Minimize with reduced-cost row r over tableau T=[A|b]; Bland's rule.

    Returns 'optimal' or 'unbounded'; r and T are updated in place, and
    r[-1] holds minus the objective value.
    """
    m = T.shape[0]
    for _ in range(max_iter):
        enter = -1
        for j in range(T.shape[1] - 1):
            if r[j] < -tol:
                enter = j
                break
        if enter < 0:
            return "optimal"
        best_ratio, leave = np.inf, -1
        for i in range(m):
            a = T[i, enter]
            if a > tol:
                ratio = T[i, -1] / a
                if ratio < best_ratio - 1e-15 or (
                        abs(ratio - best_ratio) <= 1e-15
                        and (leave < 0 or basis[i] < basis[leave])):
                    best_ratio, leave = ratio, i
        if leave < 0:
            return "unbounded"
        _pivot(T, basis, leave, enter)
        r -= r[enter] * T[leave]
    raise LpError(f"simplex iteration cap {max_iter} exceeded")


def _solve_standard(A, b, c, tol=_PIVOT_TOL, max_iter=20000):
    """Two-phase simplex for min c@x s.t. Ax=b, x>=0."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    A = A.copy()
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1
    # Phase 1 tableau with artificial basis.
    T = np.hstack([A, np.eye(m), b[:, None]])
    basis = list(range(n, n + m))
    r = np.concatenate([-A.sum(axis=0), np.zeros(m), [-b.sum()]])
    status = _simplex_core(T, r, basis, tol, max_iter)
    if status != "optimal":  # phase 1 is always bounded below by 0
        raise LpError("phase 1 did not converge")
    if -r[-1] > 1e-7 * (1.0 + abs(b).max(initial=0.0)):
        return LpResult("infeasible")
    # Drive remaining artificials out of the basis.
    keep = np.ones(m, dtype=bool)
    for i in range(m):
        if basis[i] >= n:
            piv = -1
            for j in range(n):
                if abs(T[i, j]) > tol:
                    piv = j
                    break
            if piv >= 0:
                _pivot(T, basis, i, piv)
            else:
                keep[i] = False  # redundant row
    rows = [i for i in range(m) if keep[i]]
    T = np.hstack([T[rows][:, :n], T[rows][:, -1:]])
    basis = [basis[i] for i in rows]
    # Phase 2 reduced costs.
    r = np.concatenate([c, [0.0]])
    for i, bi in enumerate(basis):
        if abs(r[bi]) > 0:
            r -= r[bi] * T[i]
    status = _simplex_core(T, r, basis, tol, max_iter)
    if status == "unbounded":
        return LpResult("unbounded")
    x = np.zeros(n)
    for i, bi in enumerate(basis):
        x[bi] = T[i, -1]
    return LpResult("optimal", float(c @ x), x)


def lp_solve(problem, max_iter=20000):
    """Solve an LpProblem; converts general bounds/inequalities to
    standard form and reports optimal/infeasible/unbounded exactly."""
    c = np.asarray(problem.c, dtype=float)
    n = c.size
    bounds = problem.bounds if problem.bounds is not None else [(0.0, None)] * n
    if problem.maximize:
        c = -c
    A_ub = np.zeros((0, n)) if problem.A_ub is None else np.atleast_2d(problem.A_ub)
    b_ub = np.zeros(0) if problem.b_ub is None else np.atleast_1d(problem.b_ub)
    A_eq = np.zeros((0, n)) if problem.A_eq is None else np.atleast_2d(problem.A_eq)
    b_eq = np.zeros(0) if problem.b_eq is None else np.atleast_1d(problem.b_eq)

    # Map each variable to nonnegative columns: shifted, flipped, or split.
    cols = []          # (kind, data) per original variable
    extra_ub = []      # rows for finite two-sided bounds
    for j, (lo, hi) in enumerate(bounds):
        if lo is not None:
            cols.append(("shift", lo))
            if hi is not None:
                row = np.zeros(n)
                row[j] = 1.0
                extra_ub.append((row, hi))
        elif hi is not None:
            cols.append(("flip", hi))
        else:
            cols.append(("free", None))
    if extra_ub:
        A_ub = np.vstack([A_ub] + [r for r, _ in extra_ub])
        b_ub = np.concatenate([b_ub, [h for _, h in extra_ub]])

    def transform(A):
        out = []
        for j, (kind, val) in enumerate(cols):
            col = A[:, j]
            if kind in ("shift",):
                out.append(col)
            elif kind == "flip":
                out.append(-col)
            else:
                out.append(col)
                out.append(-col)
        return np.column_stack(out) if out else A

    shift = np.array([v if k == "shift" else (v if k == "flip" else 0.0)
                      for k, v in cols])
    b_ub2 = b_ub - A_ub @ shift if A_ub.size else b_ub
    b_eq2 = b_eq - A_eq @ shift if A_eq.size else b_eq
    Au = transform(A_ub) if A_ub.shape[0] else np.zeros((0, 0))
    Ae = transform(A_eq) if A_eq.shape[0] else np.zeros((0, 0))
    n_std = sum(2 if k == "free" else 1 for k, _ in cols)
    if Au.size == 0:
        Au = np.zeros((A_ub.shape[0], n_std))
    if Ae.size == 0:
        Ae = np.zeros((A_eq.shape[0], n_std))
    n_slack = Au.shape[0]
    A = np.vstack([
        np.hstack([Au, np.eye(n_slack)]),
        np.hstack([Ae, np.zeros((Ae.shape[0], n_slack))]),
    ])
    b = np.concatenate([b_ub2, b_eq2])
    cs = np.zeros(n_std + n_slack)
    k = 0
    for j, (kind, _) in enumerate(cols):
        if kind == "free":
            cs[k] = c[j]
            cs[k + 1] = -c[j]
            k += 2
        elif kind == "flip":
            cs[k] = -c[j]
            k += 1
        else:
            cs[k] = c[j]
            k += 1
    res = _solve_standard(A, b, cs, max_iter=max_iter)
    if res.status != "optimal":
        return res
    # Back-substitute to original variables.
    x = np.zeros(n)
    k = 0
    for j, (kind, val) in enumerate(cols):
        if kind == "shift":
            x[j] = res.x[k] + val
            k += 1
        elif kind == "flip":
            x[j] = val - res.x[k]
            k += 1
        else:
            x[j] = res.x[k] - res.x[k + 1]
            k += 2
    value = float(np.asarray(problem.c, dtype=float) @ x)
    return LpResult("optimal", value, x)


# ---------------------------------------------------------------------------
# Point-cloud hulls
# ---------------------------------------------------------------------------

@dataclass
class PointCloudHull:
    """The convex hull of the rows of `points` (M, n)."""

    points: np.ndarray
    _reduced: "PointCloudHull" = field(default=None, repr=False, compare=False)
    _hs2d: tuple = field(default=None, repr=False, compare=False)
    _hs2d_done: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] < 1:
            raise ValueError("hull needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("hull points must be finite")

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def centroid(self):
        return self.points.mean(axis=0)

    def reduced(self):
        """Equivalent hull with redundant interior points dropped (2D only)."""
        if self._reduced is not None:
            return self._reduced
        if self.dim == 2 and self.points.shape[0] > 8:
            verts = hull_2d(self.points)
            out = PointCloudHull(verts)
        else:
            out = self
        self._reduced = out
        return out


def _halfspaces_2d(hull):
    """Cached facet form (A, b) of a 2D hull, interior = {x : A x <= b}
    with unit-norm rows, or None when the hull is degenerate (< 3 vertices).
    """
    if not hull._hs2d_done:
        hull._hs2d_done = True
        if hull.dim == 2:
            verts = hull_2d(hull.reduced().points)
            if verts.shape[0] >= 3:
                edge = np.roll(verts, -1, axis=0) - verts
                A = np.stack([edge[:, 1], -edge[:, 0]], axis=1)  # outward
                nrm = np.linalg.norm(A, axis=1)
                keep = nrm > 1e-14
                A = A[keep] / nrm[keep, None]
                hull._hs2d = (A, np.einsum("ij,ij->i", A, verts[keep]))
    return hull._hs2d


def facet_contains(hull, x, tol=1e-9):
    """Exact polygon membership via the cached facet form, or None when no
    facet form exists (non-2D or degenerate hull).  Unlike hull_contains,
    the tolerance is a Euclidean facet distance, not an L1 residual."""
    hs = _halfspaces_2d(hull)
    if hs is None:
        return None
    return bool(np.all(hs[0] @ np.asarray(x, dtype=float) <= hs[1] + tol))


def _membership_lp(points, x):
    """min L1 residual of convex reconstruction of x from the rows."""
    M, n = points.shape
    # variables: lambda (M), r+ (n), r- (n)
    A_eq = np.zeros((n + 1, M + 2 * n))
    A_eq[:n, :M] = points.T
    A_eq[:n, M: M + n] = np.eye(n)
    A_eq[:n, M + n:] = -np.eye(n)
    A_eq[n, :M] = 1.0
    b_eq = np.concatenate([x, [1.0]])
    c = np.concatenate([np.zeros(M), np.ones(2 * n)])
    return lp_solve(LpProblem(c=c, A_eq=A_eq, b_eq=b_eq))


def hull_contains(hull, x, tol=1e-7):
    """LP membership: x is a convex combination of the points within tol
    (L1 reconstruction residual)."""
    x = np.asarray(x, dtype=float)
    pts = hull.reduced().points
    if x.shape != (pts.shape[1],):
        raise ValueError("dimension mismatch")
    # fast accept: a point on or inside the facets reconstructs exactly
    # (residual 0); rejection still needs the LP because the tolerance is
    # an L1 residual, not a Euclidean facet distance
    if facet_contains(hull, x, tol=1e-12):
        return True
    res = _membership_lp(pts, x)
    if res.status != "optimal":
        raise LpError(f"membership LP returned {res.status}")
    return res.value <= tol


def _intersect_lp(a, b):
    P, Q = a.reduced().points, b.reduced().points
    M, n = P.shape
    N = Q.shape[0]
    # variables: lambda (M), mu (N), r+ (n), r- (n)
    A_eq = np.zeros((n + 2, M + N + 2 * n))
    A_eq[:n, :M] = P.T
    A_eq[:n, M: M + N] = -Q.T
    A_eq[:n, M + N: M + N + n] = np.eye(n)
    A_eq[:n, M + N + n:] = -np.eye(n)
    A_eq[n, :M] = 1.0
    A_eq[n + 1, M: M + N] = 1.0
    b_eq = np.concatenate([np.zeros(n), [1.0, 1.0]])
    c = np.concatenate([np.zeros(M + N), np.ones(2 * n)])
    res = lp_solve(LpProblem(c=c, A_eq=A_eq, b_eq=b_eq))
    if res.status != "optimal":
        raise LpError(f"intersection LP returned {res.status}")
    point = P.T @ res.x[:M]
    return res.value, point


def _clip_polygon(verts, A, b, slack=1e-9):
    """Sutherland–Hodgman clip of a convex polygon by halfspaces A x <= b."""
    poly = verts
    for ai, bi in zip(A, b + slack):
        if poly.shape[0] == 0:
            break
        d = poly @ ai - bi
        nxt = np.roll(np.arange(poly.shape[0]), -1)
        out = []
        for i, j in zip(range(poly.shape[0]), nxt):
            if d[i] <= 0.0:
                out.append(poly[i])
            if (d[i] <= 0.0) != (d[j] <= 0.0):
                t = d[i] / (d[i] - d[j])
                out.append(poly[i] + t * (poly[j] - poly[i]))
        poly = np.asarray(out).reshape(-1, 2)
    return poly


def _intersect_2d(a, b):
    """Common point of two 2D hulls by polygon clipping, or None.
    Falls back to the caller's LP when either facet form is degenerate."""
    hsa, hsb = _halfspaces_2d(a), _halfspaces_2d(b)
    if hsa is None or hsb is None:
        return False, None
    verts = hull_2d(a.reduced().points)
    poly = _clip_polygon(verts, *hsb)
    return True, (poly.mean(axis=0) if poly.shape[0] else None)


def hulls_intersect(a, b, tol=1e-7):
    """True iff the two hulls share a point."""
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    return intersection_point(a, b, tol=tol) is not None


def intersection_point(a, b, tol=1e-7):
    """A common point of the two hulls, or None if they do not intersect."""
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    if a.dim == 2:
        done, point = _intersect_2d(a, b)
        if done:
            return point
    value, point = _intersect_lp(a, b)
    return point if value <= tol else None


def chord(hull, x, direction):
    """Maximal interval (t_min, t_max) with x + t*direction inside the hull.

    Requires x in the hull (the LP is infeasible otherwise, which raises).
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(direction, dtype=float)
    if np.allclose(d, 0.0):
        raise ValueError("direction must be nonzero")
    pts = hull.reduced().points
    hs = _halfspaces_2d(hull) if x.size == 2 else None
    if hs is not None:
        A, b = hs
        slack = b - A @ x
        if slack.min() < -1e-7:
            raise LpError("chord base point is outside the hull")
        slack = np.maximum(slack, 0.0)
        a = A @ d
        pos, neg = a > 1e-14, a < -1e-14
        t_hi = np.min(slack[pos] / a[pos]) if np.any(pos) else np.inf
        t_lo = np.max(slack[neg] / a[neg]) if np.any(neg) else -np.inf
        return float(t_lo), float(t_hi)
    M, n = pts.shape
    # variables: lambda (M), t (free, split)
    A_eq = np.zeros((n + 1, M + 2))
    A_eq[:n, :M] = pts.T
    A_eq[:n, M] = -d
    A_eq[:n, M + 1] = d
    A_eq[n, :M] = 1.0
    b_eq = np.concatenate([x, [1.0]])
    c = np.zeros(M + 2)
    c[M], c[M + 1] = 1.0, -1.0
    hi = lp_solve(LpProblem(c=c, A_eq=A_eq, b_eq=b_eq, maximize=True))
    lo = lp_solve(LpProblem(c=c, A_eq=A_eq, b_eq=b_eq, maximize=False))
    if hi.status != "optimal" or lo.status != "optimal":
        raise LpError(f"chord LP failed ({hi.status}/{lo.status}); "
                      "is the base point inside the hull?")
    return float(lo.value), float(hi.value)


def hnr_sample(hulls, x_start, rng, burn_in=50, thin=5, n_samples=1,
               max_retries=50):
    """Hit-and-run over the intersection of the given hulls.

    Random unit direction, chord = intersection of per-hull chords, uniform
    point on the chord.  After `burn_in` steps, every `thin`-th state is
    emitted.  Degenerate regions (no usable chord after `max_retries`
    directions) emit the current point.
    """
    if isinstance(hulls, PointCloudHull):
        hulls = [hulls]
    x = np.asarray(x_start, dtype=float).copy()
    n = x.size
    samples = []
    steps_needed = burn_in + thin * n_samples
    step = 0
    while len(samples) < n_samples:
        moved = False
        for _ in range(max_retries):
            d = rng.normal(size=n)
            nrm = np.linalg.norm(d)
            if nrm < 1e-12:
                continue
            d /= nrm
            t_lo, t_hi = -np.inf, np.inf
            ok = True
            for h in hulls:
                try:
                    a, b = chord(h, x, d)
                except LpError:
                    ok = False
                    break
                t_lo, t_hi = max(t_lo, a), min(t_hi, b)
            if not ok or t_hi - t_lo <= 1e-12:
                continue
            x = x + rng.uniform(t_lo, t_hi) * d
            moved = True
            break
        step += 1
        if not moved:
            # single point (or numerically degenerate) region
            samples.append(x.copy())
            continue
        if step > burn_in and (step - burn_in) % thin == 0:
            samples.append(x.copy())
        if step > steps_needed + max_retries * thin:
            samples.append(x.copy())
    if n_samples == 1:
        return samples[0]
    return np.asarray(samples[:n_samples])


# ---------------------------------------------------------------------------
# 2D diagnostics
# ---------------------------------------------------------------------------

def hull_2d(points):
    """Andrew monotone chain; returns CCW-ordered hull vertices (V, 2)."""
    pts = np.unique(np.atleast_2d(np.asarray(points, dtype=float)), axis=0)
    if pts.shape[1] != 2:
        raise ValueError("hull_2d requires 2D points")
    if pts.shape[0] <= 2:
        return pts

    # plain-float chains: scalar tuple arithmetic is much faster than
    # per-element numpy indexing in this tight loop
    def chain(seq):
        out = []
        for px, py in seq:
            while len(out) >= 2:
                ox, oy = out[-2]
                ax, ay = out[-1]
                if (ax - ox) * (py - oy) - (ay - oy) * (px - ox) <= 0.0:
                    out.pop()
                else:
                    break
            out.append((px, py))
        return out

    seq = pts.tolist()
    lower = chain(seq)
    upper = chain(seq[::-1])
    poly = np.asarray(lower[:-1] + upper[:-1])
    if poly.shape[0] < 3:
        ends = pts[np.argsort(pts[:, 0], kind="stable")]
        return np.asarray([ends[0], ends[-1]])
    return poly


def polygon_area(poly):
    """Shoelace area of an ordered polygon; degenerate input gives 0."""
    poly = np.atleast_2d(np.asarray(poly, dtype=float))
    if poly.shape[0] < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
