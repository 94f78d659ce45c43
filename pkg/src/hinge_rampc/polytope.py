"""H-representation polytope algebra and the LP primitive used everywhere else.

A polytope is stored as {x | N x <= d} with N the row matrix of constraint
normals and d the offsets. Values are immutable after construction and safe to
share across concurrent runs; every LP is solved in a fresh call.
"""

import math

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import HalfspaceIntersection, QhullError

TOL_FEAS = 1e-8

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
SOLVER_ERROR = "solver_error"

# scipy.optimize.linprog status codes -> our statuses
_STATUS_MAP = {0: OPTIMAL, 2: INFEASIBLE, 3: UNBOUNDED}


class PolytopeError(ValueError):
    pass


class EmptyPolytopeError(PolytopeError):
    pass


class LpResult:
    """Outcome of one linear program (minimization)."""

    __slots__ = ("status", "x", "value")

    def __init__(self, status, x=None, value=None):
        self.status = status
        self.x = x
        self.value = value

    def __repr__(self):
        return f"LpResult(status={self.status!r}, value={self.value})"


def solve_lp(c, a_ub=None, b_ub=None, a_eq=None, b_eq=None):
    """min c.x  s.t.  a_ub x <= b_ub, a_eq x = b_eq (variables free).

    Status classifies optimal / infeasible / unbounded; numerical failures
    come back as 'solver_error' with no fabricated point.
    """
    c = np.asarray(c, dtype=float)
    for arr in (c, a_ub, b_ub, a_eq, b_eq):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise ValueError("LP data must be finite")
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                  bounds=(None, None), method="highs")
    status = _STATUS_MAP.get(res.status, SOLVER_ERROR)
    if status != OPTIMAL:
        return LpResult(status)
    return LpResult(OPTIMAL, np.asarray(res.x), float(res.fun))


class Polytope:
    """{x in R^n | normals x <= offsets}, immutable by convention."""

    def __init__(self, normals, offsets, normalize=False):
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
        if normals.shape[0] != offsets.shape[0]:
            raise PolytopeError("row count mismatch between normals and offsets")
        if not (np.all(np.isfinite(normals)) and np.all(np.isfinite(offsets))):
            raise PolytopeError("non-finite polytope data")
        if normalize:
            norms = np.linalg.norm(normals, axis=1)
            if np.any(norms <= 0):
                raise PolytopeError("zero row cannot be normalized")
            normals = normals / norms[:, None]
            offsets = offsets / norms
        self.normals = normals
        self.offsets = offsets
        self._empty = None
        self._cheb = None

    @property
    def dim(self):
        return self.normals.shape[1]

    @property
    def n_rows(self):
        return self.normals.shape[0]

    @classmethod
    def box(cls, lower, upper):
        """Axis-aligned box {lower <= x <= upper}."""
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if np.any(upper < lower):
            raise PolytopeError("box with upper < lower")
        n = lower.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    @classmethod
    def inf_ball(cls, radius, dim):
        return cls.box(-radius * np.ones(dim), radius * np.ones(dim))

    # -- predicates -------------------------------------------------------

    def contains(self, x, tol=TOL_FEAS):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise PolytopeError(f"point of dim {x.shape} in polytope of dim {self.dim}")
        return bool(np.all(self.normals @ x <= self.offsets + tol))

    def is_empty(self):
        """Lazy feasibility LP; cached. An infeasible set is flagged, never used."""
        if self._empty is None:
            res = solve_lp(np.zeros(self.dim), a_ub=self.normals, b_ub=self.offsets)
            if res.status == SOLVER_ERROR:
                raise PolytopeError("feasibility LP failed")
            self._empty = res.status == INFEASIBLE
        return self._empty

    def is_bounded(self):
        """Support finiteness along +/- every axis."""
        for i in range(self.dim):
            e = np.zeros(self.dim)
            for s in (1.0, -1.0):
                e[i] = s
                if math.isinf(self.support(e)):
                    return False
            e[i] = 0.0
        return True

    # -- operations -------------------------------------------------------

    def support(self, direction):
        """max direction.x over the set; +inf if unbounded in that direction."""
        direction = np.asarray(direction, dtype=float)
        res = solve_lp(-direction, a_ub=self.normals, b_ub=self.offsets)
        if res.status == INFEASIBLE:
            raise EmptyPolytopeError("support of an empty polytope")
        if res.status == UNBOUNDED:
            return math.inf
        if res.status != OPTIMAL:
            raise PolytopeError("support LP failed")
        return -res.value

    def intersect(self, other):
        """H-stack of both systems; emptiness is the caller's concern."""
        if other.dim != self.dim:
            raise PolytopeError("dimension mismatch in intersection")
        return Polytope(np.vstack([self.normals, other.normals]),
                        np.concatenate([self.offsets, other.offsets]))

    def dilate(self, steps, phi, gamma=None):
        """Offsets grow by steps*phi*gamma, same normals (drift allowance)."""
        if steps < 0:
            raise PolytopeError("negative dilation step count")
        if phi < 0:
            raise PolytopeError("negative dilation radius")
        if gamma is None:
            gamma = np.ones(self.n_rows)
        else:
            gamma = np.asarray(gamma, dtype=float)
            if np.any(gamma <= 0):
                raise PolytopeError("gamma must be strictly positive")
        return Polytope(self.normals, self.offsets + steps * phi * gamma)

    def chebyshev_center(self):
        """Center (and radius) of the largest inscribed ball, via one LP.

        Rows need not be unit norm; the radius is measured in Euclidean metric.
        """
        norms = np.linalg.norm(self.normals, axis=1)
        a_ub = np.hstack([self.normals, norms[:, None]])
        c = np.zeros(self.dim + 1)
        c[-1] = -1.0  # maximize radius
        res = solve_lp(c, a_ub=a_ub, b_ub=self.offsets)
        if res.status == INFEASIBLE:
            raise EmptyPolytopeError("chebyshev center of an empty polytope")
        if res.status == UNBOUNDED:
            raise PolytopeError("chebyshev center of an unbounded polytope")
        if res.status != OPTIMAL:
            raise PolytopeError("chebyshev LP failed")
        return res.x[:-1], float(res.x[-1])

    def vertices(self):
        """Vertex enumeration for dim <= 3 via halfspace intersection.

        Degenerate (flat) sets fall back to joggled qhull. Result rows are
        deduplicated within 1e-9 of each other.
        """
        if self.dim > 3:
            raise PolytopeError("vertex enumeration only supported for dim <= 3")
        if self.dim == 1:
            lo, hi = -self.support(np.array([-1.0])), self.support(np.array([1.0]))
            if math.isinf(lo) or math.isinf(hi):
                raise PolytopeError("unbounded 1-D set")
            return np.array([[lo], [hi]]) if hi > lo + 1e-12 else np.array([[lo]])
        center, radius = self.chebyshev_center()
        if not self.is_bounded():
            raise PolytopeError("vertex enumeration of an unbounded set")
        return halfspace_vertices(self.normals, self.offsets, center, radius)

    def __repr__(self):
        return f"Polytope(dim={self.dim}, rows={self.n_rows})"


def halfspace_vertices(normals, offsets, interior_point, radius=None):
    """Vertices of {Nx <= d} given a strictly interior point (qhull)."""
    halfspaces = np.hstack([normals, -offsets[:, None]])
    opts = [None, "QJ"]
    if radius is not None and radius < 1e-7:
        opts = ["QJ"]  # flat set: go straight to joggle
    last = None
    for opt in opts:
        try:
            if opt is None:
                hs = HalfspaceIntersection(halfspaces, interior_point)
            else:
                hs = HalfspaceIntersection(halfspaces, interior_point, qhull_options=opt)
            return _dedup(hs.intersections)
        except QhullError as exc:  # pragma: no cover - rare numerical path
            last = exc
    raise PolytopeError(f"qhull failed: {last}")


def _dedup(points, tol=1e-9):
    points = np.asarray(points)
    if len(points) <= 1:
        return points
    scale = max(1.0, float(np.abs(points).max()))
    keys = np.round(points / (scale * tol)).astype(np.int64)
    _, idx = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(idx)]


def box_vertices(poly):
    """Exact vertex list of an axis-aligned box or low-dim template polytope.

    Boxes take the fast combinatorial path; anything else must be dim <= 3
    (vertex count <= 2^dim is the intended use, e.g. the tube cross-section).
    """
    bounds = _axis_box_bounds(poly)
    if bounds is not None:
        lo, hi = bounds
        n = poly.dim
        verts = np.array([[hi[i] if (m >> i) & 1 else lo[i] for i in range(n)]
                          for m in range(2 ** n)])
        return verts
    if poly.dim > 3:
        raise PolytopeError("general vertex enumeration rejected for dim > 3")
    return poly.vertices()


def _axis_box_bounds(poly):
    """(lower, upper) if the rows describe exactly an axis-aligned box."""
    n = poly.dim
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for row, off in zip(poly.normals, poly.offsets):
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size != 1:
            return None
        i = nz[0]
        if row[i] > 0:
            hi[i] = min(hi[i], off / row[i])
        else:
            lo[i] = max(lo[i], off / row[i])
    if np.any(np.isinf(lo)) or np.any(np.isinf(hi)):
        return None
    return lo, hi
