"""Online set-membership identification of rho = [K, zeta, D].

The uncertainty set is a fixed 45-row template polytope whose offsets are
updated each step: intersect with the latest non-falsified set, dilate by the
drift allowance, clip against the prior box, and reduce back to the template
by taking exact supports in the 45 directions (vertex enumeration; the slow
per-row LP route is the acceptance oracle, not this path).
"""

from dataclasses import dataclass

import numpy as np

from .plant import discrete_basis, friction_offset
from .polytope import (EmptyPolytopeError, Polytope, PolytopeError,
                       halfspace_vertices)

N_TEMPLATE_ROWS = 45
PRIOR_BOUND = 8.0
MIN_INTERIOR_RADIUS = 1e-9


def build_template(n_rows=N_TEMPLATE_ROWS):
    """Fixed unit template directions: 6 axis rows + Fibonacci-sphere layout.

    Deterministic, identical across runs; the first six rows are +/- axes so
    the template set is always contained in the prior box once its offsets
    are clipped there.
    """
    if n_rows < 7:
        raise ValueError("template needs the 6 axis rows plus at least one more")
    axes = np.vstack([np.eye(3), -np.eye(3)])
    n_extra = n_rows - 6
    golden = np.pi * (3.0 - np.sqrt(5.0))
    idx = np.arange(n_extra)
    z = 1.0 - 2.0 * (idx + 0.5) / n_extra
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = golden * idx
    extra = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    rows = np.vstack([axes, extra])
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@dataclass(frozen=True)
class Regressor:
    """One transition's data: x_next_corrected = Ad0 x + Bd0 u + D rho + w."""

    d_mat: np.ndarray   # 2 x 3, columns Ai x + Bi u (discrete basis)
    d_vec: np.ndarray   # 2,   Ad0 x + Bd0 u - x_next_corrected


def regressor(x, u, x_next, cfg):
    """Build the transition regressor, with the exactly-known friction
    offset (from the measured rate) removed from x_next."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    ad0, ad, bd0, bd = discrete_basis(cfg)
    corrected = x_next - friction_offset(x[1], cfg)
    d_mat = np.column_stack([ad[i] @ x + bd[i] @ u for i in range(3)])
    d_vec = ad0 @ x + bd0 @ u - corrected
    return Regressor(d_mat, d_vec)


def nonfalsified_set(reg, w_set):
    """Parameters not contradicted by one transition: {-Hw D rho <= dw + Hw d}.

    Possibly unbounded (no excitation -> vacuous rows); intersection with the
    running template set restores boundedness.
    """
    rows = -w_set.normals @ reg.d_mat
    offs = w_set.offsets + w_set.normals @ reg.d_vec
    return Polytope(rows, offs)


class ParamSet:
    """Template polytope over rho with fixed normals and mutable offsets.

    The set semantics are {rho | normals rho <= offsets}; the axis rows keep
    it inside the prior box at all times. Instances are treated as immutable;
    updates return new instances.
    """

    def __init__(self, normals, offsets, phi, prior_offsets, vertices=None):
        self.normals = normals
        self.offsets = np.asarray(offsets, dtype=float)
        self.phi = float(phi)
        self.prior_offsets = prior_offsets
        self._vertices = vertices
        if not np.all(np.isfinite(self.offsets)):
            raise PolytopeError("non-finite template offsets")

    @classmethod
    def from_prior(cls, phi, bound=PRIOR_BOUND, n_rows=N_TEMPLATE_ROWS):
        """Initial set: template supports of the prior box ||rho||_inf <= bound."""
        normals = build_template(n_rows)
        prior = bound * np.abs(normals).sum(axis=1)  # box support = bound*||h||_1
        return cls(normals, prior.copy(), phi, prior)

    @classmethod
    def from_box(cls, center, halfwidth, phi, bound=PRIOR_BOUND,
                 n_rows=N_TEMPLATE_ROWS):
        """Initial set centered on a prior point estimate, clipped to the
        prior box (exact template supports of the small box)."""
        center = np.asarray(center, dtype=float)
        normals = build_template(n_rows)
        prior = bound * np.abs(normals).sum(axis=1)
        offs = normals @ center + halfwidth * np.abs(normals).sum(axis=1)
        return cls(normals, np.minimum(offs, prior), phi, prior)

    def as_polytope(self):
        return Polytope(self.normals, self.offsets)

    def contains(self, rho, tol=1e-9):
        return bool(np.all(self.normals @ np.asarray(rho) <= self.offsets + tol))

    def vertices(self):
        if self._vertices is None:
            center, radius = self.as_polytope().chebyshev_center()
            self._vertices = halfspace_vertices(self.normals, self.offsets,
                                                center, radius)
        return self._vertices

    def axis_bounds(self):
        """(lo, hi) per parameter axis, exact from the vertex set."""
        verts = self.vertices()
        return verts.min(axis=0), verts.max(axis=0)

    def total_width(self):
        lo, hi = self.axis_bounds()
        return float(np.sum(hi - lo))

    def arm_interval(self):
        """Moment-arm interval from the axis-row offsets.

        Row offsets upper-bound the exact axis supports (outer, hence sound
        for constraint robustification) and equal them right after an update.
        """
        return (-self.offsets[5], self.offsets[2])

    def predicted_offsets(self, sigma):
        """Offsets of d_sigma(P_k) intersected with the prior, exactly.

        Same-normal systems intersect by componentwise offset min, and the
        prior-offset template equals the prior box (axis rows cut it down).
        """
        return np.minimum(self.offsets + sigma * self.phi, self.prior_offsets)


def update_param_set(pset, delta, steps=1):
    """Template update: exact supports of d_steps(P_k ∩ Δ) ∩ P.

    Falls back to dilation-only (Δ skipped) when the raw intersection is
    empty or numerically degenerate, which keeps soundness degrading
    gracefully instead of crashing mid-run. Returns (new_set, used_delta).
    """
    if delta is not None and delta.dim != 3:
        raise PolytopeError("non-falsified set must live in parameter space")
    box_normals = np.vstack([np.eye(3), -np.eye(3)])
    box_offsets = np.full(6, PRIOR_BOUND)

    if delta is not None:
        raw_normals = np.vstack([pset.normals, delta.normals])
        raw_offsets = np.concatenate([pset.offsets, delta.offsets])
        try:
            center, radius = Polytope(raw_normals, raw_offsets).chebyshev_center()
        except EmptyPolytopeError:
            center, radius = None, -1.0
        if center is not None and radius >= MIN_INTERIOR_RADIUS:
            # geometric dilation: each halfspace moves out by steps*phi in
            # euclidean units, i.e. offsets grow by steps*phi*||row||
            grow = steps * pset.phi * np.linalg.norm(raw_normals, axis=1)
            stack_n = np.vstack([raw_normals, box_normals])
            stack_o = np.concatenate([raw_offsets + grow, box_offsets])
            try:
                verts = halfspace_vertices(stack_n, stack_o, center,
                                           radius + steps * pset.phi)
                new_offsets = np.minimum((verts @ pset.normals.T).max(axis=0),
                                         pset.prior_offsets)
                return ParamSet(pset.normals, new_offsets, pset.phi,
                                pset.prior_offsets, vertices=verts), True
            except PolytopeError:
                pass  # fall through to the dilation-only path

    new_offsets = pset.predicted_offsets(steps)
    return ParamSet(pset.normals, new_offsets, pset.phi,
                    pset.prior_offsets), False


def predict_param_sets(pset, horizon):
    """Predicted sets for sigma = 0..horizon-1 (nested by construction)."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    return [ParamSet(pset.normals, pset.predicted_offsets(s), pset.phi,
                     pset.prior_offsets) for s in range(horizon)]


def point_estimate(pset):
    """Chebyshev center of the template polytope (always inside the set)."""
    center, _ = pset.as_polytope().chebyshev_center()
    return center
