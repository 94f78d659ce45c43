"""Robust adaptive tube MPC.

Offline: gain validation, contractive parallelogram cross-section, support
bounds, terminal scale certificate. Online: one LP per step over homothetic
tube variables (centers z, scalings theta, input offsets v) plus dual
multipliers certifying the set inclusions against the stage-dilated
parameter sets.

The per-step problem uses a single tube whose stage-s inclusion is robust
against the predicted set P_hat(s|k) = d_s(P_k) ∩ P; constant-set rows would
be implied by these and are not duplicated. A deterministic exploration probe
e(k) enters the input as u = K x + v + e and is modeled exactly inside the LP
(known schedule): certificates and recursive feasibility are unaffected. The
cost tracks the probe-driven reference oscillation of a nominal closed loop,
so the optimizer does not spend input cancelling its own excitation, while
every constraint stays absolute.
"""

import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csc_matrix

from . import plant as plant_mod
from .estimator import (PRIOR_BOUND, ParamSet, nonfalsified_set,
                        predict_param_sets, regressor, update_param_set)
from .polytope import Polytope

FEASIBLE = "feasible"
INFEASIBLE_STATUS = "infeasible"
SOLVER_ERROR_STATUS = "solver-error"

# Tube cross-section generator: x = T y, ||y||_inf <= 1. Tuned offline so the
# default closed loop contracts this parallelogram over every vertex of the
# prior parameter box.
DEFAULT_CROSS_T = np.array([[-0.44672362, -0.06221464],
                            [0.40133581, 0.44771529]])


def default_gain():
    """Pre-stabilizing wrench gain: fy-row PD, fx row zero.

    With the fx row zero the closed loop is independent of the
    sign-indefinite moment arm over the prior box, which is what makes
    validation over the whole box possible at all.
    """
    k = np.zeros((6, 2))
    k[1, :] = [40.0, 50.0]
    return k


def paper_gain_embedded():
    """The published 2x2 gain dropped into the (fx, fy) rows, for validation."""
    k = np.zeros((6, 2))
    k[0, :] = [-0.73, 0.45]
    k[1, :] = [0.29, 0.1]
    return k


@dataclass(frozen=True)
class ProbeConfig:
    """Deterministic exploration input e(k), ramped in from zero.

    fy tones excite angle and rate through the certain-sign torque channel;
    the fx tone excites the moment-arm channel directly.
    """

    fx_amp: float = 0.05
    fx_freq: float = 1.3
    fy_amps: tuple = (0.5, 0.5)
    fy_freqs: tuple = (0.35, 2.2)
    ramp_time: float = 5.0

    def scale(self, t):
        return min(1.0, t / self.ramp_time) if self.ramp_time > 0 else 1.0

    def wrench(self, k, h):
        t = k * h
        s = self.scale(t)
        e = np.zeros(6)
        e[0] = s * self.fx_amp * np.sin(self.fx_freq * t)
        e[1] = s * sum(a * np.sin(w * t)
                       for a, w in zip(self.fy_amps, self.fy_freqs))
        return e


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 6
    gain: np.ndarray = field(default_factory=default_gain)
    q_weight: np.ndarray = field(default_factory=lambda: np.diag([1.47, 1.35]))
    r_weight: np.ndarray = field(
        default_factory=lambda: np.diag([0.94, 1.0, 1.0, 1.0, 1.0, 1.0]))
    upsilon: np.ndarray = field(
        default_factory=lambda: np.diag([1.15, 1.25, 1.20]))
    phi_rho: float = 0.03
    lam: float = 0.985
    theta_bound: float = 0.7
    rate_bound: float = 0.2
    force_bound: float = 50.0
    torque_bound: float = 10.0
    hinge_bound: float = 2.0
    cross_t: np.ndarray = field(default_factory=lambda: DEFAULT_CROSS_T.copy())
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    # nominal parameters for the probe-reference model (the cost tracks the
    # probe-driven oscillation instead of fighting it; constraints stay
    # absolute)
    rho_nominal: np.ndarray = field(
        default_factory=lambda: np.array([0.6, 0.75, 2.0]))
    n_template_rows: int = 45
    prior_bound: float = PRIOR_BOUND
    # braking envelope |theta + slope*rate| <= theta_bound: soft internal
    # rows (exact penalty) that let the short horizon see the angle wall
    envelope_slope: float = 0.65
    envelope_weight: float = 50.0
    # terminal cost-to-go: per-gauge stage cost / (1 - contraction), the
    # value-function upper bound under the pre-stabilizing gain; without it a
    # 6-step lookahead cannot express regulation at all
    terminal_cost_scale: float = 1.0

    def cross_section(self):
        """(H_x, vertices): parallelogram in gauge form H_x x <= 1."""
        t_inv = np.linalg.inv(self.cross_t)
        h_x = np.vstack([t_inv, -t_inv])
        corners = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
        verts = corners @ self.cross_t.T
        return h_x, verts

    def gauge(self, x):
        h_x, _ = self.cross_section()
        return float((h_x @ np.asarray(x)).max())


def ampc_no_explore(cfg):
    """Constant-parameter ablation: zero exploration weight, zero dilation."""
    return replace(cfg, upsilon=np.zeros((3, 3)), phi_rho=0.0)


@dataclass
class GainReport:
    ok: bool
    worst_radius: float
    worst_rho: np.ndarray


def validate_gain(gain, cfg, plant_cfg, bound=None):
    """Spectral radius of I + h(A(rho)+B(rho)K) over prior-box vertices and
    a 5^3 grid. Vertex stability is necessary, not a full LPV certificate;
    the grid is a sanity sweep, not a proof."""
    bound = cfg.prior_bound if bound is None else bound
    if gain.shape != (6, 2):
        raise ValueError("gain must map state to the 6-channel wrench")
    worst, worst_rho = -np.inf, None
    pts = [np.array(v) for v in itertools.product((-bound, bound), repeat=3)]
    grid = np.linspace(-bound, bound, 5)
    pts += [np.array(v) for v in itertools.product(grid, repeat=3)]
    for rho in pts:
        a, b = plant_mod.build_matrices(rho, plant_cfg)
        a_cl = np.eye(2) + plant_cfg.h * (a + b @ gain)
        r = max(abs(np.linalg.eigvals(a_cl)))
        if r > worst:
            worst, worst_rho = r, rho
    return GainReport(bool(worst < 1.0), float(worst), worst_rho)


def constraint_rows(cfg, arm_lo, arm_hi, envelope=False):
    """Z rows (F, G, offset 1 after normalization) for one arm interval.

    State rows, per-channel wrench rows, and the hinge-torque rows enforced
    at both ends of the arm interval (the arm is unknown within it). The
    optional stopping-distance envelope rows are controller-internal.
    """
    f_rows, g_rows = [], []
    for i, bnd in enumerate((cfg.theta_bound, cfg.rate_bound)):
        for s in (1.0, -1.0):
            fr = np.zeros(2)
            fr[i] = s / bnd
            f_rows.append(fr)
            g_rows.append(np.zeros(6))
    if envelope and cfg.envelope_slope > 0:
        for s in (1.0, -1.0):
            f_rows.append(s * np.array([1.0, cfg.envelope_slope]) / cfg.theta_bound)
            g_rows.append(np.zeros(6))
    bounds = [cfg.force_bound] * 3 + [cfg.torque_bound] * 3
    for c, bnd in enumerate(bounds):
        for s in (1.0, -1.0):
            gr = np.zeros(6)
            gr[c] = s / bnd
            f_rows.append(np.zeros(2))
            g_rows.append(gr)
    for arm in (arm_lo, arm_hi):
        base = np.array([-arm, -1.0, 0.0, 0.0, 0.0, 1.0]) / cfg.hinge_bound
        for s in (1.0, -1.0):
            f_rows.append(np.zeros(2))
            g_rows.append(s * base)
    return np.array(f_rows), np.array(g_rows)


def hinge_row(cfg, arm, sign):
    return sign * np.array([-arm, -1.0, 0.0, 0.0, 0.0, 1.0]) / cfg.hinge_bound


def tube_disturbance_set(cfg, plant_cfg):
    """Disturbance box the tube robustifies against: the exogenous bound
    inflated in the rate channel by the Coulomb-friction magnitude bound
    (friction is compensated exactly in the estimator data but is unknown
    across the predicted tube)."""
    fric = plant_cfg.h * plant_cfg.mu * plant_cfg.r_e / plant_cfg.inertia
    lo = np.array([-plant_cfg.delta_w, -(plant_cfg.delta_w + fric)])
    return Polytope.box(lo, -lo)


def precompute_support_bounds(cfg, plant_cfg):
    """(f_bar, w_bar): constraint tightening over the cross-section and the
    disturbance support over the inflated disturbance set."""
    h_x, verts = cfg.cross_section()
    f_mat, g_mat = constraint_rows(cfg, -cfg.prior_bound, cfg.prior_bound)
    rows = f_mat + g_mat @ cfg.gain
    f_bar = np.abs(rows @ verts.T).max(axis=1)
    w_set = tube_disturbance_set(cfg, plant_cfg)
    w_bar = np.array([w_set.support(h) for h in h_x])
    return f_bar, w_bar


def closed_loop_vertex_maps(cfg, plant_cfg, bound=None):
    """Discrete closed-loop matrices at the prior-box vertices."""
    bound = cfg.prior_bound if bound is None else bound
    mats = []
    for rho in itertools.product((-bound, bound), repeat=3):
        a, b = plant_mod.build_matrices(np.array(rho), plant_cfg)
        mats.append(np.eye(2) + plant_cfg.h * (a + b @ cfg.gain))
    return mats


def contraction_factor(cfg, plant_cfg):
    """Worst row-gauge of the closed loop over prior vertices: the factor by
    which the cross-section certifies to shrink in one step."""
    h_x, verts = cfg.cross_section()
    worst = 0.0
    for a_cl in closed_loop_vertex_maps(cfg, plant_cfg):
        worst = max(worst, float(np.abs(h_x @ a_cl @ verts.T).max()))
    return worst


def terminal_scale(cfg, plant_cfg, tol=1e-4):
    """Largest theta_bar whose scaled cross-section is robustly invariant and
    constraint-admissible under u = Kx, by bisection on the admissibility
    predicate with the invariance condition verified at the result."""
    report = validate_gain(cfg.gain, cfg, plant_cfg)
    if not report.ok:
        raise ValueError(
            f"gain fails prior-box validation (radius {report.worst_radius:.4f})")
    h_x, verts = cfg.cross_section()
    w_set = tube_disturbance_set(cfg, plant_cfg)
    w_bar = np.array([w_set.support(h) for h in h_x])
    a_cls = closed_loop_vertex_maps(cfg, plant_cfg)
    f_mat, g_mat = constraint_rows(cfg, -cfg.prior_bound, cfg.prior_bound)
    zrows = f_mat + g_mat @ cfg.gain
    f_bar = np.abs(zrows @ verts.T).max(axis=1)

    def ok(theta):
        inv = all(
            np.all(np.abs(h_x @ a @ (theta * verts.T)).max(axis=1) + w_bar
                   <= theta + 1e-12)
            for a in a_cls)
        adm = np.all(theta * f_bar <= 1.0 + 1e-12)
        return inv and adm

    hi = 1.0 / max(f_bar.max(), 1e-9)
    if ok(hi):
        lo = hi
        probe = 2.0 * hi
        while ok(probe) and probe < 1e6:
            lo, probe = probe, 2.0 * probe
        hi = probe
    else:
        lo, probe = 0.0, hi
        for _ in range(80):
            probe *= 0.5
            if probe < 1e-12:
                raise ValueError("terminal set empty: no positive scale is "
                                 "robustly invariant (Assumption-3 violation)")
            if ok(probe):
                lo = probe
                break
        else:
            raise ValueError("terminal set empty")
    a, b = lo, hi
    while b - a > tol:
        mid = 0.5 * (a + b)
        if ok(mid):
            a = mid
        else:
            b = mid
    contr = contraction_factor(cfg, plant_cfg)
    if contr > cfg.lam:
        raise ValueError(
            f"cross-section contraction {contr:.4f} exceeds lambda={cfg.lam}")
    return a


class ProbeReference:
    """Steady-state response of the nominal closed loop to the probe tones.

    Used only inside the cost: the tube and every constraint remain absolute.
    """

    def __init__(self, cfg, plant_cfg):
        a, b = plant_mod.build_matrices(cfg.rho_nominal, plant_cfg)
        a_cl = a + b @ cfg.gain
        self.probe = cfg.probe
        self.h = plant_cfg.h
        self.tones = []
        m_eff = plant_cfg.inertia
        cols = {0: np.array([0.0, -cfg.rho_nominal[2] / m_eff]),
                1: np.array([0.0, -1.0 / m_eff])}
        for amp, freq in zip(cfg.probe.fy_amps, cfg.probe.fy_freqs):
            gvec = np.linalg.solve(1j * freq * np.eye(2) - a_cl, cols[1])
            self.tones.append((amp, freq, gvec))
        gvec = np.linalg.solve(1j * cfg.probe.fx_freq * np.eye(2) - a_cl,
                               cols[0])
        self.tones.append((cfg.probe.fx_amp, cfg.probe.fx_freq, gvec))

    def state(self, k):
        t = k * self.h
        s = self.probe.scale(t)
        r = np.zeros(2)
        for amp, freq, gvec in self.tones:
            r += s * amp * (gvec.real * np.sin(freq * t)
                            + gvec.imag * np.cos(freq * t))
        return r


@dataclass
class TubeSolution:
    status: str
    z: np.ndarray = None            # (N+1, 2) tube centers
    theta: np.ndarray = None        # (N+1,) scalings, >= 0
    v: np.ndarray = None            # (N, 6) input offsets incl. the probe
    multipliers: np.ndarray = None  # (N, v, 2, n_p) dual certificates
    cost: float = np.nan
    terminal_active: bool = False
    solve_time: float = 0.0


class StepLpBuilder:
    """Assembles the per-step LP on a fixed sparsity skeleton.

    Only coefficients tied to the predicted parameter-set offsets, the probe
    schedule, the arm interval, and the measured state change between steps;
    everything else is filled once.
    """

    def __init__(self, cfg, plant_cfg, template_normals, theta_bar):
        self.cfg = cfg
        self.plant_cfg = plant_cfg
        self.template = template_normals
        self.theta_bar = theta_bar
        self.n = cfg.horizon
        self.h_x, self.verts = cfg.cross_section()
        self.n_xrows = self.h_x.shape[0]
        self.n_verts = self.verts.shape[0]
        ad0, _, bd0, _ = plant_mod.discrete_basis(plant_cfg)
        self.ad0, self.bd0 = ad0, bd0
        self.ak = ad0 + bd0 @ cfg.gain
        self.scale = plant_cfg.h / plant_cfg.inertia
        self.k_fx = cfg.gain[0, :]
        _, self.w_bar = precompute_support_bounds(cfg, plant_cfg)
        self.c_vec = self.h_x[:, 1]   # H_x . D picks the rate row of D
        self.reference = ProbeReference(cfg, plant_cfg)
        self.f_static, self.g_static = constraint_rows(cfg, 0.0, 0.0,
                                                       envelope=True)
        self.n_static = self.f_static.shape[0] - 4
        self.env_rows = (4, 5) if cfg.envelope_slope > 0 else ()
        # fx is probe-only (sign-indefinite arm) and fz/tx/ty never act on
        # the hinge: their offsets are fixed at zero
        self.pinned_channels = (0, 2, 3, 4)

        n, v = self.n, self.n_verts
        self.n_p = cfg.n_template_rows
        self.iz = lambda s: 2 * s
        self.it = lambda s: 2 * (n + 1) + s
        self.iv = lambda s: 3 * (n + 1) + 6 * s
        g0 = 3 * (n + 1) + 6 * n
        self.ig = lambda s, j, sgn: g0 + ((s * v + j) * 2 + sgn) * self.n_p
        self.g_end = g0 + n * v * 2 * self.n_p
        self.ia = lambda s, j: self.g_end + 2 * (s * v + j)
        t0 = self.g_end + 2 * n * v
        self.itc = lambda s: t0 + s
        e0 = t0 + (n + 1)
        self.ienv = lambda s: e0 + s
        self.itf = e0 + (n + 1)
        self.n_vars = self.itf + 1
        self._build_skeleton()

    def _build_skeleton(self):
        cfg, n, v = self.cfg, self.n, self.n_verts
        rows_eq, cols_eq, data_eq = [], [], []
        rows_ub, cols_ub, data_ub = [], [], []

        def put(bucket, r, c, d):
            br, bc, bd = bucket
            br.extend(np.atleast_1d(r).tolist())
            bc.extend(np.atleast_1d(c).tolist())
            bd.extend(np.atleast_1d(np.asarray(d, dtype=float)).tolist())

        eq_b = (rows_eq, cols_eq, data_eq)
        ub_b = (rows_ub, cols_ub, data_ub)
        h_t = self.template.T

        # equality rows: gamma+^T H = D2, gamma-^T H = -D2 (decision parts
        # moved left; the probe part of D2 lands on the rhs)
        row = 0
        eq_probe = []  # (row, stage, pm)
        for s in range(n):
            for j in range(v):
                xj = self.verts[j]
                for sgn, pm in ((0, 1.0), (1, -1.0)):
                    base = self.ig(s, j, sgn)
                    for r3 in range(3):
                        put(eq_b, [row] * self.n_p,
                            range(base, base + self.n_p), h_t[r3])
                        if r3 < 2:
                            put(eq_b, [row, row],
                                [self.iz(s) + r3, self.it(s)],
                                [pm * self.scale, pm * self.scale * xj[r3]])
                        else:
                            put(eq_b, [row] * 4,
                                [self.iz(s), self.iz(s) + 1, self.it(s),
                                 self.iv(s)],
                                [pm * self.scale * self.k_fx[0],
                                 pm * self.scale * self.k_fx[1],
                                 pm * self.scale * (self.k_fx @ xj),
                                 pm * self.scale])
                            eq_probe.append((row, s, pm))
                        row += 1
        self.n_eq = row
        self._eq_probe = tuple(np.array(x) for x in zip(*eq_probe))

        urow = 0
        # 23b: -H_x z0 - theta0 <= -H_x x_k
        x0_rows = []
        for i in range(self.n_xrows):
            put(ub_b, [urow] * 3, [self.iz(0), self.iz(0) + 1, self.it(0)],
                [-self.h_x[i, 0], -self.h_x[i, 1], -1.0])
            x0_rows.append(urow)
            urow += 1
        self._x0_rows = np.array(x0_rows)

        # 23c inclusion rows; gamma coefficients mutable
        g_slot, g_stage, g_mag = [], [], []
        incl_rows, incl_stage, incl_xrow = [], [], []
        hx_ak = self.h_x @ self.ak
        hx_b = self.h_x @ self.bd0
        for s in range(n):
            for j in range(v):
                xj = self.verts[j]
                hx_ak_x = hx_ak @ xj
                for i in range(self.n_xrows):
                    ci = self.c_vec[i]
                    if abs(ci) > 1e-14:
                        sgn = 0 if ci > 0 else 1
                        base = self.ig(s, j, sgn)
                        g_slot.append(len(data_ub))
                        g_stage.append(s)
                        g_mag.append(abs(ci))
                        put(ub_b, [urow] * self.n_p,
                            range(base, base + self.n_p), np.zeros(self.n_p))
                    put(ub_b, [urow] * 2, [self.iz(s), self.iz(s) + 1],
                        hx_ak[i])
                    put(ub_b, [urow], [self.it(s)], [hx_ak_x[i]])
                    put(ub_b, [urow] * 6, range(self.iv(s), self.iv(s) + 6),
                        hx_b[i])
                    put(ub_b, [urow] * 2,
                        [self.iz(s + 1), self.iz(s + 1) + 1], -self.h_x[i])
                    put(ub_b, [urow], [self.it(s + 1)], [-1.0])
                    incl_rows.append(urow)
                    incl_stage.append(s)
                    incl_xrow.append(i)
                    urow += 1
        self._g_slot = np.array(g_slot)
        self._g_stage = np.array(g_stage)
        self._g_mag = np.array(g_mag)
        self._incl = (np.array(incl_rows), np.array(incl_stage),
                      np.array(incl_xrow))

        # 23a static rows per stage (state box, envelope, channels)
        zrow_rows, zrow_stage, zrow_rr = [], [], []
        rows_fk = self.f_static[:self.n_static] \
            + self.g_static[:self.n_static] @ cfg.gain
        fbar_static = np.abs(rows_fk @ self.verts.T).max(axis=1)
        for s in range(n):
            for rr in range(self.n_static):
                put(ub_b, [urow] * 2, [self.iz(s), self.iz(s) + 1],
                    rows_fk[rr])
                put(ub_b, [urow], [self.it(s)], [fbar_static[rr]])
                put(ub_b, [urow] * 6, range(self.iv(s), self.iv(s) + 6),
                    self.g_static[rr])
                if rr in self.env_rows:
                    put(ub_b, [urow], [self.ienv(s)], [-1.0])
                zrow_rows.append(urow)
                zrow_stage.append(s)
                zrow_rr.append(rr)
                urow += 1
        self._zrow = (np.array(zrow_rows), np.array(zrow_stage),
                      np.array(zrow_rr))

        # hinge rows per stage: fully mutable coefficients
        hinge = []
        for s in range(n):
            for hr in range(4):
                slot_z = len(data_ub)
                put(ub_b, [urow] * 2, [self.iz(s), self.iz(s) + 1], [0.0, 0.0])
                slot_t = len(data_ub)
                put(ub_b, [urow], [self.it(s)], [0.0])
                slot_v = len(data_ub)
                put(ub_b, [urow] * 6, range(self.iv(s), self.iv(s) + 6),
                    np.zeros(6))
                hinge.append((urow, slot_z, slot_t, slot_v, s, hr))
                urow += 1
        self._hinge = hinge

        # stage-N state rows (box + envelope)
        n_state_rows = 4 + len(self.env_rows)
        stageN_rows = []
        for rr in range(n_state_rows):
            fr = self.f_static[rr]
            put(ub_b, [urow] * 2, [self.iz(n), self.iz(n) + 1], fr)
            put(ub_b, [urow], [self.it(n)], [np.abs(fr @ self.verts.T).max()])
            if rr in self.env_rows:
                put(ub_b, [urow], [self.ienv(n)], [-1.0])
            stageN_rows.append(urow)
            urow += 1
        self._stageN_rows = np.array(stageN_rows)

        # cost epigraph rows; rhs tracks the probe reference
        q = cfg.q_weight
        rk = cfg.r_weight @ cfg.gain
        qcost, rcost = [], []
        for s in range(n):
            for j in range(v):
                xj = self.verts[j]
                ia = self.ia(s, j)
                for rr in range(2):
                    for sg in (1.0, -1.0):
                        put(ub_b, [urow] * 3,
                            [self.iz(s), self.iz(s) + 1, self.it(s)],
                            [sg * q[rr, 0], sg * q[rr, 1], sg * (q[rr] @ xj)])
                        put(ub_b, [urow], [ia], [-1.0])
                        qcost.append((urow, s, rr, sg))
                        urow += 1
                for rr in range(6):
                    if rr in self.pinned_channels and not np.any(cfg.gain[rr]):
                        continue  # channel is identically zero
                    for sg in (1.0, -1.0):
                        put(ub_b, [urow] * 3,
                            [self.iz(s), self.iz(s) + 1, self.it(s)],
                            [sg * rk[rr, 0], sg * rk[rr, 1],
                             sg * (rk[rr] @ xj)])
                        put(ub_b, [urow], [self.iv(s) + rr],
                            [sg * cfg.r_weight[rr, rr]])
                        put(ub_b, [urow], [ia + 1], [-1.0])
                        rcost.append((urow, s, rr, sg))
                        urow += 1
                put(ub_b, [urow] * 3, [ia, ia + 1, self.itc(s)],
                    [1.0, 1.0, -1.0])
                urow += 1
        termq = []
        for j in range(v):
            xj = self.verts[j]
            for rr in range(2):
                for sg in (1.0, -1.0):
                    put(ub_b, [urow] * 3,
                        [self.iz(n), self.iz(n) + 1, self.itc(n)],
                        [sg * q[rr, 0], sg * q[rr, 1], -1.0])
                    put(ub_b, [urow], [self.it(n)], [sg * (q[rr] @ xj)])
                    termq.append((urow, rr, sg))
                    urow += 1
        self._qcost = tuple(np.array(x) for x in zip(*qcost))
        self._rcost = tuple(np.array(x) for x in zip(*rcost))
        self._termq = tuple(np.array(x) for x in zip(*termq))

        # terminal cost-to-go rows: t_f >= c_f H_x (z_N - r_N). The tube
        # scaling theta_N is deliberately not charged here: charging it makes
        # cancelling the exploration probe cheaper than tracking it (probe
        # excitation inflates the parametric spread), and feasibility rows
        # already bound theta.
        ctg = []
        if cfg.terminal_cost_scale > 0:
            lam_c = contraction_factor(cfg, self.plant_cfg)
            per_gauge = float(np.abs(q @ self.verts.T).max())
            self.cost_to_go = (cfg.terminal_cost_scale * per_gauge
                               / max(1e-6, 1.0 - lam_c))
            for i in range(self.n_xrows):
                put(ub_b, [urow] * 3,
                    [self.iz(n), self.iz(n) + 1, self.itf],
                    [self.cost_to_go * self.h_x[i, 0],
                     self.cost_to_go * self.h_x[i, 1], -1.0])
                ctg.append(urow)
                urow += 1
        else:
            self.cost_to_go = 0.0
        self._ctg_rows = np.array(ctg, dtype=int)

        self.n_ub = urow
        self._eq_coo = (np.array(rows_eq), np.array(cols_eq),
                        np.array(data_eq))
        self._ub_coo = (np.array(rows_ub), np.array(cols_ub),
                        np.array(data_ub))
        self._a_eq = csc_matrix(
            (self._eq_coo[2], (self._eq_coo[0], self._eq_coo[1])),
            shape=(self.n_eq, self.n_vars))

        c = np.zeros(self.n_vars)
        for s in range(n + 1):
            c[self.itc(s)] = 1.0
            c[self.ienv(s)] = cfg.envelope_weight
            c[self.it(s)] = 1e-3   # keep degenerate tube scalings tidy
        c[self.itf] = 1.0
        self.objective = c

        lb = np.full(self.n_vars, -np.inf)
        ub = np.full(self.n_vars, np.inf)
        for s in range(n + 1):
            lb[self.it(s)] = 0.0
        for s in range(n):
            # in particular the optimizer cannot cancel the fx exploration tone
            for ch in self.pinned_channels:
                lb[self.iv(s) + ch] = ub[self.iv(s) + ch] = 0.0
        lb[self.ig(0, 0, 0):self.g_end] = 0.0
        lb[self.ia(0, 0):self.n_vars] = 0.0
        self._lb, self._ub_bounds = lb, ub

        # gamma fill slots expanded once
        self._g_fill = (self._g_slot[:, None]
                        + np.arange(self.n_p)[None, :]).ravel()

    def build(self, x, psets, k, terminal_on):
        cfg, n = self.cfg, self.n
        h = self.plant_cfg.h
        probes = np.array([cfg.probe.wrench(k + s, h) for s in range(n)])
        refs = np.array([self.reference.state(k + s) for s in range(n + 1)])
        deltas = np.array([p.offsets for p in psets])
        arms = [p.arm_interval() for p in psets]

        eq_rhs = np.zeros(self.n_eq)
        rows, stages, pms = self._eq_probe
        eq_rhs[rows] = -pms * self.scale * probes[stages, 0]

        data = self._ub_coo[2].copy()
        data[self._g_fill] = (self._g_mag[:, None]
                              * deltas[self._g_stage]).ravel()
        hinge_rhs = {}
        for urow, slot_z, slot_t, slot_v, s, hr in self._hinge:
            arm = arms[s][0] if hr < 2 else arms[s][1]
            g_row = hinge_row(cfg, arm, 1.0 if hr % 2 == 0 else -1.0)
            row_fk = g_row @ cfg.gain
            data[slot_z:slot_z + 2] = row_fk
            data[slot_t] = np.abs(row_fk @ self.verts.T).max()
            data[slot_v:slot_v + 6] = g_row
            hinge_rhs[urow] = 1.0 - g_row @ probes[s]

        b_ub = np.zeros(self.n_ub)
        b_ub[self._x0_rows] = -(self.h_x @ x)
        ri, rs, rx = self._incl
        hx_be = (self.h_x @ self.bd0 @ probes.T)
        b_ub[ri] = -self.w_bar[rx] - hx_be[rx, rs]
        zi, zs, zr = self._zrow
        gse = self.g_static[:self.n_static] @ probes.T
        b_ub[zi] = 1.0 - gse[zr, zs]
        for urow, val in hinge_rhs.items():
            b_ub[urow] = val
        b_ub[self._stageN_rows] = 1.0
        qi, qs, qr, qg = self._qcost
        qref = cfg.q_weight @ refs.T
        b_ub[qi] = qg * qref[qr, qs]
        ri2, rs2, rr2, rg2 = self._rcost
        rkref = (cfg.r_weight @ cfg.gain) @ refs.T
        b_ub[ri2] = rg2 * rkref[rr2, rs2]
        ti, tr, tg = self._termq
        b_ub[ti] = tg * qref[tr, n]
        if self._ctg_rows.size:
            b_ub[self._ctg_rows] = self.cost_to_go * (self.h_x @ refs[n])

        a_ub = csc_matrix((data, (self._ub_coo[0], self._ub_coo[1])),
                          shape=(self.n_ub, self.n_vars))
        lb = self._lb.copy()
        ub = self._ub_bounds.copy()
        if terminal_on:
            lb[self.iz(n)] = ub[self.iz(n)] = 0.0
            lb[self.iz(n) + 1] = ub[self.iz(n) + 1] = 0.0
            ub[self.it(n)] = self.theta_bar
        return self._a_eq, eq_rhs, a_ub, b_ub, np.column_stack([lb, ub])


class RampcController:
    """Per-run controller: owns the estimator chain and the LP builder."""

    def __init__(self, cfg, plant_cfg, pset, theta_bar=None):
        self.cfg = cfg
        self.plant_cfg = plant_cfg
        self.pset = pset
        self.theta_bar = (terminal_scale(cfg, plant_cfg)
                          if theta_bar is None else theta_bar)
        self.builder = StepLpBuilder(cfg, plant_cfg, pset.normals,
                                     self.theta_bar)
        self.w_est = Polytope.inf_ball(plant_cfg.delta_w, 2)
        self.terminal_latched = False
        self.fallback_count = 0
        self.last_solution = None

    def predicted_sets(self):
        return predict_param_sets(self.pset, self.cfg.horizon)

    def solve_step(self, x, k):
        """One MPC solve; returns (wrench or None, TubeSolution)."""
        psets = self.predicted_sets()
        want_terminal = self.terminal_latched or (
            self.cfg.gauge(x) <= self.theta_bar)
        t0 = time.perf_counter()
        sol = self._solve(x, psets, k, want_terminal)
        if sol.status != FEASIBLE and want_terminal:
            sol = self._solve(x, psets, k, False)
        sol.solve_time = time.perf_counter() - t0
        if sol.status != FEASIBLE:
            self.last_solution = sol
            return None, sol
        if sol.terminal_active:
            self.terminal_latched = True
        self.last_solution = sol
        u = self.cfg.gain @ np.asarray(x) + sol.v[0]
        return u, sol

    def _solve(self, x, psets, k, terminal_on):
        b = self.builder
        a_eq, b_eq, a_ub, b_ub, bounds = b.build(x, psets, k, terminal_on)
        res = linprog(b.objective, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq,
                      b_eq=b_eq, bounds=bounds, method="highs",
                      options={"presolve": False})
        if res.status == 2:
            return TubeSolution(INFEASIBLE_STATUS, terminal_active=terminal_on)
        if res.status != 0:
            return TubeSolution(SOLVER_ERROR_STATUS,
                                terminal_active=terminal_on)
        n, v = b.n, b.n_verts
        sol_x = res.x
        z = np.array([sol_x[b.iz(s):b.iz(s) + 2] for s in range(n + 1)])
        theta = np.array([sol_x[b.it(s)] for s in range(n + 1)])
        probes = np.array([self.cfg.probe.wrench(k + s, self.plant_cfg.h)
                           for s in range(n)])
        vhat = np.array([sol_x[b.iv(s):b.iv(s) + 6] for s in range(n)])
        gam = np.array([[[sol_x[b.ig(s, j, sgn):b.ig(s, j, sgn) + b.n_p]
                          for sgn in (0, 1)] for j in range(v)]
                        for s in range(n)])
        cost = float(res.fun) + self._exploration_terms(psets)
        return TubeSolution(FEASIBLE, z=z, theta=theta, v=vhat + probes,
                            multipliers=gam, cost=cost,
                            terminal_active=terminal_on)

    def _exploration_terms(self, psets):
        """Stage-constant worst-case ||Upsilon rho||_inf from the predicted
        sets' axis-row offsets (exact for boxes, outer otherwise)."""
        ups = np.diag(self.cfg.upsilon)
        if not np.any(ups):
            return 0.0
        total = 0.0
        sets = list(psets)
        sets.append(ParamSet(self.pset.normals,
                             self.pset.predicted_offsets(self.cfg.horizon),
                             self.pset.phi, self.pset.prior_offsets))
        for p in sets:
            hi = np.maximum(p.offsets[0:3], p.offsets[3:6])
            total += float(np.max(ups * hi))
        return total

    def observe(self, x, u, x_next):
        """Set-membership update from the executed transition."""
        reg = regressor(x, u, x_next, self.plant_cfg)
        delta = nonfalsified_set(reg, self.w_est)
        new_set, used = update_param_set(self.pset, delta, steps=1)
        if not used:
            self.fallback_count += 1
        self.pset = new_set
