"""Ground-truth hinge simulator.

Single revolute joint with spring stiffness, viscous and Coulomb friction,
driven by the end-effector wrench through a time-varying moment arm. The
discrete model is explicit Euler with all continuous torque terms scaled by
the sample period h; the additive disturbance w is the discretized exogenous
torque [0, h*tau_s/M].

rho = [K, zeta, D]: stiffness (N m/rad), viscous coefficient (N m s/rad),
effective moment arm (m). Wrench u = [fx, fy, fz, tx, ty, tz]; only fx
(through -D), fy (through -1) and tz (through +1) act on the hinge.
"""

from dataclasses import dataclass, field

import numpy as np


class SimulationFault(RuntimeError):
    pass


@dataclass(frozen=True)
class PlantConfig:
    """Physical constants (Table-I values are the defaults)."""

    m: float = 1.8            # panel mass (kg)
    d_s: float = 1.2          # CoM distance from the hinge axis (m)
    d_g: float = 2.5          # contact distance (m)
    mu: float = 0.3           # Coulomb coefficient
    r_e: float = 0.2          # effective rotor radius (m)
    i_cm: float = 1.5         # link inertia about CoM (kg m^2)
    j_m: float = 4.1          # motor-side inertia (kg m^2)
    eps: float = 1e-3         # friction smoothing (rad/s)
    h: float = 0.05           # sample period (s)
    delta_w: float = 1.220703125e-4  # inf-bound of the discrete disturbance

    def __post_init__(self):
        for name in ("m", "d_s", "d_g", "mu", "r_e", "i_cm", "j_m", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.h < 1.0:
            raise ValueError("sample period must lie in (0, 1)")
        if self.delta_w < 0:
            raise ValueError("disturbance bound must be nonnegative")

    @property
    def inertia(self):
        """Reflected single-joint inertia M = J_m + I_cm + m d_s^2."""
        return self.j_m + self.i_cm + self.m * self.d_s ** 2


@dataclass(frozen=True)
class TruthSchedule:
    """True parameter trajectories rho*(k) = base + amp * sin(rate * k)."""

    base: np.ndarray = field(default_factory=lambda: np.array([0.45, 0.6, 2.5]))
    amp: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.15, 0.2]))
    rate: float = 0.1

    def frozen(self):
        """Constant-parameter variant (amplitudes zeroed)."""
        return TruthSchedule(base=self.base.copy(), amp=np.zeros(3), rate=self.rate)

    def max_step_change(self):
        """Upper bound on ||rho*(k+1) - rho*(k)||_2 for any k."""
        return float(np.linalg.norm(self.amp) * 2.0 * np.sin(self.rate / 2.0))


def true_params(schedule, k):
    """rho*(k), evaluated exactly from the schedule."""
    if k < 0:
        raise ValueError("step index must be nonnegative")
    return schedule.base + schedule.amp * np.sin(schedule.rate * k)


def coulomb_friction(theta_dot, cfg):
    """Smoothed Coulomb friction torque -mu r_e thetadot/(|thetadot|+eps)."""
    return -cfg.mu * cfg.r_e * theta_dot / (abs(theta_dot) + cfg.eps)


def friction_offset(theta_dot, cfg):
    """Discrete state offset of the friction torque (dissipative sign).

    tau_f already carries the sign opposing the motion, so it enters the
    acceleration as +tau_f/M; scaled by h like every other torque term.
    """
    return np.array([0.0, cfg.h * coulomb_friction(theta_dot, cfg) / cfg.inertia])


def build_matrices(rho, cfg):
    """Continuous-time A(rho), B(rho) of the linear parametric model."""
    rho = np.asarray(rho, dtype=float)
    if not np.all(np.isfinite(rho)):
        raise ValueError("non-finite parameter vector")
    m_eff = cfg.inertia
    if m_eff <= 0:
        raise ValueError("effective inertia must be positive")
    a = np.array([[0.0, 1.0], [-rho[0] / m_eff, -rho[1] / m_eff]])
    b = np.zeros((2, 6))
    b[1, :] = np.array([-rho[2], -1.0, 0.0, 0.0, 0.0, 1.0]) / m_eff
    return a, b


def continuous_basis(cfg):
    """Affine decomposition A(rho)=A0+sum Ai rho_i, B(rho)=B0+sum Bi rho_i."""
    m_eff = cfg.inertia
    a0 = np.array([[0.0, 1.0], [0.0, 0.0]])
    a_list = [np.zeros((2, 2)) for _ in range(3)]
    a_list[0][1, 0] = -1.0 / m_eff   # stiffness channel
    a_list[1][1, 1] = -1.0 / m_eff   # viscous channel
    b0 = np.zeros((2, 6))
    b0[1, 1] = -1.0 / m_eff          # fy lever (small-angle -1)
    b0[1, 5] = 1.0 / m_eff           # tz direct
    b_list = [np.zeros((2, 6)) for _ in range(3)]
    b_list[2][1, 0] = -1.0 / m_eff   # moment arm on fx
    return a0, a_list, b0, b_list


def discrete_basis(cfg):
    """Euler-discretized affine basis: Ad(rho) = I + h A(rho), Bd = h B(rho)."""
    a0, a_list, b0, b_list = continuous_basis(cfg)
    ad0 = np.eye(2) + cfg.h * a0
    ad = [cfg.h * m for m in a_list]
    bd0 = cfg.h * b0
    bd = [cfg.h * m for m in b_list]
    return ad0, ad, bd0, bd


def discrete_matrices(rho, cfg):
    a, b = build_matrices(rho, cfg)
    return np.eye(2) + cfg.h * a, cfg.h * b


def hinge_torque(u, arm):
    """Effective hinge torque -D fx - fy + tz for moment arm D."""
    return -arm * u[0] - u[1] + u[5]


def step_truth(x, u, k, w, cfg, schedule):
    """One Euler step of the true plant with disturbance w in W."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    rho = true_params(schedule, k)
    a_d, b_d = discrete_matrices(rho, cfg)
    x_next = a_d @ x + b_d @ u + friction_offset(x[1], cfg) + w
    if not np.all(np.isfinite(x_next)):
        raise SimulationFault(f"non-finite state at step {k}: {x_next}")
    return x_next


def sample_disturbance(rng, delta_w):
    """Exogenous disturbance: uniform on [-delta_w, delta_w] in the rate
    channel, zero in the angle channel (w = [0, tau/M] structure)."""
    return np.array([0.0, rng.uniform(-delta_w, delta_w)])
