"""Cart-pole physics and the discrete-time stochastic plant.

State order is fixed as ``(s, s_dot, theta, theta_dot)``: cart position [m],
cart velocity [m/s], pole angle [rad], pole angular velocity [rad/s]. The
angle is measured from the upright position and is positive when the pole
leans towards negative ``s``; with that convention the cart acceleration
grows with ``theta``. The single input is the motor voltage [V].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

STATE_LABELS = ("s", "s_dot", "theta", "theta_dot")


class DiscretizationError(ArithmeticError):
    pass


class TrackLimitExceeded(RuntimeError):
    """Raised when the cart leaves the track; ends an experiment."""

    def __init__(self, position, limit):
        super().__init__(f"cart position {position:+.4f} m outside +/-{limit} m")
        self.position = position
        self.limit = limit


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 0.57
    pole_mass: float = 0.23
    pole_half_length: float = 0.1778
    gravity: float = 9.81
    cart_friction: float = 4.9
    input_gain: float = 1.6

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_half_length", "gravity", "input_gain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not self.cart_friction >= 0:
            raise ValueError("cart_friction must be nonnegative")


@dataclass(frozen=True)
class ContinuousLti:
    A_c: np.ndarray
    B_c: np.ndarray

    def __post_init__(self):
        A_c = np.atleast_2d(np.asarray(self.A_c, dtype=float))
        B_c = np.atleast_2d(np.asarray(self.B_c, dtype=float))
        n = A_c.shape[0]
        if A_c.shape != (n, n) or B_c.shape[0] != n:
            raise ValueError(f"inconsistent shapes A_c {A_c.shape}, B_c {B_c.shape}")
        if not (np.all(np.isfinite(A_c)) and np.all(np.isfinite(B_c))):
            raise ValueError("non-finite entries in continuous-time model")
        object.__setattr__(self, "A_c", A_c)
        object.__setattr__(self, "B_c", B_c)

    @property
    def state_dim(self):
        return self.A_c.shape[0]

    @property
    def input_dim(self):
        return self.B_c.shape[1]


@dataclass(frozen=True)
class PlantConstraints:
    input_cap: float = 10.0
    track_limit: float = 0.25

    def __post_init__(self):
        if not (self.input_cap > 0 and self.track_limit > 0):
            raise ValueError("input_cap and track_limit must be strictly positive")


def linearize_cartpole(params: CartPoleParams) -> ContinuousLti:
    """Linearize the cart-pole about the upright equilibrium.

    The pole is a uniform rod of half-length ``l`` (inertia ``m l^2 / 3``
    about its centre), the cart sees viscous friction ``b`` and a motor
    force ``input_gain * u``.
    """
    M, m = params.cart_mass, params.pole_mass
    l, g, b, k = params.pole_half_length, params.gravity, params.cart_friction, params.input_gain
    J = m * l**2 / 3.0 + m * l**2
    D = (M + m) * J - (m * l) ** 2
    A_c = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -J * b / D, (m * l) ** 2 * g / D, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, -m * l * b / D, (M + m) * m * g * l / D, 0.0],
    ])
    B_c = np.array([[0.0], [J * k / D], [0.0], [m * l * k / D]])
    return ContinuousLti(A_c, B_c)


def discretize(sys: ContinuousLti, T_U: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization with sampling interval ``T_U`` [s].

    Both matrices come out of one exponential of the block matrix
    ``[[A_c, B_c], [0, 0]] * T_U``.
    """
    if not T_U > 0:
        raise ValueError("T_U must be positive")
    n, m = sys.state_dim, sys.input_dim
    block = np.zeros((n + m, n + m))
    block[:n, :n] = sys.A_c
    block[:n, n:] = sys.B_c
    E = scipy.linalg.expm(block * T_U)
    A, B = E[:n, :n], E[:n, n:]
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise DiscretizationError(f"non-finite ZOH discretization at T_U={T_U}")
    return A, B


def process_noise_covariance(sys: ContinuousLti, Q_c, T_U: float) -> np.ndarray:
    """Covariance of the sampled process noise for white noise of density ``Q_c``.

    ``int_0^T exp(A_c t) Q_c exp(A_c^T t) dt``, evaluated with Van Loan's
    block-exponential construction.
    """
    if not T_U > 0:
        raise ValueError("T_U must be positive")
    n = sys.state_dim
    Q_c = _as_cov(Q_c, n, "Q_c")
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -sys.A_c
    M[:n, n:] = Q_c
    M[n:, n:] = sys.A_c.T
    E = scipy.linalg.expm(M * T_U)
    Phi = E[n:, n:].T
    S = Phi @ E[:n, n:]
    return 0.5 * (S + S.T)


# Nominal noise for the cart-pole. Process noise is white acceleration noise
# (densities in (m/s^2)^2/Hz and (rad/s^2)^2/Hz) standing in for unmodelled
# friction and cogging. Measurement noise is uniform quantization of a
# 2.275e-5 m/count cart encoder and a 4096 count/rev pole encoder, with
# velocities from 10 ms finite differences.
NOMINAL_PROCESS_DENSITY = np.diag([0.0, 1e-3, 0.0, 1e-2])
_Q_S = 2.275e-5 / np.sqrt(12.0)
_Q_TH = 2.0 * np.pi / 4096 / np.sqrt(12.0)
NOMINAL_MEASUREMENT_STD = np.array([_Q_S, np.sqrt(2.0) * _Q_S / 0.01, _Q_TH, np.sqrt(2.0) * _Q_TH / 0.01])


def nominal_noise(sys: ContinuousLti, T_U: float, scale: float = 1.0):
    """``(Sigma_proc, Sigma_meas)`` for the nominal cart-pole noise at ``T_U``."""
    if scale < 0:
        raise ValueError("scale must be nonnegative")
    Sp = process_noise_covariance(sys, NOMINAL_PROCESS_DENSITY * scale**2, T_U)
    Sm = np.diag((NOMINAL_MEASUREMENT_STD * scale) ** 2)
    return Sp, Sm


def _as_cov(S, n, name):
    S = np.zeros((n, n)) if S is None else np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape != (n, n):
        raise ValueError(f"{name} must be {n}x{n}, got {S.shape}")
    if not np.allclose(S, S.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(S).min() < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite")
    return S


def _gaussian_factor(S):
    # PSD-safe square root: Cholesky fails on singular covariances
    w, V = np.linalg.eigh(S)
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class LtiPlant:
    """Discrete-time plant ``x+ = A x + B u + v`` measured as ``y = x + w``."""

    A: np.ndarray
    B: np.ndarray
    Sigma_proc: np.ndarray = None
    Sigma_meas: np.ndarray = None
    x: np.ndarray = None
    T_U: float = 1.0
    constraints: PlantConstraints | None = None
    _proc_factor: np.ndarray = field(init=False, repr=False)
    _meas_factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n:
            raise ValueError(f"inconsistent shapes A {self.A.shape}, B {self.B.shape}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("A and B must be finite")
        if not self.T_U > 0:
            raise ValueError("T_U must be positive")
        self.Sigma_proc = _as_cov(self.Sigma_proc, n, "Sigma_proc")
        self.Sigma_meas = _as_cov(self.Sigma_meas, n, "Sigma_meas")
        self.x = np.zeros(n) if self.x is None else np.asarray(self.x, dtype=float).reshape(n).copy()
        self._proc_factor = _gaussian_factor(self.Sigma_proc)
        self._meas_factor = _gaussian_factor(self.Sigma_meas)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def retarget(self, A, B, T_U, Sigma_proc=None):
        """Swap in dynamics (and optionally process noise) for another update interval."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if A.shape != self.A.shape or B.shape != self.B.shape:
            raise ValueError("retargeted dynamics must keep dimensions")
        if not T_U > 0:
            raise ValueError("T_U must be positive")
        self.A, self.B, self.T_U = A, B, T_U
        if Sigma_proc is not None:
            self.Sigma_proc = _as_cov(Sigma_proc, self.n, "Sigma_proc")
            self._proc_factor = _gaussian_factor(self.Sigma_proc)

    def saturate(self, u):
        u = np.asarray(u, dtype=float).reshape(self.m)
        if self.constraints is None:
            return u
        cap = self.constraints.input_cap
        return np.clip(u, -cap, cap)

    def process_noise(self, rng):
        return self._proc_factor @ rng.standard_normal(self.n)

    def measurement_noise(self, rng):
        return self._meas_factor @ rng.standard_normal(self.n)


def plant_step(plant: LtiPlant, u, rng) -> np.ndarray:
    """Advance the plant one step and return ``x(k+1)``.

    Raises :class:`TrackLimitExceeded` (after storing the new state) when
    constraints are attached and the cart leaves the track.
    """
    u = np.asarray(u, dtype=float).reshape(plant.m)
    if not np.all(np.isfinite(u)):
        raise ValueError("input must be finite")
    u = plant.saturate(u)
    plant.x = plant.A @ plant.x + plant.B @ u + plant.process_noise(rng)
    if plant.constraints is not None and abs(plant.x[0]) > plant.constraints.track_limit:
        raise TrackLimitExceeded(float(plant.x[0]), plant.constraints.track_limit)
    return plant.x


def measure(plant: LtiPlant, rng) -> np.ndarray:
    return plant.x + plant.measurement_noise(rng)


def cartpole_plant(T_U, params=None, Sigma_proc=None, Sigma_meas=None, x0=None,
                   constraints=None) -> LtiPlant:
    """Convenience constructor: linearize, discretize and wrap the cart-pole."""
    params = params or CartPoleParams()
    A, B = discretize(linearize_cartpole(params), T_U)
    return LtiPlant(A, B, Sigma_proc, Sigma_meas, x0, T_U, constraints)
