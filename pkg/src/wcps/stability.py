"""Mean-square stability analysis of the networked loop.

The closed loop over the lossy network is a linear system with i.i.d.
multiplicative randomness on the augmented state ``z = (x, x_hat, u, u_hat)``.
Its correlation matrix ``M(k) = E[z z^T]`` obeys a deterministic linear
recursion ``M+ = Gamma(M) + W_hat``; everything here is built on the matrix
representation of ``Gamma`` acting on column-major ``vec(M)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class AnalysisError(RuntimeError):
    pass


class NoSteadyStateError(AnalysisError):
    pass


class CertificateUnavailable(AnalysisError):
    """Raised when a dwell-time certificate is requested for an unstable mode."""

    def __init__(self, message, mode_index=None):
        super().__init__(message)
        self.mode_index = mode_index


def vec(M):
    return np.asarray(M).reshape(-1, order="F")


def unvec(v, d):
    return np.asarray(v).reshape((d, d), order="F")


def spectral_radius(M):
    return float(max(abs(np.linalg.eigvals(M)))) if np.size(M) else 0.0


@dataclass(frozen=True)
class AugmentedClosedLoop:
    """Mean-plus-fluctuation split of the random closed-loop matrices.

    ``A_tilde(k) = A0 + p1(k) A1 + p2(k) A2`` with zero-mean ``p_i`` of
    variance ``sigma2_i``; the noise enters as ``(E0 + p1(k) E1) eps(k)``
    with ``eps = (v, w)`` of covariance ``W``.
    """

    A0: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    sigma2_1: float
    sigma2_2: float
    E0: np.ndarray
    E1: np.ndarray
    W: np.ndarray
    mu_theta: float
    mu_phi: float
    n: int
    m: int

    @property
    def d(self):
        return self.A0.shape[0]

    @property
    def fluctuations(self):
        return ((self.sigma2_1, self.A1, self.E1), (self.sigma2_2, self.A2, None))

    def realization(self, theta, phi):
        """``A_tilde`` for concrete delivery flags (``theta, phi`` in {0, 1})."""
        p1 = 1.0 - theta / self.mu_theta
        p2 = 1.0 - phi / self.mu_phi
        return self.A0 + p1 * self.A1 + p2 * self.A2


def build_augmented(A, B, F, mu_theta, mu_phi, Sigma_proc=None, Sigma_meas=None) -> AugmentedClosedLoop:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n, m = B.shape
    if A.shape != (n, n) or F.shape != (m, n):
        raise ValueError(f"inconsistent shapes A {A.shape}, B {B.shape}, F {F.shape}")
    for name, mu in (("mu_theta", mu_theta), ("mu_phi", mu_phi)):
        if not 0.0 < mu <= 1.0:
            raise ValueError(f"{name} must lie in (0, 1], got {mu}")
    Sigma_proc = np.zeros((n, n)) if Sigma_proc is None else np.atleast_2d(np.asarray(Sigma_proc, dtype=float))
    Sigma_meas = np.zeros((n, n)) if Sigma_meas is None else np.atleast_2d(np.asarray(Sigma_meas, dtype=float))

    Zn, Znm, Zmn, Zm, Im = np.zeros((n, n)), np.zeros((n, m)), np.zeros((m, n)), np.zeros((m, m)), np.eye(m)
    FA, FB = F @ A, F @ B
    mt, mp = mu_theta, mu_phi
    A0 = np.block([
        [A, Zn, B, Znm],
        [mt * A, (1 - mt) * A, Znm, B],
        [Zmn, mp * FA, (1 - mp) * Im, mp * FB],
        [Zmn, FA, Zm, FB],
    ])
    A1 = np.block([
        [Zn, Zn, Znm, Znm],
        [-mt * A, mt * A, Znm, Znm],
        [Zmn, Zmn, Zm, Zm],
        [Zmn, Zmn, Zm, Zm],
    ])
    A2 = np.block([
        [Zn, Zn, Znm, Znm],
        [Zn, Zn, Znm, Znm],
        [Zmn, -mp * FA, mp * Im, -mp * FB],
        [Zmn, Zmn, Zm, Zm],
    ])
    # noise eps = (v, w): v drives x, the delivered measurement noise enters x_hat through A
    E0 = np.block([
        [np.eye(n), Zn],
        [Zn, mt * A],
        [Zmn, Zmn],
        [Zmn, Zmn],
    ])
    E1 = np.block([
        [Zn, Zn],
        [Zn, -mt * A],
        [Zmn, Zmn],
        [Zmn, Zmn],
    ])
    W = scipy.linalg.block_diag(Sigma_proc, Sigma_meas)
    return AugmentedClosedLoop(A0, A1, A2, 1.0 / mu_theta - 1.0, 1.0 / mu_phi - 1.0,
                               E0, E1, W, mu_theta, mu_phi, n, m)


@dataclass(frozen=True)
class SecondMomentOperator:
    G: np.ndarray
    W_hat: np.ndarray

    @property
    def d(self):
        return self.W_hat.shape[0]

    def apply(self, M):
        return unvec(self.G @ vec(M), self.d)

    def step(self, M):
        return self.apply(M) + self.W_hat


def gamma_map(acl: AugmentedClosedLoop, M):
    """Explicitly summed second-moment map (no noise term)."""
    out = acl.A0 @ M @ acl.A0.T
    for s2, Ai, _ in acl.fluctuations:
        out = out + s2 * (Ai @ M @ Ai.T)
    return out


def second_moment_operator(acl: AugmentedClosedLoop) -> SecondMomentOperator:
    G = np.kron(acl.A0, acl.A0)
    W_hat = acl.E0 @ acl.W @ acl.E0.T
    for s2, Ai, Ei in acl.fluctuations:
        if s2 == 0.0:
            continue
        G = G + s2 * np.kron(Ai, Ai)
        if Ei is not None:
            W_hat = W_hat + s2 * (Ei @ acl.W @ Ei.T)
    return SecondMomentOperator(G, 0.5 * (W_hat + W_hat.T))


@dataclass(frozen=True)
class MssCertificate:
    verdict: str
    spectral_radius: float
    borderline: bool = False
    P: np.ndarray | None = None
    lmi_max_eig: float | None = None

    @property
    def stable(self):
        return self.verdict == "stable"

    def to_json(self, include_matrices=False):
        doc = {
            "schema_version": 1,
            "verdict": self.verdict,
            "spectral_radius": self.spectral_radius,
            "borderline": self.borderline,
            "lmi_max_eig": self.lmi_max_eig,
        }
        if include_matrices and self.P is not None:
            doc["P"] = self.P.tolist()
        return doc


def lyapunov_certificate(acl: AugmentedClosedLoop, G=None):
    """Solve ``Gamma*(P) - P = -I`` and return ``(P, lambda_max(LMI residual))``.

    ``Gamma*`` is the adjoint map ``P -> A0^T P A0 + sum sigma_i^2 Ai^T P Ai``,
    represented by ``G^T`` on ``vec(P)``. A positive definite ``P`` with a
    negative definite residual is a feasible point of the mean-square LMI.
    """
    if G is None:
        G = second_moment_operator(acl).G
    d = acl.d
    try:
        p = np.linalg.solve(np.eye(d * d) - G.T, vec(np.eye(d)))
    except np.linalg.LinAlgError:
        return None, None
    P = unvec(p, d)
    P = 0.5 * (P + P.T)
    resid = acl.A0.T @ P @ acl.A0 - P
    for s2, Ai, _ in acl.fluctuations:
        resid = resid + s2 * (Ai.T @ P @ Ai)
    return P, float(np.linalg.eigvalsh(0.5 * (resid + resid.T)).max())


def certificate_is_valid(P, lmi_max_eig):
    return P is not None and np.linalg.eigvalsh(P).min() > 0 and lmi_max_eig < 0


def check_mss(acl: AugmentedClosedLoop, tol: float = 1e-6) -> MssCertificate:
    """Mean-square stability verdict from the spectral radius of ``Gamma``.

    Radii in ``[1 - tol, 1 + tol)`` are reported unstable and flagged
    borderline. Stable verdicts carry the Lyapunov matrix ``P``.
    """
    if not 0.0 < tol < 0.1:
        raise ValueError("tol must lie in (0, 0.1)")
    smo = second_moment_operator(acl)
    try:
        rho = spectral_radius(smo.G)
    except np.linalg.LinAlgError as exc:
        raise AnalysisError(f"eigenvalue computation failed: {exc}") from exc
    borderline = 1.0 - tol <= rho < 1.0 + tol
    if rho >= 1.0 - tol:
        return MssCertificate("unstable", rho, borderline)
    P, lmi = lyapunov_certificate(acl, smo.G)
    if not certificate_is_valid(P, lmi):
        raise AnalysisError(f"spectral radius {rho:.6g} < 1 but the Lyapunov certificate failed")
    return MssCertificate("stable", rho, False, P, lmi)


def steady_state_correlation(smo: SecondMomentOperator) -> np.ndarray:
    """Limit of ``M(k)``: the fixed point of ``M = Gamma(M) + W_hat``."""
    rho = spectral_radius(smo.G)
    if rho >= 1.0:
        raise NoSteadyStateError(f"spectral radius {rho:.6g} >= 1: no steady state")
    d = smo.d
    W_bar = unvec(np.linalg.solve(np.eye(d * d) - smo.G, vec(smo.W_hat)), d)
    return 0.5 * (W_bar + W_bar.T)


def second_moment_trajectory(smo: SecondMomentOperator, M0, steps):
    """``[M(0), ..., M(steps)]`` by direct recursion."""
    out = [np.asarray(M0, dtype=float)]
    for _ in range(steps):
        out.append(smo.step(out[-1]))
    return out


@dataclass(frozen=True)
class SwitchedSystem:
    modes: tuple

    def __post_init__(self):
        modes = tuple(self.modes)
        if len(modes) < 2:
            raise ValueError("a switched system needs at least two modes")
        d = modes[0].d
        if any(mode.d != d for mode in modes):
            raise ValueError("all modes must share the augmented dimension")
        object.__setattr__(self, "modes", modes)

    @property
    def N(self):
        return len(self.modes)


def dwell_time_from_constants(alpha, mu):
    """Minimum average dwell time ``ceil(-ln mu / ln(1 - alpha))``, at least 1."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if mu < 1.0:
        raise ValueError("mu must be >= 1")
    return max(1, math.ceil(-math.log(mu) / math.log(1.0 - alpha)))


@dataclass(frozen=True)
class DwellTimeCertificate:
    alpha: float
    mu: float
    tau_a_star: int
    per_mode_P: tuple = field(default=(), repr=False)
    spectral_radii: tuple = ()

    def __post_init__(self):
        if self.tau_a_star != dwell_time_from_constants(self.alpha, self.mu):
            raise ValueError("tau_a_star inconsistent with alpha and mu")

    def to_json(self):
        return {
            "schema_version": 1,
            "alpha": self.alpha,
            "mu": self.mu,
            "tau_a_star": self.tau_a_star,
            "spectral_radii": list(self.spectral_radii),
        }


_ALPHA_MAX = 1.0 - 1e-12


def min_avg_dwell_time(sw: SwitchedSystem, tol: float = 1e-6, method: str = "vectorized") -> DwellTimeCertificate:
    """Average-dwell-time certificate from multiple Lyapunov functions.

    ``method="vectorized"``: ``V_i(v) = v^T P_i v`` on ``v = vec(M)`` with
    ``G_i^T P_i G_i - P_i = -I``. ``method="trace"``: ``V_i(M) = tr(P_i M)``
    on the cone of correlation matrices, with ``P_i`` the mean-square
    Lyapunov matrix (adjoint map ``Gamma_i*(P_i) - P_i = -I``); this one is
    usually far less conservative. Either way ``V_i`` decays at least at
    rate ``1 / lambda_max(P_i)`` per step, and a switch from ``j`` to ``i``
    multiplies it by at most ``lambda_max(P_i) / lambda_min(P_j)``.
    """
    if method not in ("vectorized", "trace"):
        raise ValueError("method must be 'vectorized' or 'trace'")
    Ps, radii, alphas = [], [], []
    for i, mode in enumerate(sw.modes):
        cert = check_mss(mode, tol)
        radii.append(cert.spectral_radius)
        if not cert.stable:
            raise CertificateUnavailable(
                f"mode {i} is not mean-square stable (spectral radius {cert.spectral_radius:.6g})", i)
        if method == "vectorized":
            G = second_moment_operator(mode).G
            P = scipy.linalg.solve_discrete_lyapunov(G.T, np.eye(G.shape[0]))
            P = 0.5 * (P + P.T)
        else:
            P = cert.P
        eig = np.linalg.eigvalsh(P)
        if eig[0] <= 0:
            raise AnalysisError(f"Lyapunov matrix of mode {i} is not positive definite")
        Ps.append(P)
        alphas.append(1.0 / eig[-1])
    alpha = min(min(alphas), _ALPHA_MAX)
    lam_max = [np.linalg.eigvalsh(P)[-1] for P in Ps]
    lam_min = [np.linalg.eigvalsh(P)[0] for P in Ps]
    mu = max(lam_max[i] / lam_min[j] for i in range(len(Ps)) for j in range(len(Ps)) if i != j)
    mu = max(mu, 1.0)
    return DwellTimeCertificate(alpha, mu, dwell_time_from_constants(alpha, mu), tuple(Ps), tuple(radii))


@dataclass(frozen=True)
class SwitchingSignal:
    """Switch instants ``(step, mode)``; an event at step 0 only sets the initial mode."""

    events: tuple
    N0: float = 1.0
    horizon: int | None = None

    def __post_init__(self):
        events = tuple((int(k), int(mode)) for k, mode in self.events)
        steps = [k for k, _ in events]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("switching events must have strictly increasing steps")
        if steps and steps[0] < 0:
            raise ValueError("switching steps must be nonnegative")
        if self.horizon is not None and steps and steps[-1] > self.horizon:
            raise ValueError("switching event beyond horizon")
        object.__setattr__(self, "events", events)

    @property
    def switch_steps(self):
        return [k for k, _ in self.events if k > 0]


def dwell_time_violation(sig: SwitchingSignal, tau_a: float):
    """First interval ``(k_s, k_e, count)`` that breaks the average-dwell-time bound, or None.

    Only intervals starting and ending on switch instants need checking; with
    ``g_j = j - e_j / tau_a`` the worst end point for a start ``i`` is the
    suffix maximum of ``g``.
    """
    steps = np.asarray(sig.switch_steps, dtype=float)
    if steps.size == 0:
        return None
    g = np.arange(steps.size) - steps / tau_a
    arg = np.empty(steps.size, dtype=int)
    j_best = steps.size - 1
    for j in range(steps.size - 1, -1, -1):
        if g[j] >= g[j_best]:
            j_best = j
        arg[j] = j_best
    excess = g[arg] - g + 1.0 - sig.N0
    bad = np.nonzero(excess > 1e-12)[0]
    if bad.size == 0:
        return None
    i = int(bad[0])
    j = int(arg[i])
    return int(steps[i]), int(steps[j]), j - i + 1


def verify_switching_signal(sig: SwitchingSignal, cert: DwellTimeCertificate) -> bool:
    return dwell_time_violation(sig, cert.tau_a_star) is None


def periodic_signal(period, horizon, modes=(0, 1), N0=1.0):
    """Alternate through ``modes`` every ``period`` steps."""
    events = [(0, modes[0])]
    k, idx = period, 1
    while k <= horizon:
        events.append((k, modes[idx % len(modes)]))
        k += period
        idx += 1
    return SwitchingSignal(tuple(events), N0, horizon)
