import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import cartpole_loop
from wcps.stability import (
    AugmentedClosedLoop,
    CertificateUnavailable,
    DwellTimeCertificate,
    NoSteadyStateError,
    SecondMomentOperator,
    SwitchedSystem,
    SwitchingSignal,
    build_augmented,
    check_mss,
    dwell_time_from_constants,
    dwell_time_violation,
    gamma_map,
    lyapunov_certificate,
    min_avg_dwell_time,
    periodic_signal,
    second_moment_operator,
    second_moment_trajectory,
    spectral_radius,
    steady_state_correlation,
    unvec,
    vec,
    verify_switching_signal,
)


def scalar_acl(a0, a1=0.0, s2=0.0):
    """Hand-built 1x1 closed loop (for operator examples)."""
    z = np.zeros((1, 1))
    return AugmentedClosedLoop(np.array([[a0]]), np.array([[a1]]), z, s2, 0.0, np.zeros((1, 2)), np.zeros((1, 2)),
                               np.zeros((2, 2)), 1.0, 1.0, 1, 0)


def random_loop(rng, n=None):
    n = n or int(rng.integers(1, 3))
    A = rng.normal(0, 0.8, (n, n))
    B = rng.normal(0, 1, (n, 1))
    F = rng.normal(0, 0.6, (1, n))
    return A, B, F


class TestBuild:
    def test_dimensions_and_variances(self):
        A, B, F = cartpole_loop(0.04)
        acl = build_augmented(A, B, F, 0.5, 0.8)
        assert acl.d == 10 and acl.A0.shape == acl.A1.shape == acl.A2.shape == (10, 10)
        assert acl.sigma2_1 == 1.0 and acl.sigma2_2 == pytest.approx(0.25)
        assert acl.E0.shape == (10, 8)

    def test_perfect_links(self):
        acl = build_augmented([[1.1]], [[1.0]], [[-0.6]], 1.0, 1.0)
        assert acl.sigma2_1 == 0.0 and acl.sigma2_2 == 0.0
        np.testing.assert_array_equal(acl.A0, [[1.1, 0, 1, 0], [1.1, 0, 0, 1], [0, -0.66, 0, -0.6], [0, -0.66, 0, -0.6]])

    def test_rejects_zero_mu(self):
        with pytest.raises(ValueError):
            build_augmented([[1.0]], [[1.0]], [[-0.5]], 0.0, 1.0)
        with pytest.raises(ValueError):
            build_augmented([[1.0]], [[1.0]], [[-0.5]], 1.0, 1.2)
        with pytest.raises(ValueError):
            build_augmented(np.eye(2), [[1.0]], [[-0.5]], 1.0, 1.0)

    def test_realizations_match_raw_loop(self, rng):
        # every (theta, phi) realization must equal the loop equations on (x, x_hat, u, u_hat)
        A, B, F = random_loop(rng, 2)
        acl = build_augmented(A, B, F, 0.7, 0.6)
        for th in (0, 1):
            for ph in (0, 1):
                z = rng.standard_normal(acl.d)
                x, xh, u, uh = z[:2], z[2:4], z[4:5], z[5:6]
                x_n = A @ x + B @ u
                xh_n = A @ (th * x + (1 - th) * xh) + B @ uh
                uh_n = F @ (A @ xh + B @ uh)
                u_n = ph * uh_n + (1 - ph) * u
                np.testing.assert_allclose(acl.realization(th, ph) @ z, np.concatenate([x_n, xh_n, u_n, uh_n]),
                                           atol=1e-12)


class TestOperator:
    def test_square(self):
        assert second_moment_operator(scalar_acl(0.5)).G[0, 0] == pytest.approx(0.25)

    def test_fluctuation_term(self):
        assert second_moment_operator(scalar_acl(0.5, 0.5, 1.0)).G[0, 0] == pytest.approx(0.5)

    def test_vec_roundtrip(self, rng):
        M = rng.standard_normal((3, 3))
        np.testing.assert_array_equal(unvec(vec(M), 3), M)
        assert vec(np.array([[1, 2], [3, 4]])).tolist() == [1, 3, 2, 4]

    @given(st.integers(0, 2**31))
    def test_matches_explicit_map(self, seed):
        rng = np.random.default_rng(seed)
        d = 3
        acl = AugmentedClosedLoop(*(rng.standard_normal((d, d)) for _ in range(3)), 0.7, 1.3,
                                  np.zeros((d, 2)), np.zeros((d, 2)), np.zeros((2, 2)), 0.5, 0.5, 1, 1)
        smo = second_moment_operator(acl)
        for _ in range(10):
            M = rng.standard_normal((d, d))
            M = M + M.T
            np.testing.assert_allclose(smo.apply(M), gamma_map(acl, M), atol=1e-10)
        np.testing.assert_allclose(smo.apply(np.eye(d)), gamma_map(acl, np.eye(d)), atol=1e-10)

    def test_brute_force_expectation(self, rng):
        # exact expectation over the four Bernoulli outcomes, including the noise term
        A, B, F = random_loop(rng, 2)
        mt, mp = 0.7, 0.4
        Sp, Sm = np.diag([0.3, 0.1]), np.diag([0.05, 0.2])
        acl = build_augmented(A, B, F, mt, mp, Sp, Sm)
        smo = second_moment_operator(acl)
        M = rng.standard_normal((acl.d, acl.d))
        M = M @ M.T
        expected = np.zeros_like(M)
        for th, pth in ((1, mt), (0, 1 - mt)):
            for ph, pph in ((1, mp), (0, 1 - mp)):
                At = acl.realization(th, ph)
                # measurement noise reaches x_hat through A only when delivered
                E = np.zeros((acl.d, 4))
                E[:2, :2] = np.eye(2)
                E[2:4, 2:] = th * A
                W = np.block([[Sp, np.zeros((2, 2))], [np.zeros((2, 2)), Sm]])
                expected += pth * pph * (At @ M @ At.T + E @ W @ E.T)
        np.testing.assert_allclose(smo.step(M), expected, atol=1e-10)


class TestCheckMss:
    def test_perfect_links(self):
        A, B, F = cartpole_loop(0.045)
        cert = check_mss(build_augmented(A, B, F, 1.0, 1.0))
        assert cert.stable
        lam = max(abs(np.linalg.eigvals(A + B @ F)))
        # the repeated design pole makes the Kronecker square defective: eigenvalues are sensitive
        assert cert.spectral_radius == pytest.approx(lam**2, rel=1e-4)
        assert cert.lmi_max_eig < 0 and np.linalg.eigvalsh(cert.P).min() > 0

    def test_actuator_starved(self):
        assert not check_mss(build_augmented([[1.1]], [[1.0]], [[-0.6]], 1.0, 0.01)).stable

    def test_borderline_flag(self):
        acl = scalar_acl(1.0)
        cert = check_mss(acl)
        assert not cert.stable and cert.borderline
        assert not check_mss(scalar_acl(1.5)).borderline

    def test_tol_validation(self):
        with pytest.raises(ValueError):
            check_mss(scalar_acl(0.5), tol=0.5)

    def test_json(self):
        doc = check_mss(scalar_acl(0.5)).to_json(include_matrices=True)
        assert doc["schema_version"] == 1 and doc["verdict"] == "stable" and "P" in doc

    @given(st.integers(0, 2**31))
    def test_certificate_iff_spectral(self, seed):
        rng = np.random.default_rng(seed)
        A, B, F = random_loop(rng)
        acl = build_augmented(A, B, F, rng.uniform(0.2, 1), rng.uniform(0.2, 1))
        rho = spectral_radius(second_moment_operator(acl).G)
        if abs(rho - 1) <= 1e-3:
            return
        P, lmi = lyapunov_certificate(acl)
        valid = P is not None and np.linalg.eigvalsh(P).min() > 0 and lmi < 0
        assert valid == (rho < 1)

    @pytest.mark.parametrize("T_U", [0.02, 0.03, 0.04, 0.05])
    def test_monotone_in_delivery_cartpole(self, T_U):
        A, B, F = cartpole_loop(T_U)
        grid = np.linspace(0.2, 1.0, 9)
        R = np.array([[spectral_radius(second_moment_operator(build_augmented(A, B, F, a, b)).G) for b in grid]
                      for a in grid])
        # more delivery never hurts; slack covers the eigenvalue sensitivity of the repeated pole
        assert np.all(np.diff(R, axis=0) <= 1e-4 * R[1:])
        assert np.all(np.diff(R, axis=1) <= 1e-4 * R[:, 1:])

    def test_monotonicity_is_not_universal(self):
        """Losing sensor messages can stabilize a loop whose gain is too aggressive."""
        from wcps.sim import second_moment_growth_rate

        a, F = -0.8687156847449917, np.array([[1.6077809151069829]])
        hi = build_augmented([[a]], [[1.0]], F, 0.93, 0.308)
        lo = build_augmented([[a]], [[1.0]], F, 0.386, 0.308)
        assert not check_mss(hi).stable and check_mss(lo).stable
        rng = np.random.default_rng(1)
        assert second_moment_growth_rate([[a]], [[1.0]], F, 0.93, 0.308, steps=5000, rng=rng) > 0.1
        assert second_moment_growth_rate([[a]], [[1.0]], F, 0.386, 0.308, steps=5000, rng=rng) < -0.05


cvxpy = pytest.importorskip("cvxpy")


class TestLmiOracle:
    """Feasibility of the mean-square LMI by semidefinite programming."""

    @staticmethod
    def sdp_feasible(acl):
        d = acl.d
        P = cvxpy.Variable((d, d), symmetric=True)
        expr = acl.A0.T @ P @ acl.A0 - P
        for s2, Ai, _ in acl.fluctuations:
            expr = expr + s2 * (Ai.T @ P @ Ai)
        # always-feasible margin form: the LMI holds iff the optimal margin s is negative
        s = cvxpy.Variable()
        cons = [P >> np.eye(d), 0.5 * (expr + expr.T) << s * np.eye(d), cvxpy.trace(P) <= 1e6]
        prob = cvxpy.Problem(cvxpy.Minimize(s), cons)
        prob.solve(solver="CLARABEL")
        assert prob.status == "optimal", prob.status
        return s.value < 0

    def test_agrees_with_spectral_radius(self):
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 12:
            A = rng.normal(0, 0.8, (1, 1))
            F = rng.normal(0, 0.6, (1, 1))
            acl = build_augmented(A, [[1.0]], F, rng.uniform(0.3, 1), rng.uniform(0.3, 1))
            rho = spectral_radius(second_moment_operator(acl).G)
            if abs(rho - 1) < 0.05:
                continue
            assert self.sdp_feasible(acl) == (rho < 1), rho
            checked += 1


class TestSteadyState:
    def test_zero_noise(self):
        smo = second_moment_operator(scalar_acl(0.5))
        assert not steady_state_correlation(smo).any()

    def test_geometric_series(self):
        W = steady_state_correlation(SecondMomentOperator(np.array([[0.25]]), np.array([[1.0]])))
        assert W[0, 0] == pytest.approx(4 / 3, abs=1e-10)

    def test_unstable(self):
        with pytest.raises(NoSteadyStateError):
            steady_state_correlation(SecondMomentOperator(np.array([[1.5]]), np.array([[1.0]])))

    def test_fixed_point_and_psd(self):
        A, B, F = cartpole_loop(0.045)
        acl = build_augmented(A, B, F, 0.9, 0.9, np.eye(4) * 1e-4, np.eye(4) * 1e-6)
        smo = second_moment_operator(acl)
        Wb = steady_state_correlation(smo)
        np.testing.assert_allclose(Wb, smo.step(Wb), atol=1e-12 * max(1, np.abs(Wb).max()))
        assert np.linalg.eigvalsh(Wb).min() > -1e-10 * np.abs(Wb).max()

    def test_recursion_converges(self):
        A, B, F = cartpole_loop(0.045)
        acl = build_augmented(A, B, F, 0.95, 0.95, np.eye(4) * 1e-4, np.eye(4) * 1e-6)
        smo = second_moment_operator(acl)
        traj = second_moment_trajectory(smo, np.eye(acl.d) * 1e-2, 800)
        Wb = steady_state_correlation(smo)
        assert np.linalg.norm(traj[-1] - Wb) / np.linalg.norm(Wb) < 1e-6

    def test_unrolled_identity(self, rng):
        A, B, F = random_loop(rng, 2)
        acl = build_augmented(A, B, F, 0.8, 0.7, np.eye(2) * 0.1, np.eye(2) * 0.02)
        smo = second_moment_operator(acl)
        M0 = rng.standard_normal((acl.d, acl.d))
        M0 = M0 @ M0.T
        traj = second_moment_trajectory(smo, M0, 20)
        for k in range(21):
            closed = smo.apply(M0) if k else M0
            Gk = np.linalg.matrix_power(smo.G, k)
            closed = unvec(Gk @ vec(M0), acl.d)
            closed = closed + sum(unvec(np.linalg.matrix_power(smo.G, i) @ vec(smo.W_hat), acl.d) for i in range(k))
            np.testing.assert_allclose(traj[k], closed, atol=1e-8 * max(1.0, np.abs(closed).max()))


class TestDwellTime:
    def test_formula(self):
        assert dwell_time_from_constants(0.05, 2.0) == 14
        assert math.ceil(-math.log(2) / math.log(0.95)) == 14
        assert dwell_time_from_constants(0.05, 1.0) == 1
        with pytest.raises(ValueError):
            dwell_time_from_constants(0.0, 2.0)
        with pytest.raises(ValueError):
            dwell_time_from_constants(0.5, 0.5)

    def test_certificate_consistency(self):
        DwellTimeCertificate(0.05, 2.0, 14)
        with pytest.raises(ValueError):
            DwellTimeCertificate(0.05, 2.0, 13)

    def test_identical_modes(self):
        A, B, F = cartpole_loop(0.04)
        acl = build_augmented([[1.1]], [[1.0]], [[-0.6]], 0.9, 0.9)
        for method in ("vectorized", "trace"):
            cert = min_avg_dwell_time(SwitchedSystem((acl, acl)), method=method)
            P = cert.per_mode_P[0]
            ev = np.linalg.eigvalsh(P)
            assert cert.mu == pytest.approx(ev[-1] / ev[0])
            assert 1 <= cert.tau_a_star < 10**9

    def test_vectorized_construction(self):
        acl1 = build_augmented([[1.1]], [[1.0]], [[-0.6]], 0.9, 0.9)
        acl2 = build_augmented([[1.1]], [[1.0]], [[-0.4]], 0.9, 0.9)
        cert = min_avg_dwell_time(SwitchedSystem((acl1, acl2)))
        for acl, P in zip((acl1, acl2), cert.per_mode_P):
            G = second_moment_operator(acl).G
            np.testing.assert_allclose(G.T @ P @ G - P, -np.eye(G.shape[0]), atol=1e-8 * np.abs(P).max())
            # decay along v+ = G v at rate alpha
            v = np.random.default_rng(0).standard_normal(G.shape[0])
            assert (G @ v) @ P @ (G @ v) <= (1 - cert.alpha) * (v @ P @ v) + 1e-9

    def test_unstable_mode(self):
        good = build_augmented([[1.1]], [[1.0]], [[-0.6]], 0.9, 0.9)
        bad = build_augmented([[1.1]], [[1.0]], [[-0.6]], 0.9, 0.05)
        with pytest.raises(CertificateUnavailable) as info:
            min_avg_dwell_time(SwitchedSystem((good, bad)))
        assert info.value.mode_index == 1

    def test_method_validation(self):
        acl = build_augmented([[0.5]], [[1.0]], [[-0.1]], 1.0, 1.0)
        with pytest.raises(ValueError):
            min_avg_dwell_time(SwitchedSystem((acl, acl)), method="sdp")
        with pytest.raises(ValueError):
            SwitchedSystem((acl,))

    def test_json(self):
        acl1 = build_augmented([[1.1]], [[1.0]], [[-0.6]], 0.9, 0.9)
        acl2 = build_augmented([[1.1]], [[1.0]], [[-0.4]], 0.9, 0.9)
        doc = min_avg_dwell_time(SwitchedSystem((acl1, acl2))).to_json()
        assert doc["schema_version"] == 1 and len(doc["spectral_radii"]) == 2


class TestSwitchingSignal:
    def cert(self, tau):
        # any (alpha, mu) pair with the requested tau
        alpha = 0.05
        mu = (1 - alpha) ** -(tau - 0.5)
        c = DwellTimeCertificate(alpha, mu, dwell_time_from_constants(alpha, mu))
        assert c.tau_a_star == tau
        return c

    def test_no_switches(self):
        assert verify_switching_signal(SwitchingSignal(((0, 0),), 0.0, 100), self.cert(14))

    def test_slow_switching_accepted(self):
        sig = periodic_signal(2000, 10_000)
        assert verify_switching_signal(sig, self.cert(289))

    def test_every_step_rejected(self):
        sig = SwitchingSignal(tuple((k, k % 2) for k in range(101)), 1.0, 100)
        assert not verify_switching_signal(sig, self.cert(14))
        ks, ke, count = dwell_time_violation(sig, 14)
        assert count > 1 + (ke - ks) / 14

    def test_validation(self):
        with pytest.raises(ValueError):
            SwitchingSignal(((5, 0), (5, 1)))
        with pytest.raises(ValueError):
            SwitchingSignal(((-1, 0),))
        with pytest.raises(ValueError):
            SwitchingSignal(((0, 0), (200, 1)), horizon=100)

    @given(st.lists(st.integers(1, 400), min_size=1, max_size=25, unique=True),
           st.floats(1.0, 60.0), st.sampled_from([0.0, 1.0, 2.5]))
    def test_matches_brute_force(self, steps, tau, N0):
        steps = sorted(steps)
        sig = SwitchingSignal(tuple((k, i % 2) for i, k in enumerate(steps)), N0)
        brute = True
        for i in range(len(steps)):
            for j in range(i, len(steps)):
                if j - i + 1 > N0 + (steps[j] - steps[i]) / tau + 1e-12:
                    brute = False
        assert (dwell_time_violation(sig, tau) is None) == brute


def _switched_second_moment(modes, events, steps, M0):
    Gs = [second_moment_operator(m).G for m in modes]
    v = vec(M0)
    switch = dict(events)
    cur = switch.get(0, 0)
    peak = 0.0
    for k in range(steps):
        cur = switch.get(k, cur)
        v = Gs[cur] @ v
        peak = max(peak, np.abs(v).max())
    return peak


@pytest.mark.slow
@pytest.mark.parametrize("method", ["vectorized", "trace"])
def test_dwell_time_soundness(method):
    """Fastest switching the certificate allows keeps the second moment bounded."""
    # two modes that are unstable under fast alternation
    m1 = build_augmented([[1.2]], [[1.0]], [[-0.75]], 0.85, 0.95)
    m2 = build_augmented([[1.2]], [[1.0]], [[-0.35]], 0.95, 0.85)
    cert = min_avg_dwell_time(SwitchedSystem((m1, m2)), method=method)
    tau = cert.tau_a_star
    assert tau < 5_000
    horizon = 100_000
    rng = np.random.default_rng(1)
    M0 = np.eye(m1.d)
    for N0 in (1.0, 3.0):
        # burst of N0 back-to-back switches, then the slowest-allowed cadence, plus a random accepted signal
        events = [(0, 0)] + [(k + 1, (k + 1) % 2) for k in range(int(N0) - 1)]
        k = events[-1][0]
        while k + tau <= horizon:
            k += tau
            events.append((k, len(events) % 2))
        sig = SwitchingSignal(tuple(events), N0, horizon)
        assert verify_switching_signal(sig, cert)
        assert _switched_second_moment((m1, m2), events, horizon, M0) <= 1e6 * np.linalg.norm(M0)
        gaps = np.cumsum(rng.integers(tau, 3 * tau, size=horizon // tau))
        sig = SwitchingSignal(((0, 0),) + tuple((int(g), i % 2) for i, g in enumerate(gaps) if g <= horizon), N0)
        assert verify_switching_signal(sig, cert)
        assert _switched_second_moment((m1, m2), sig.events, horizon, M0) <= 1e6 * np.linalg.norm(M0)
