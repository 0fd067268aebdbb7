"""Controller synthesis and the runtime controller/actuator state machines.

Gains follow the ``u = F x`` convention: ``F`` already contains the minus
sign, so a stabilizing gain makes ``A + B F`` Schur stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SynthesisError(RuntimeError):
    pass


def controllability_matrix(A, B):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    cols = [B]
    for _ in range(A.shape[0] - 1):
        cols.append(A @ cols[-1])
    return np.hstack(cols)


def _is_conjugate_closed(poles, tol=1e-9):
    poles = np.asarray(poles, dtype=complex)
    remaining = list(poles)
    while remaining:
        p = remaining.pop()
        if abs(p.imag) <= tol:
            continue
        match = [i for i, q in enumerate(remaining) if abs(q - np.conj(p)) <= tol * max(1.0, abs(p))]
        if not match:
            return False
        remaining.pop(match[0])
    return True


def place_poles(A, B, poles) -> np.ndarray:
    """Single-input pole placement by Ackermann's formula.

    Returns ``F`` (1 x n) with ``eig(A + B F)`` equal to ``poles``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = A.shape[0]
    if B.shape != (n, 1):
        raise ValueError(f"Ackermann's formula needs a single input, B has shape {B.shape}")
    poles = np.atleast_1d(np.asarray(poles, dtype=complex))
    if poles.size != n:
        raise ValueError(f"need {n} poles, got {poles.size}")
    if not _is_conjugate_closed(poles):
        raise ValueError("pole list must be closed under complex conjugation")
    C = controllability_matrix(A, B)
    if np.linalg.matrix_rank(C) < n:
        raise SynthesisError("(A, B) is not controllable")
    coeffs = np.real(np.poly(poles))
    # desired characteristic polynomial evaluated at A (Horner)
    phi = np.zeros((n, n))
    for c in coeffs:
        phi = phi @ A + c * np.eye(n)
    e_last = np.zeros((1, n))
    e_last[0, -1] = 1.0
    K = e_last @ np.linalg.solve(C, phi)
    return -K


def scale_poles(poles, reference_T, T_U):
    """Map discrete poles designed at ``reference_T`` to interval ``T_U``.

    Keeps the continuous-time closed-loop behaviour: ``p -> p**(T_U/reference_T)``.
    """
    poles = np.asarray(poles, dtype=complex)
    return np.exp(np.log(poles) * (T_U / reference_T))


def dare_residual(A, B, Q, R, P):
    S = R + B.T @ P @ B
    return P - (Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A))


def solve_dare(A, B, Q, R, tol=1e-12, max_iter=100_000):
    """Fixed-point Riccati recursion from ``P = Q``.

    Stops when the Frobenius change between iterates drops below
    ``tol * max(1, ||P||_F)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtPA = B.T @ P @ A
        P_next = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise SynthesisError("Riccati recursion diverged")
        step = np.linalg.norm(P_next - P)
        P = P_next
        if step < tol * max(1.0, np.linalg.norm(P)):
            return P
    raise SynthesisError(f"Riccati recursion did not converge in {max_iter} iterations")


def lqr_gain(A, B, Q, R, return_cost=False):
    """Infinite-horizon discrete LQR gain ``F`` for ``u = F x``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ValueError("R must be positive definite")
    P = solve_dare(A, B, Q, R)
    F = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if max(abs(np.linalg.eigvals(A + B @ F))) >= 1.0:
        raise SynthesisError("LQR fixed point is not stabilizing (check stabilizability/detectability)")
    return (F, P) if return_cost else F


@dataclass
class SyncLqrSpec:
    """Per-agent models and weights for the synchronizing LQR design."""

    A: list
    B: list
    Q: list
    R: list
    Q_sync: np.ndarray

    def __post_init__(self):
        N = len(self.A)
        if N < 2 or not (len(self.B) == len(self.Q) == len(self.R) == N):
            raise ValueError("need at least two agents with matching A, B, Q, R lists")
        self.A = [np.atleast_2d(np.asarray(a, dtype=float)) for a in self.A]
        self.B = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.B]
        self.Q = [np.atleast_2d(np.asarray(q, dtype=float)) for q in self.Q]
        self.R = [np.atleast_2d(np.asarray(r, dtype=float)) for r in self.R]
        self.Q_sync = np.atleast_2d(np.asarray(self.Q_sync, dtype=float))
        n, m = self.A[0].shape[0], self.B[0].shape[1]
        for i in range(N):
            if self.A[i].shape != (n, n) or self.B[i].shape != (n, m):
                raise ValueError(f"agent {i} model dimensions differ from agent 0")
            if self.Q[i].shape != (n, n) or self.R[i].shape != (m, m):
                raise ValueError(f"agent {i} weight dimensions are wrong")
            if np.linalg.eigvalsh(0.5 * (self.Q[i] + self.Q[i].T)).min() < -1e-12:
                raise ValueError(f"Q[{i}] must be positive semidefinite")
            if np.linalg.eigvalsh(0.5 * (self.R[i] + self.R[i].T)).min() <= 0:
                raise ValueError(f"R[{i}] must be positive definite")
        if self.Q_sync.shape != (n, n) or np.linalg.eigvalsh(self.Q_sync).min() < -1e-12:
            raise ValueError("Q_sync must be an n x n positive semidefinite matrix")

    @property
    def N(self):
        return len(self.A)


def sync_weights(spec: SyncLqrSpec):
    """Augmented (A, B, Q, R) for the pairwise synchronization cost."""
    N = spec.N
    n, m = spec.A[0].shape[0], spec.B[0].shape[1]
    A = np.zeros((N * n, N * n))
    B = np.zeros((N * n, N * m))
    Q = np.zeros((N * n, N * n))
    R = np.zeros((N * m, N * m))
    for i in range(N):
        si, ui = slice(i * n, (i + 1) * n), slice(i * m, (i + 1) * m)
        A[si, si] = spec.A[i]
        B[si, ui] = spec.B[i]
        R[ui, ui] = spec.R[i]
        Q[si, si] = spec.Q[i] + (N - 1) * spec.Q_sync
        for j in range(N):
            if j != i:
                Q[si, slice(j * n, (j + 1) * n)] = -spec.Q_sync
    return A, B, Q, R


def sync_lqr(spec: SyncLqrSpec) -> np.ndarray:
    """Synchronizing LQR gains, shape ``(N, N, m, n)``.

    ``u_i = sum_j F[i, j] @ x_j``.
    """
    A, B, Q, R = sync_weights(spec)
    F = lqr_gain(A, B, Q, R)
    N = spec.N
    n, m = spec.A[0].shape[0], spec.B[0].shape[1]
    return F.reshape(N, m, N, n).transpose(0, 2, 1, 3).copy()


@dataclass
class PredictiveController:
    """Controller-side predictor.

    Holds ``x_hat`` (prediction of the current plant state), ``u_hat`` (the
    most recently computed input, i.e. the one to send next) and
    ``u_hat_prev`` (the one computed before it, which the actuator is
    assumed to be applying now). Until the first measurement arrives the
    controller is uninitialized and sends nothing.
    """

    F: np.ndarray
    A: np.ndarray
    B: np.ndarray
    x_hat: np.ndarray = None
    u_hat: np.ndarray = None
    u_hat_prev: np.ndarray = None
    initialized: bool = False

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.F = np.atleast_2d(np.asarray(self.F, dtype=float))
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.F.shape != (m, n):
            raise ValueError("controller model dimensions are inconsistent")
        self.x_hat = np.zeros(n) if self.x_hat is None else np.asarray(self.x_hat, dtype=float).reshape(n)
        self.u_hat = np.zeros(m) if self.u_hat is None else np.asarray(self.u_hat, dtype=float).reshape(m)
        self.u_hat_prev = (np.zeros(m) if self.u_hat_prev is None
                           else np.asarray(self.u_hat_prev, dtype=float).reshape(m))

    def retarget(self, F, A, B):
        self.F = np.atleast_2d(np.asarray(F, dtype=float))
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))

    def reset(self):
        """Forget the state estimate; wait for a fresh measurement."""
        self.initialized = False
        self.x_hat = np.zeros_like(self.x_hat)


def predictor_update(ctrl: PredictiveController, arrived, y_delayed=None) -> np.ndarray:
    """One-step prediction from the delayed measurement (or the old prediction)."""
    if bool(arrived) != (y_delayed is not None):
        raise ValueError("y_delayed must be given exactly when the measurement arrived")
    if arrived:
        y = np.asarray(y_delayed, dtype=float).reshape(ctrl.x_hat.shape)
        ctrl.x_hat = ctrl.A @ y + ctrl.B @ ctrl.u_hat_prev
        ctrl.initialized = True
    elif ctrl.initialized:
        ctrl.x_hat = ctrl.A @ ctrl.x_hat + ctrl.B @ ctrl.u_hat_prev
    return ctrl.x_hat


def compute_input(ctrl: PredictiveController) -> np.ndarray:
    """Propagate one more step and apply the feedback gain."""
    u_next = ctrl.F @ (ctrl.A @ ctrl.x_hat + ctrl.B @ ctrl.u_hat)
    ctrl.u_hat_prev = ctrl.u_hat
    ctrl.u_hat = u_next
    return u_next


@dataclass
class ZohActuator:
    u_prev: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        self.u_prev = np.atleast_1d(np.asarray(self.u_prev, dtype=float)).copy()


def actuator_apply(act: ZohActuator, arrived, u_hat=None) -> np.ndarray:
    if bool(arrived) != (u_hat is not None):
        raise ValueError("u_hat must be given exactly when the input message arrived")
    if arrived:
        act.u_prev = np.atleast_1d(np.asarray(u_hat, dtype=float)).reshape(act.u_prev.shape).copy()
    return act.u_prev


def gain_to_json(F):
    return {"schema_version": 1, "F": np.atleast_2d(F).tolist()}


def gain_from_json(doc):
    if doc.get("schema_version") != 1:
        raise ValueError(f"unsupported gain schema_version {doc.get('schema_version')!r}")
    return np.atleast_2d(np.asarray(doc["F"], dtype=float))
