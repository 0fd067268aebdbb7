"""Scenario engine: plants, controllers, actuators and the network in lockstep.

A remote loop runs the pipelined schedule: in every round the latest
measurement travels to the controller and the input computed one round
earlier travels to the actuator, so a sample influences the plant two
update intervals later. Local synchronization agents close their own loop
every local step and exchange states over the network at a slower rate.
"""

from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .control import (
    PredictiveController,
    SyncLqrSpec,
    ZohActuator,
    actuator_apply,
    compute_input,
    lqr_gain,
    place_poles,
    predictor_update,
    scale_poles,
    sync_lqr,
)
from .model import (
    ContinuousLti,
    LtiPlant,
    PlantConstraints,
    TrackLimitExceeded,
    discretize,
    measure,
    plant_step,
    process_noise_covariance,
)
from .net import LossConfig, Mode, NetworkSim, check_delivery_order, host_request_mode_change, run_round
from .stability import AnalysisError, build_augmented, check_mss


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class PlantSpec:
    """A plant given either in continuous time (re-discretized per mode) or as a fixed discrete model.

    Continuous plants take process noise as a white-noise density
    ``process_density`` (or a discrete ``Sigma_proc`` used at every interval).
    """

    name: str
    continuous: ContinuousLti | None = None
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    Sigma_proc: np.ndarray | None = None
    process_density: np.ndarray | None = None
    Sigma_meas: np.ndarray | None = None
    x0: np.ndarray | None = None
    constraints: PlantConstraints | None = None
    noise_key: str | None = None

    def __post_init__(self):
        if (self.continuous is None) == (self.A is None):
            raise ScenarioError(f"plant {self.name!r}: give exactly one of a continuous or a discrete model")
        if self.A is not None and self.B is None:
            raise ScenarioError(f"plant {self.name!r}: discrete model needs B")
        if self.process_density is not None and self.continuous is None:
            raise ScenarioError(f"plant {self.name!r}: a noise density needs a continuous model")

    @property
    def n(self):
        return (self.continuous.state_dim if self.continuous is not None
                else np.atleast_2d(self.A).shape[0])

    def discrete(self, T_U):
        """``(A, B, Sigma_proc)`` at update interval ``T_U``."""
        if self.continuous is None:
            A, B = np.atleast_2d(np.asarray(self.A, float)), np.atleast_2d(np.asarray(self.B, float))
        else:
            A, B = discretize(self.continuous, T_U)
        if self.process_density is not None:
            Sp = process_noise_covariance(self.continuous, self.process_density, T_U)
        else:
            Sp = self.Sigma_proc
        return A, B, Sp

    def build(self, T_U) -> LtiPlant:
        A, B, Sp = self.discrete(T_U)
        return LtiPlant(A, B, Sp, self.Sigma_meas, self.x0, T_U, self.constraints)


@dataclass(frozen=True)
class ControllerDesign:
    """How to obtain a loop gain at a given interval.

    ``poles`` are discrete poles designed for ``reference_T`` and rescaled
    to the interval in use; ``Q``/``R`` request an LQR design; ``F`` fixes
    the gain outright.
    """

    poles: tuple | None = None
    reference_T: float | None = None
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    F: np.ndarray | None = None

    def __post_init__(self):
        given = [self.poles is not None, self.Q is not None, self.F is not None]
        if sum(given) != 1:
            raise ScenarioError("controller design needs exactly one of poles, Q/R or F")
        if self.Q is not None and self.R is None:
            raise ScenarioError("LQR design needs R")

    def gain(self, A, B, T_U):
        if self.F is not None:
            return np.atleast_2d(np.asarray(self.F, dtype=float))
        if self.poles is not None:
            poles = np.asarray(self.poles, dtype=complex)
            if self.reference_T is not None:
                poles = scale_poles(poles, self.reference_T, T_U)
            return place_poles(A, B, poles)
        return lqr_gain(A, B, self.Q, self.R)


@dataclass(frozen=True)
class Hold:
    """Clamp ``agent`` at ``(position, 0, 0, 0)`` for steps ``start <= k < stop``."""

    agent: str
    start: int
    stop: int
    position: float


@dataclass(frozen=True)
class SyncConfig:
    Q: tuple
    R: tuple
    Q_sync: np.ndarray
    local_T: float = 0.01
    ratio: int = 5

    def __post_init__(self):
        if self.ratio < 1 or not self.local_T > 0:
            raise ScenarioError("sync loop needs local_T > 0 and an integer ratio >= 1")


@dataclass
class Scenario:
    plants: tuple
    modes: tuple
    loss: LossConfig = field(default_factory=LossConfig)
    horizon: int = 1000
    seed: int = 0
    controllers: dict = field(default_factory=dict)
    initial_mode: int | None = None
    mode_script: tuple = ()
    hold_script: tuple = ()
    sync: SyncConfig | None = None
    name: str = "scenario"

    def __post_init__(self):
        self.plants = tuple(self.plants)
        self.modes = tuple(self.modes)
        if self.horizon < 1:
            raise ScenarioError("horizon must be positive")
        names = [p.name for p in self.plants]
        if len(set(names)) != len(names):
            raise ScenarioError("plant names must be unique")
        ids = [m.id for m in self.modes]
        if not ids or len(set(ids)) != len(ids):
            raise ScenarioError("need at least one mode, with unique ids")
        if self.initial_mode is None:
            self.initial_mode = ids[0]
        if self.initial_mode not in ids:
            raise ScenarioError(f"initial mode {self.initial_mode} is not defined")
        for m in self.modes:
            for loop in m.loops:
                if loop not in names:
                    raise ScenarioError(f"mode {m.id} references unknown plant {loop!r}")
                if self.sync is None and loop not in self.controllers:
                    raise ScenarioError(f"plant {loop!r} has no controller design")
        for k, nxt, r in self.mode_script:
            if nxt not in ids:
                raise ScenarioError(f"mode script references unknown mode {nxt}")
            if not 0 <= k < self.horizon or r < 1:
                raise ScenarioError(f"bad mode-script entry ({k}, {nxt}, {r})")
        for h in self.hold_script:
            if h.agent not in names:
                raise ScenarioError(f"hold script references unknown agent {h.agent!r}")

    def plant(self, name) -> PlantSpec:
        return next(p for p in self.plants if p.name == name)


def trial_seed(master_seed, trial):
    """Seed of one trial in a batch; depends only on ``(master_seed, trial)``."""
    return int(np.random.SeedSequence([int(master_seed), int(trial)]).generate_state(1)[0])


def _stream(seed, key, purpose):
    return np.random.default_rng([int(seed), zlib.crc32(key.encode()), purpose])


_NET, _PROC, _MEAS = 0, 1, 2


@dataclass
class PlantTrace:
    name: str
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    u_hat: np.ndarray
    x_hat: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    x_final: np.ndarray
    input_cap: float | None = None
    track_limit: float | None = None

    @property
    def positions(self):
        return np.concatenate([self.x[:, 0], self.x_final[:1]])


@dataclass
class Trace:
    k: np.ndarray
    t: np.ndarray
    mode: np.ndarray
    dead: np.ndarray
    burst: np.ndarray
    plants: dict
    rounds: list
    modes: dict
    termination: dict | None = None

    @property
    def steps(self):
        return self.k.size

    def to_csv(self, fh=None):
        """Per-step records, one row per (step, plant)."""
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.plants)
        n = self.plants[names[0]].x.shape[1] if names else 0
        m = self.plants[names[0]].u.shape[1] if names else 0
        header = ["k", "t", "mode", "dead", "burst", "plant", "theta", "phi"]
        header += [f"x{i}" for i in range(n)] + [f"y{i}" for i in range(n)]
        header += [f"xhat{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + [f"uhat{i}" for i in range(m)]
        w.writerow(header)
        for i in range(self.steps):
            for name in names:
                p = self.plants[name]
                row = [int(self.k[i]), f"{self.t[i]:.6f}", int(self.mode[i]), int(self.dead[i]), int(self.burst[i]),
                       name, int(p.theta[i]), int(p.phi[i])]
                row += [f"{v:.10g}" for v in (*p.x[i], *p.y[i], *p.x_hat[i], *p.u[i], *p.u_hat[i])]
                w.writerow(row)
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


class _Recorder:
    def __init__(self, names, n, m):
        self.cols = {name: {key: [] for key in ("x", "y", "u", "u_hat", "x_hat", "theta", "phi")}
                     for name in names}
        self.n, self.m = n, m
        self.k, self.t, self.mode, self.dead, self.burst = [], [], [], [], []

    def step(self, k, t, mode, dead, burst):
        self.k.append(k)
        self.t.append(t)
        self.mode.append(mode)
        self.dead.append(dead)
        self.burst.append(burst)

    def plant(self, name, x, y, u, u_hat, x_hat, theta, phi):
        c = self.cols[name]
        c["x"].append(np.array(x))
        c["y"].append(np.array(y))
        c["u"].append(np.array(u))
        c["u_hat"].append(np.array(u_hat))
        c["x_hat"].append(np.array(x_hat))
        c["theta"].append(bool(theta))
        c["phi"].append(bool(phi))

    def finish(self, plants, rounds, modes, termination, constraints):
        out = {}
        for name, c in self.cols.items():
            def arr(key, width):
                return np.array(c[key], dtype=float).reshape(len(c[key]), width)
            cons = constraints.get(name)
            out[name] = PlantTrace(
                name, arr("x", self.n), arr("y", self.n), arr("u", self.m), arr("u_hat", self.m),
                arr("x_hat", self.n), np.array(c["theta"], bool), np.array(c["phi"], bool),
                np.array(plants[name].x, dtype=float),
                cons.input_cap if cons else None, cons.track_limit if cons else None)
        return Trace(np.array(self.k, int), np.array(self.t, float), np.array(self.mode, int),
                     np.array(self.dead, bool), np.array(self.burst, bool), out, rounds, modes, termination)


def _loop_messages(mode: Mode, plant):
    """``(sensor message, controller node, control message)`` of ``plant`` in ``mode``."""
    sensor = next((s for s in mode.schedule.slots if s.kind == "sensor" and s.source == plant), None)
    if sensor is None:
        raise ScenarioError(f"mode {mode.id} has no sensor slot from {plant!r}")
    ctrl_node = sensor.destinations[0]
    control = next((s for s in mode.schedule.slots
                    if s.kind == "control" and s.source == ctrl_node and plant in s.destinations), None)
    if control is None:
        raise ScenarioError(f"mode {mode.id} has no control slot from {ctrl_node!r} to {plant!r}")
    return sensor.message_id, ctrl_node, control.message_id


def run_scenario(sc: Scenario, record_rounds=True) -> Trace:
    """Simulate remote-control loops over the round-based network.

    Per step: sample ``y(k)``; the round delivers ``y(k)`` to the controller
    (``theta``) and the previously computed input to the actuator (``phi``);
    the plant advances under the input currently held by the actuator; the
    controller predicts and computes the input it will send next round.
    """
    if sc.sync is not None:
        return run_sync_scenario(sc, record_rounds)
    modes = {m.id: m for m in sc.modes}
    net = NetworkSim(sc.modes, sc.initial_mode, sc.loss, record=record_rounds)
    rng_net = _stream(sc.seed, "network", _NET)
    specs = {p.name: p for p in sc.plants}
    rng_proc = {n: _stream(sc.seed, p.noise_key or n, _PROC) for n, p in specs.items()}
    rng_meas = {n: _stream(sc.seed, p.noise_key or n, _MEAS) for n, p in specs.items()}

    mode = modes[sc.initial_mode]
    plants, ctrls, acts = {}, {}, {}
    for name, spec in specs.items():
        plants[name] = spec.build(mode.T_U)
        A, B = plants[name].A, plants[name].B
        design = sc.controllers.get(name)
        F = design.gain(A, B, mode.T_U) if design is not None and name in mode.loops else np.zeros((B.shape[1], A.shape[0]))
        ctrls[name] = PredictiveController(F, A, B)
        acts[name] = ZohActuator(np.zeros(B.shape[1]))
    gain_cache = {}

    def retarget(new_mode):
        for name in new_mode.loops:
            A, B, Sp = specs[name].discrete(new_mode.T_U)
            plants[name].retarget(A, B, new_mode.T_U, Sp)
            key = (name, new_mode.id)
            if key not in gain_cache:
                gain_cache[key] = sc.controllers[name].gain(A, B, new_mode.T_U)
            ctrls[name].retarget(gain_cache[key], A, B)

    for name in mode.loops:
        gain_cache[(name, mode.id)] = ctrls[name].F

    n = max(p.n for p in specs.values())
    m = max(plants[nm].m for nm in plants)
    rec = _Recorder(list(specs), n, m)
    script = {k: (nxt, r) for k, nxt, r in sc.mode_script}
    termination = None
    t = 0.0
    for k in range(sc.horizon):
        if k in script:
            host_request_mode_change(net, *script[k])
        out = run_round(net, rng_net)
        if out.dead:
            mode = modes[out.mode]
            retarget(mode)
        rec.step(k, t, out.mode, out.dead, out.burst)
        for name in specs:
            plant, ctrl, act = plants[name], ctrls[name], acts[name]
            if name not in mode.loops:
                rec.plant(name, plant.x, plant.x, act.u_prev, ctrl.u_hat, ctrl.x_hat, False, False)
                continue
            y_msg, ctrl_node, u_msg = _loop_messages(mode, name)
            if name in out.resynced or ctrl_node in out.resynced:
                ctrl.reset()
            y = measure(plant, rng_meas[name])
            theta = out.delivered(y_msg, ctrl_node)
            phi = out.delivered(u_msg, name) and ctrl.initialized
            u_now = plant.saturate(act.u_prev)
            rec.plant(name, plant.x, y, u_now, ctrl.u_hat, ctrl.x_hat, theta, phi)
            try:
                plant_step(plant, u_now, rng_proc[name])
            except TrackLimitExceeded as exc:
                termination = {"cause": "track-limit", "plant": name, "step": k, "position": exc.position}
            actuator_apply(act, phi, ctrl.u_hat if phi else None)
            predictor_update(ctrl, theta, y if theta else None)
            if ctrl.initialized:
                compute_input(ctrl)
        t += mode.T_U
        if termination is not None:
            break
    cons = {nm: s.constraints for nm, s in specs.items()}
    return rec.finish(plants, net.history, modes, termination, cons)


def run_sync_scenario(sc: Scenario, record_rounds=True) -> Trace:
    """Locally stabilized agents coupled through periodically exchanged states.

    Each agent applies ``u_i = F_ii y_i + sum_j F_ij x_j^held``; remote states
    are sent once per network round and used from the following round on,
    held constant in between.
    """
    if sc.sync is None:
        raise ScenarioError("scenario has no sync configuration")
    cfg = sc.sync
    mode = next(m for m in sc.modes if m.id == sc.initial_mode)
    agents = list(mode.loops)
    N = len(agents)
    if N < 2:
        raise ScenarioError("synchronization needs at least two agents")
    if len(cfg.Q) != N or len(cfg.R) != N:
        raise ScenarioError("sync weights must be given per agent")
    if abs(mode.T_U - cfg.ratio * cfg.local_T) > 1e-12:
        raise ScenarioError("network period must equal ratio x local period")
    specs = {a: sc.plant(a) for a in agents}
    plants = {a: specs[a].build(cfg.local_T) for a in agents}
    Fb = sync_lqr(SyncLqrSpec([plants[a].A for a in agents], [plants[a].B for a in agents],
                              list(cfg.Q), list(cfg.R), cfg.Q_sync))
    net = NetworkSim(sc.modes, sc.initial_mode, sc.loss, record=record_rounds)
    rng_net = _stream(sc.seed, "network", _NET)
    rng_proc = {a: _stream(sc.seed, specs[a].noise_key or a, _PROC) for a in agents}
    rng_meas = {a: _stream(sc.seed, specs[a].noise_key or a, _MEAS) for a in agents}

    held = {(i, j): plants[agents[j]].x.copy() for i in range(N) for j in range(N) if i != j}
    inbox = {}
    n, m = plants[agents[0]].n, plants[agents[0]].m
    rec = _Recorder(agents, n, m)
    holds = list(sc.hold_script)
    termination = None
    out = None
    for k in range(sc.horizon):
        t = k * cfg.local_T
        fresh = np.zeros(N, bool)
        network_step = k % cfg.ratio == 0
        if network_step:
            for key, value in inbox.items():
                held[key] = value
                fresh[key[0]] = True
            inbox = {}
            out = run_round(net, rng_net)
        for h in holds:
            if h.start <= k < h.stop:
                x = np.zeros(n)
                x[0] = h.position
                plants[h.agent].x = x
        ys = [measure(plants[a], rng_meas[a]) for a in agents]
        if network_step:
            for i, a in enumerate(agents):
                for j, b in enumerate(agents):
                    if i != j and out.delivered(f"x.{b}", a):
                        inbox[(i, j)] = ys[j].copy()
        rec.step(k, t, out.mode, out.dead, out.burst)
        for i, a in enumerate(agents):
            plant = plants[a]
            u = Fb[i, i] @ ys[i]
            for j in range(N):
                if j != i:
                    u = u + Fb[i, j] @ held[(i, j)]
            u = plant.saturate(u)
            rec.plant(a, plant.x, ys[i], u, u, ys[i], fresh[i], True)
            try:
                plant_step(plant, u, rng_proc[a])
            except TrackLimitExceeded as exc:
                if termination is None:
                    termination = {"cause": "track-limit", "plant": a, "step": k, "position": exc.position}
        if termination is not None:
            break
    cons = {a: specs[a].constraints for a in agents}
    return rec.finish(plants, net.history, {mm.id: mm for mm in sc.modes}, termination, cons)


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Distribution:
    min: float
    max: float
    mean: float
    std: float
    p01: float
    p50: float
    p99: float

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            return cls(*([math.nan] * 7))
        p = np.percentile(v, [1, 50, 99])
        return cls(float(v.min()), float(v.max()), float(v.mean()), float(v.std()), *map(float, p))


@dataclass(frozen=True)
class PlantMetrics:
    angle: Distribution
    position: Distribution
    input: Distribution
    traveled_distance: float
    within_track: bool
    within_input_cap: bool


@dataclass(frozen=True)
class Metrics:
    plants: dict
    duty_cycle: dict
    sync_error: dict
    success: bool
    termination: dict | None

    @property
    def mean_sync_error(self):
        if not self.sync_error:
            return math.nan
        return float(np.mean([d.mean for d in self.sync_error.values()]))

    def to_json(self):
        def dist(d):
            return vars(d).copy()
        return {
            "schema_version": 1,
            "success": self.success,
            "termination": self.termination,
            "duty_cycle": {str(k): v for k, v in self.duty_cycle.items()},
            "plants": {name: {"angle": dist(pm.angle), "position": dist(pm.position), "input": dist(pm.input),
                              "traveled_distance": pm.traveled_distance, "within_track": pm.within_track,
                              "within_input_cap": pm.within_input_cap}
                       for name, pm in self.plants.items()},
            "sync_error": {k: dist(v) for k, v in self.sync_error.items()},
            "mean_sync_error": self.mean_sync_error,
        }


def traveled_distance(positions):
    s = np.asarray(positions, dtype=float)
    return float(np.abs(np.diff(s)).sum()) if s.size > 1 else 0.0


def compute_metrics(tr: Trace) -> Metrics:
    if tr.steps == 0:
        raise ValueError("empty trace")
    plants = {}
    for name, p in tr.plants.items():
        pos = p.positions
        within_track = p.track_limit is None or bool(np.all(np.abs(pos) <= p.track_limit))
        within_cap = p.input_cap is None or bool(np.all(np.abs(p.u) <= p.input_cap + 1e-12))
        angle = p.x[:, 2] if p.x.shape[1] > 2 else p.x[:, 0]
        plants[name] = PlantMetrics(Distribution.of(angle), Distribution.of(p.x[:, 0]), Distribution.of(p.u),
                                    traveled_distance(pos), within_track, within_cap)
    duty = {}
    for mid in np.unique(tr.mode):
        duty[int(mid)] = tr.modes[int(mid)].schedule.duty_cycle
    sync = {}
    names = list(tr.plants)
    if len(names) > 1:
        for a, b in itertools.combinations(names, 2):
            sync[f"{a}|{b}"] = Distribution.of(np.abs(tr.plants[a].x[:, 0] - tr.plants[b].x[:, 0]))
    success = tr.termination is None and all(pm.within_track for pm in plants.values())
    return Metrics(plants, duty, sync, success, tr.termination)


def delivery_order_violations(tr: Trace):
    return check_delivery_order(tr.rounds)


# ------------------------------------------------------- analysis bridges

def find_critical_loss(A, B, F, axis="both", tol=1e-4, mss_tol=1e-6):
    """Smallest delivery probability that keeps the loop mean-square stable.

    Bisection on the analyzer verdict along ``theta`` (``mu_phi = 1``),
    ``phi`` (``mu_theta = 1``) or ``both`` (equal probabilities).
    """
    if axis not in ("theta", "phi", "both"):
        raise ValueError("axis must be 'theta', 'phi' or 'both'")

    def stable(mu):
        mt = mu if axis in ("theta", "both") else 1.0
        mp = mu if axis in ("phi", "both") else 1.0
        return check_mss(build_augmented(A, B, F, mt, mp), mss_tol).stable

    if not stable(1.0):
        raise AnalysisError("loop is not mean-square stable even without losses")
    lo, hi = 0.0, 1.0
    if stable(tol / 2):
        return tol / 2
    lo = tol / 2
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if stable(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def simulate_loop_batch(A, B, F, mu_theta, mu_phi, steps, chains, rng, Sigma_proc=None, Sigma_meas=None,
                        x0=None):
    """Vectorized remote loop (no network stack): returns plant states, shape ``(steps + 1, chains, n)``.

    Runs the same predictor/actuator equations as :func:`run_scenario` with
    i.i.d. delivery flags and the controller initialized at ``x0``.
    """
    A, B, F = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, F))
    n, m = B.shape
    Lp = _factor(Sigma_proc, n)
    Lm = _factor(Sigma_meas, n)
    x = np.zeros((chains, n)) if x0 is None else np.broadcast_to(np.asarray(x0, float), (chains, n)).copy()
    xh = x.copy()
    u = np.zeros((chains, m))
    uh = np.zeros((chains, m))
    uhp = np.zeros((chains, m))
    out = np.empty((steps + 1, chains, n))
    out[0] = x
    AT, BT, FT = A.T, B.T, F.T
    for k in range(steps):
        th = rng.random(chains) < mu_theta
        ph = rng.random(chains) < mu_phi
        y = x if Lm is None else x + rng.standard_normal((chains, n)) @ Lm.T
        xn = x @ AT + u @ BT
        if Lp is not None:
            xn += rng.standard_normal((chains, n)) @ Lp.T
        u = np.where(ph[:, None], uh, u)
        xh = np.where(th[:, None], y, xh) @ AT + uhp @ BT
        uhp, uh = uh, (xh @ AT + uh @ BT) @ FT
        x = xn
        out[k + 1] = x
    return out


def _factor(S, n):
    if S is None:
        return None
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not np.any(S):
        return None
    w, V = np.linalg.eigh(S)
    return V * np.sqrt(np.clip(w, 0.0, None))


def _raw_loop_step(z, th, ph, A, B, F, n, m):
    """One step of the noise-free loop on stacked ``(x, x_hat, u, u_hat, u_hat_prev)`` rows."""
    x, xh, u, uh, uhp = np.split(z, [n, 2 * n, 2 * n + m, 2 * n + 2 * m], axis=1)
    xn = x @ A.T + u @ B.T
    un = np.where(ph[:, None], uh, u)
    xhn = np.where(th[:, None], x, xh) @ A.T + uhp @ B.T
    uhn = (xhn @ A.T + uh @ B.T) @ F.T
    return np.hstack([xn, xhn, un, uhn, uh])


def second_moment_growth_rate(A, B, F, mu_theta, mu_phi, steps=10_000, clones=200, rng=None, burn_in=None):
    """Monte Carlo estimate of ``log rho`` of the noise-free loop's second moment.

    Population (cloning) estimator: ``clones`` copies of the raw loop are
    propagated with independent delivery flags; each step the log of the
    mean squared-norm gain is accumulated and the population is resampled
    in proportion to the gains. Plain sample averages of ``|z|^2`` are
    dominated by rare long loss runs and need far more trials. The finite
    population biases the estimate slightly low.
    """
    rng = np.random.default_rng() if rng is None else rng
    A, B, F = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, F))
    n, m = B.shape
    burn_in = steps // 10 if burn_in is None else burn_in
    d = 2 * n + 3 * m
    # the four one-step maps, obtained by pushing basis vectors through the raw update
    eye = np.eye(d)
    maps = np.empty((4, d, d))
    for code in range(4):
        th = np.full(d, bool(code & 1))
        ph = np.full(d, bool(code & 2))
        maps[code] = _raw_loop_step(eye, th, ph, A, B, F, n, m)
    z = rng.standard_normal((clones, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    total = 0.0
    offsets = np.arange(clones) / clones
    for k in range(steps + burn_in):
        code = (rng.random(clones) < mu_theta).astype(int) + 2 * (rng.random(clones) < mu_phi)
        z = np.einsum("ij,ijk->ik", z, maps[code])
        w = np.einsum("ij,ij->i", z, z)
        mean_w = w.mean()
        if not mean_w > 0:
            return -math.inf
        if k >= burn_in:
            total += math.log(mean_w)
        cdf = np.cumsum(w)
        idx = np.minimum(np.searchsorted(cdf, (offsets + rng.random() / clones) * cdf[-1]), clones - 1)
        z = z[idx] / np.sqrt(w[idx])[:, None]
    return total / steps
