"""Round-based wireless network: beacons, data slots, mode changes, losses.

The network runs one communication round per update interval. Each round
starts with a beacon flooded by the host; a node may only take part in the
round if it received the beacon and its local mode agrees with the mode the
beacon announces. Data slots are atomic: every destination of a slot
independently receives the message or not.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

SLOT_KINDS = ("sensor", "control", "state")


@dataclass(frozen=True)
class JitterParams:
    """Inputs of the worst-case jitter bound, times in microseconds."""

    e_ref_hat: float = 10.0
    e_sync_hat: float = 1.0 / 48.0
    rho_ap_hat: float = 50e-6
    rho_cp_hat: float = 50e-6
    e_task_hat: float = 10.0
    T_end_tilde: float = 100e3

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")


def jitter_bound(p: JitterParams) -> float:
    """``2 (e_ref + e_sync + T_end (rho_ap + rho_cp)) + e_task`` in microseconds."""
    return 2.0 * (p.e_ref_hat + p.e_sync_hat + p.T_end_tilde * (p.rho_ap_hat + p.rho_cp_hat)) + p.e_task_hat


@dataclass(frozen=True)
class Slot:
    """One data slot: ``message_id`` flooded from ``source`` to ``destinations``.

    ``kind`` picks the delivery probability: ``sensor`` and ``state``
    messages use ``mu_theta``, ``control`` messages use ``mu_phi``.
    """

    message_id: str
    source: str
    destinations: tuple
    kind: str = "sensor"

    def __post_init__(self):
        object.__setattr__(self, "destinations", tuple(self.destinations))
        if not self.destinations:
            raise ValueError(f"slot {self.message_id!r} has no destination")
        if self.kind not in SLOT_KINDS:
            raise ValueError(f"slot kind must be one of {SLOT_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class RoundSchedule:
    period_T: float
    slots: tuple
    mode_id: int
    slot_duration: float = 2e-3

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        if not self.period_T > 0:
            raise ValueError("round period must be positive")
        if not self.slot_duration > 0:
            raise ValueError("slot duration must be positive")
        ids = [s.message_id for s in self.slots]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate message ids in schedule of mode {self.mode_id}")
        if self.active_slots * self.slot_duration > self.period_T + 1e-12:
            raise ValueError(f"schedule of mode {self.mode_id} does not fit in its round period")

    @property
    def active_slots(self):
        return 1 + len(self.slots)  # beacon + data

    @property
    def duty_cycle(self):
        """Radio-on proxy: active slots x slot length / period."""
        return self.active_slots * self.slot_duration / self.period_T

    @property
    def nodes(self):
        out = []
        for s in self.slots:
            for node in (s.source, *s.destinations):
                if node not in out:
                    out.append(node)
        return out


@dataclass(frozen=True)
class Mode:
    """A system configuration: its schedule, update interval and active loops.

    For remote-control modes the pipelined schedule gives ``T_D = 2 T_U``.
    """

    id: int
    schedule: RoundSchedule
    T_U: float
    T_D: float | None = None
    loops: tuple = ()
    remote: bool = True

    def __post_init__(self):
        object.__setattr__(self, "loops", tuple(self.loops))
        if not self.T_U > 0:
            raise ValueError("T_U must be positive")
        if self.T_D is None:
            object.__setattr__(self, "T_D", 2.0 * self.T_U if self.remote else self.T_U)
        if self.remote and abs(self.T_D - 2.0 * self.T_U) > 1e-12:
            raise ValueError(f"remote mode {self.id}: T_D must equal 2 T_U")
        if self.schedule.mode_id != self.id:
            raise ValueError(f"schedule belongs to mode {self.schedule.mode_id}, not {self.id}")
        if abs(self.schedule.period_T - self.T_U) > 1e-12 and self.remote:
            raise ValueError(f"remote mode {self.id}: round period must equal T_U")


@dataclass(frozen=True)
class Burst:
    length: int
    interval_s: float

    def __post_init__(self):
        if self.length < 1 or not self.interval_s > 0:
            raise ValueError("burst needs length >= 1 and a positive interval")


@dataclass(frozen=True)
class LossConfig:
    mu_theta: float = 1.0
    mu_phi: float = 1.0
    beacon_loss_p: float = 0.001
    burst: Burst | None = None

    def __post_init__(self):
        for name in ("mu_theta", "mu_phi", "beacon_loss_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def delivery_probability(self, kind):
        return self.mu_phi if kind == "control" else self.mu_theta


@dataclass
class ModeChangeState:
    """``pending = (next_mode, counter)``; ``counter`` is what the next beacon carries."""

    current_mode: int
    local_modes: dict
    pending: tuple | None = None
    informed: set = field(default_factory=set)


@dataclass(frozen=True)
class Delivery:
    round: int
    slot: int
    message_id: str
    destination: str
    generation: int
    delivered: bool


@dataclass
class RoundOutcome:
    round: int
    time: float
    mode: int
    counter: int | None
    beacon: dict
    participating: dict
    local_modes: dict
    deliveries: list
    dead: bool = False
    burst: bool = False
    events: tuple = ()
    resynced: tuple = ()

    def delivered(self, message_id, destination):
        for d in self.deliveries:
            if d.message_id == message_id and d.destination == destination:
                return d.delivered
        return False


class NetworkSim:
    """Single-owner round-by-round network state machine."""

    def __init__(self, modes, initial_mode, loss: LossConfig, nodes=None, record=True):
        self.modes = {m.id: m for m in modes}
        if len(self.modes) != len(list(modes)):
            raise ValueError("mode ids must be unique")
        if initial_mode not in self.modes:
            raise ValueError(f"unknown initial mode {initial_mode}")
        if nodes is None:
            nodes = []
            for m in self.modes.values():
                nodes += [n for n in m.schedule.nodes if n not in nodes]
        self.nodes = list(nodes)
        self.loss = loss
        self.state = ModeChangeState(initial_mode, {n: initial_mode for n in self.nodes})
        self.round_index = 0
        self.time = 0.0
        self.record = record
        self.history = []
        self._burst_left = 0
        self._next_burst = loss.burst.interval_s if loss.burst else None

    @property
    def mode(self) -> Mode:
        return self.modes[self.state.current_mode]


def host_request_mode_change(net: NetworkSim, next_mode, r) -> bool:
    """Queue a change to ``next_mode`` effective ``r`` rounds after the first request beacon."""
    if next_mode not in net.modes:
        return False
    if net.state.pending is not None or int(r) < 1:
        return False
    net.state.pending = (next_mode, int(r))
    net.state.informed = set()
    return True


def advance_mode_change(net: NetworkSim):
    """Start-of-round countdown handling; returns the events of this round.

    When the counter has reached zero, every informed node adopts the new
    mode and the round is a dead round without data slots.
    """
    st = net.state
    if st.pending is None:
        return ()
    next_mode, counter = st.pending
    if counter > 0:
        return ("countdown",)
    for node in st.informed:
        st.local_modes[node] = next_mode
    st.current_mode = next_mode
    st.pending = None
    st.informed = set()
    return ("switch-now", "flush", "dead-round")


def _burst_active(net: NetworkSim):
    b = net.loss.burst
    if b is None:
        return False
    if net._burst_left == 0 and net.time >= net._next_burst - 1e-12:
        net._burst_left = b.length
        net._next_burst += b.interval_s
    if net._burst_left > 0:
        net._burst_left -= 1
        return True
    return False


def run_round(net: NetworkSim, rng) -> RoundOutcome:
    st = net.state
    events = advance_mode_change(net)
    dead = "dead-round" in events
    mode = net.mode
    counter = st.pending[1] if st.pending is not None else None

    heard = rng.random(len(net.nodes)) >= net.loss.beacon_loss_p
    beacon = dict(zip(net.nodes, map(bool, heard)))
    participating, resynced = {}, []
    for node in net.nodes:
        ok = beacon[node] and st.local_modes[node] == st.current_mode
        participating[node] = ok
        if beacon[node] and not ok:
            # fall-back: adopt the announced mode, take part from the next round
            st.local_modes[node] = st.current_mode
            resynced.append(node)
        if beacon[node] and counter is not None:
            st.informed.add(node)
    if st.pending is not None:
        st.pending = (st.pending[0], st.pending[1] - 1)

    burst = _burst_active(net)
    deliveries = []
    if not dead:
        for si, slot in enumerate(mode.schedule.slots):
            src_ok = participating.get(slot.source, False)
            mu = net.loss.delivery_probability(slot.kind)
            draws = rng.random(len(slot.destinations)) < mu
            for dst, ok in zip(slot.destinations, draws):
                got = bool(ok) and src_ok and participating.get(dst, False) and not burst
                deliveries.append(Delivery(net.round_index, si, slot.message_id, dst, net.round_index, got))

    out = RoundOutcome(net.round_index, net.time, st.current_mode, counter, beacon, participating,
                       dict(st.local_modes), deliveries, dead, burst, events, tuple(resynced))
    if net.record:
        net.history.append(out)
    net.round_index += 1
    net.time += mode.T_U
    return out


def check_delivery_order(outcomes) -> list:
    """Duplicate or out-of-order deliveries in a round trace (empty list if none)."""
    last = {}
    problems = []
    for out in outcomes:
        for d in out.deliveries:
            if not d.delivered:
                continue
            key = (d.message_id, d.destination)
            if key in last and d.generation <= last[key]:
                kind = "duplicate" if d.generation == last[key] else "out-of-order"
                problems.append((kind, d))
            last[key] = d.generation
    return problems


TRACE_FIELDS = ("round", "time", "mode", "slot", "message_id", "destination", "generation", "delivered",
                "burst", "local_modes")


def trace_to_csv(outcomes, fh=None):
    """Delivery trace as CSV text (also written to ``fh`` if given)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for out in outcomes:
        modes = ";".join(f"{n}={m}" for n, m in sorted(out.local_modes.items()))
        if not out.deliveries:
            w.writerow([out.round, f"{out.time:.6f}", out.mode, "", "", "", "", "", int(out.burst), modes])
        for d in out.deliveries:
            w.writerow([out.round, f"{out.time:.6f}", out.mode, d.slot, d.message_id, d.destination,
                        d.generation, int(d.delivered), int(out.burst), modes])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def effective_delivery(loss: LossConfig):
    """Per-loop ``(mu_theta, mu_phi)`` including beacon misses at both ends."""
    beacon = (1.0 - loss.beacon_loss_p) ** 2
    return loss.mu_theta * beacon, loss.mu_phi * beacon


def remote_loop_slots(plant, controller=None):
    """Sensor and control slots for one remote loop ``plant <-> controller``."""
    controller = controller or f"{plant}.ctrl"
    return (Slot(f"y.{plant}", plant, (controller,), "sensor"),
            Slot(f"u.{plant}", controller, (plant,), "control"))


def remote_mode(mode_id, T_U, plants, slot_duration=2e-3):
    slots = []
    for p in plants:
        slots += remote_loop_slots(p)
    return Mode(mode_id, RoundSchedule(T_U, tuple(slots), mode_id, slot_duration), T_U, loops=tuple(plants))


def sync_mode(mode_id, period, agents, slot_duration=2e-3):
    """Every agent floods its state to all others once per round."""
    slots = tuple(Slot(f"x.{a}", a, tuple(b for b in agents if b != a), "state") for a in agents)
    return Mode(mode_id, RoundSchedule(period, slots, mode_id, slot_duration), period,
                loops=tuple(agents), remote=False)


def loss_indicator_autocorrelation(flags):
    x = np.asarray(flags, dtype=float)
    x = x - x.mean()
    den = float(x @ x)
    return 0.0 if den == 0 else float(x[:-1] @ x[1:]) / den
