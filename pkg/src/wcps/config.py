"""JSON scenario configuration: schema, validation and object construction.

Units: times in seconds, positions in meters, inputs in volts, noise
densities per second. Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import jsonschema
import numpy as np

from .control import SynthesisError
from .model import (
    CartPoleParams,
    ContinuousLti,
    NOMINAL_MEASUREMENT_STD,
    NOMINAL_PROCESS_DENSITY,
    PlantConstraints,
    linearize_cartpole,
)
from .net import Burst, LossConfig, Mode, RoundSchedule, Slot, effective_delivery, remote_mode, sync_mode
from .sim import ControllerDesign, Hold, PlantSpec, Scenario, ScenarioError, SyncConfig
from .stability import SwitchingSignal

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending JSON path."""


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_vector = {"type": "array", "items": _num, "minItems": 1}
_matrix = {"type": "array", "items": _vector, "minItems": 1}
_complex = {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "name": {"type": "string"},
    "description": {"type": "string"},
    "plants": {"type": "array", "minItems": 1, "items": _obj({
        "name": {"type": "string", "minLength": 1},
        "cartpole": _obj({
            "cart_mass": _pos, "pole_mass": _pos, "pole_half_length": _pos, "gravity": _pos,
            "cart_friction": {"type": "number", "minimum": 0}, "input_gain": _pos,
        }),
        "continuous": _obj({"A_c": _matrix, "B_c": _matrix}, ["A_c", "B_c"]),
        "discrete": _obj({"A": _matrix, "B": _matrix}, ["A", "B"]),
        "noise": _obj({
            "nominal": {"type": "boolean"},
            "scale": {"type": "number", "minimum": 0},
            "process_density": _matrix,
            "Sigma_proc": _matrix,
            "Sigma_meas": _matrix,
        }),
        "x0": _vector,
        "constraints": _obj({"input_cap": _pos, "track_limit": _pos}),
        "noise_key": {"type": "string"},
    }, ["name"])},
    "controllers": {"type": "object", "additionalProperties": _obj({
        "poles": {"type": "array", "items": _complex, "minItems": 1},
        "reference_T": _pos,
        "lqr": _obj({"Q": _matrix, "R": _matrix}, ["Q", "R"]),
        "F": _matrix,
    })},
    "sync": _obj({
        "Q": {"oneOf": [_matrix, {"type": "array", "items": _matrix, "minItems": 2}]},
        "R": {"oneOf": [_matrix, {"type": "array", "items": _matrix, "minItems": 2}]},
        "Q_sync": _matrix,
        "local_T": _pos,
        "ratio": {"type": "integer", "minimum": 1},
    }, ["Q", "R", "Q_sync"]),
    "network": _obj({
        "mu_theta": _prob,
        "mu_phi": _prob,
        "beacon_loss_p": _prob,
        "burst": _obj({"length": {"type": "integer", "minimum": 1}, "interval_s": _pos}, ["length", "interval_s"]),
        "slot_duration": _pos,
        "initial_mode": {"type": "integer"},
        "modes": {"type": "array", "minItems": 1, "items": _obj({
            "id": {"type": "integer"},
            "T_U": _pos,
            "kind": {"enum": ["remote", "sync"]},
            "loops": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "schedule": {"type": "array", "items": _obj({
                "message_id": {"type": "string"},
                "source": {"type": "string"},
                "destinations": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "kind": {"enum": ["sensor", "control", "state"]},
            }, ["message_id", "source", "destinations", "kind"])},
        }, ["id", "T_U", "loops"])},
    }, ["modes"]),
    "run": _obj({
        "horizon": {"type": "integer", "minimum": 1},
        "horizon_s": _pos,
        "seed": {"type": "integer", "minimum": 0},
        "trials": {"type": "integer", "minimum": 1},
        "mode_script": {"type": "array", "items": _obj({
            "step": {"type": "integer", "minimum": 0},
            "next_mode": {"type": "integer"},
            "r": {"type": "integer", "minimum": 1},
        }, ["step", "next_mode", "r"])},
        "periodic_switching": _obj({
            "period": {"type": "integer", "minimum": 1},
            "r": {"type": "integer", "minimum": 1},
            "modes": {"type": "array", "items": {"type": "integer"}, "minItems": 2},
        }, ["period"]),
        "hold_script": {"type": "array", "items": _obj({
            "agent": {"type": "string"},
            "start": {"type": "integer", "minimum": 0},
            "stop": {"type": "integer", "minimum": 0},
            "position": _num,
        }, ["agent", "start", "stop", "position"])},
        "chatter_bound": {"type": "number", "minimum": 0},
    }),
    "output": _obj({"trace_csv": {"type": "boolean"}, "network_csv": {"type": "boolean"}}),
}, ["schema_version", "plants", "network"])

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def _path(error):
    return error.json_path if hasattr(error, "json_path") else "$" + "".join(f"[{p!r}]" for p in error.absolute_path)


def validate(doc):
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: (len(list(e.absolute_path)), _path(e)))
    if errors:
        best = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"{_path(best)}: {best.message}")
    return doc


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"$: cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"$: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return validate(doc)


def _arr(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def _poles(values):
    return tuple(complex(v[0], v[1]) if isinstance(v, list) else complex(v) for v in values)


def plant_spec(doc, i) -> PlantSpec:
    p = doc["plants"][i]
    where = f"$.plants[{i}]"
    models = [k for k in ("cartpole", "continuous", "discrete") if k in p]
    if len(models) != 1:
        raise ConfigError(f"{where}: give exactly one of 'cartpole', 'continuous', 'discrete'")
    try:
        cont = A = B = None
        if "cartpole" in p:
            cont = linearize_cartpole(CartPoleParams(**p["cartpole"]))
        elif "continuous" in p:
            cont = ContinuousLti(_arr(p["continuous"]["A_c"]), _arr(p["continuous"]["B_c"]))
        else:
            A, B = _arr(p["discrete"]["A"]), _arr(p["discrete"]["B"])
        noise = p.get("noise", {})
        n = cont.state_dim if cont is not None else A.shape[0]
        density = Sp = Sm = None
        if noise.get("nominal", False):
            if n != 4 or cont is None:
                raise ConfigError(f"{where}.noise.nominal: nominal noise is defined for the 4-state cart-pole only")
            if any(k in noise for k in ("process_density", "Sigma_proc", "Sigma_meas")):
                raise ConfigError(f"{where}.noise: 'nominal' excludes explicit covariances")
            s = noise.get("scale", 1.0)
            density = NOMINAL_PROCESS_DENSITY * s**2
            Sm = np.diag((NOMINAL_MEASUREMENT_STD * s) ** 2)
        else:
            if "process_density" in noise and "Sigma_proc" in noise:
                raise ConfigError(f"{where}.noise: give either 'process_density' or 'Sigma_proc'")
            if "process_density" in noise:
                density = _arr(noise["process_density"])
            if "Sigma_proc" in noise:
                Sp = _arr(noise["Sigma_proc"])
            if "Sigma_meas" in noise:
                Sm = _arr(noise["Sigma_meas"])
        cons = PlantConstraints(**p["constraints"]) if "constraints" in p else None
        if "cartpole" in p and "constraints" not in p:
            cons = PlantConstraints()
        return PlantSpec(p["name"], cont, A, B, Sp, density, Sm, p.get("x0"), cons, p.get("noise_key"))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _modes(doc):
    net = doc["network"]
    slot = net.get("slot_duration", 2e-3)
    sync = doc.get("sync")
    modes = []
    for i, md in enumerate(net["modes"]):
        where = f"$.network.modes[{i}]"
        kind = md.get("kind", "sync" if sync else "remote")
        try:
            if "schedule" in md:
                slots = tuple(Slot(s["message_id"], s["source"], tuple(s["destinations"]), s["kind"])
                              for s in md["schedule"])
                period = md["T_U"]
                modes.append(Mode(md["id"], RoundSchedule(period, slots, md["id"], slot), md["T_U"],
                                  loops=tuple(md["loops"]), remote=(kind == "remote")))
            elif kind == "remote":
                modes.append(remote_mode(md["id"], md["T_U"], md["loops"], slot))
            else:
                modes.append(sync_mode(md["id"], md["T_U"], md["loops"], slot))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return modes


def loss_config(doc) -> LossConfig:
    net = doc["network"]
    burst = Burst(**net["burst"]) if "burst" in net else None
    return LossConfig(net.get("mu_theta", 1.0), net.get("mu_phi", 1.0), net.get("beacon_loss_p", 0.001), burst)


def _controllers(doc):
    out = {}
    for name, c in doc.get("controllers", {}).items():
        where = f"$.controllers.{name}"
        try:
            if "poles" in c:
                out[name] = ControllerDesign(poles=_poles(c["poles"]), reference_T=c.get("reference_T"))
            elif "lqr" in c:
                out[name] = ControllerDesign(Q=_arr(c["lqr"]["Q"]), R=_arr(c["lqr"]["R"]))
            elif "F" in c:
                out[name] = ControllerDesign(F=_arr(c["F"]))
            else:
                raise ConfigError(f"{where}: give one of 'poles', 'lqr', 'F'")
        except ScenarioError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return out


def _sync(doc, n_agents):
    s = doc.get("sync")
    if s is None:
        return None

    def per_agent(key):
        v = s[key]
        if isinstance(v[0][0], list):
            if len(v) != n_agents:
                raise ConfigError(f"$.sync.{key}: expected {n_agents} matrices, got {len(v)}")
            return tuple(_arr(q) for q in v)
        return tuple(_arr(v) for _ in range(n_agents))

    return SyncConfig(per_agent("Q"), per_agent("R"), _arr(s["Q_sync"]), s.get("local_T", 0.01), s.get("ratio", 5))


def horizon_steps(doc, modes=None):
    run = doc.get("run", {})
    if "horizon" in run and "horizon_s" in run:
        raise ConfigError("$.run: give either 'horizon' or 'horizon_s'")
    if "horizon" in run:
        return run["horizon"]
    seconds = run.get("horizon_s", 30.0)
    modes = modes or _modes(doc)
    init = doc["network"].get("initial_mode", modes[0].id)
    mode = next((m for m in modes if m.id == init), modes[0])
    step = doc["sync"].get("local_T", 0.01) if doc.get("sync") else mode.T_U
    return max(1, int(round(seconds / step)))


def mode_script(doc, horizon):
    run = doc.get("run", {})
    script = [(e["step"], e["next_mode"], e["r"]) for e in run.get("mode_script", [])]
    per = run.get("periodic_switching")
    if per is not None:
        if script:
            raise ConfigError("$.run: give either 'mode_script' or 'periodic_switching'")
        ids = per.get("modes") or [m["id"] for m in doc["network"]["modes"]][:2]
        r = per.get("r", 5)
        k, idx = per["period"] - r, 1
        while 0 <= k < horizon:
            script.append((k, ids[idx % len(ids)], r))
            k += per["period"]
            idx += 1
    return tuple(script)


def switching_signal(doc, horizon) -> SwitchingSignal:
    """Switch instants implied by the mode script (a request at step k with counter r fires at k + r)."""
    init = doc["network"].get("initial_mode", doc["network"]["modes"][0]["id"])
    events = [(0, init)] + [(k + r, nxt) for k, nxt, r in mode_script(doc, horizon)]
    N0 = doc.get("run", {}).get("chatter_bound", 1.0)
    return SwitchingSignal(tuple(events), N0, max(horizon, events[-1][0]))


def build_scenario(doc, seed=None) -> Scenario:
    plants = tuple(plant_spec(doc, i) for i in range(len(doc["plants"])))
    modes = _modes(doc)
    horizon = horizon_steps(doc, modes)
    run = doc.get("run", {})
    holds = tuple(Hold(h["agent"], h["start"], h["stop"], h["position"]) for h in run.get("hold_script", []))
    init = doc["network"].get("initial_mode", modes[0].id)
    agents = next((m.loops for m in modes if m.id == init), ())
    try:
        return Scenario(plants, tuple(modes), loss_config(doc), horizon,
                        run.get("seed", 0) if seed is None else seed, _controllers(doc), init,
                        mode_script(doc, horizon), holds, _sync(doc, len(agents)), doc.get("name", "scenario"))
    except ScenarioError as exc:
        raise ConfigError(f"$: {exc}") from exc
    except KeyError as exc:
        raise ConfigError(f"$: unknown reference {exc}") from exc


@dataclass(frozen=True)
class LoopModel:
    """Everything the analyzer needs for one remote loop in one mode."""

    plant: str
    mode: int
    T_U: float
    A: np.ndarray
    B: np.ndarray
    F: np.ndarray
    Sigma_proc: np.ndarray | None
    Sigma_meas: np.ndarray | None
    mu_theta: float
    mu_phi: float


def loop_models(doc, mode_id=None):
    """Remote loops of ``mode_id`` (default: every mode) with their effective delivery rates."""
    sc = build_scenario(doc)
    if sc.sync is not None:
        raise ConfigError("$.sync: the analyzer covers remote loops only")
    mu_t, mu_p = effective_delivery(sc.loss)
    out = []
    for mode in sc.modes:
        if mode_id is not None and mode.id != mode_id:
            continue
        for name in mode.loops:
            spec = sc.plant(name)
            A, B, Sp = spec.discrete(mode.T_U)
            try:
                F = sc.controllers[name].gain(A, B, mode.T_U)
            except (SynthesisError, ValueError) as exc:
                raise ConfigError(f"$.controllers.{name}: {exc}") from exc
            out.append(LoopModel(name, mode.id, mode.T_U, A, B, F, Sp, spec.Sigma_meas, mu_t, mu_p))
    return out
