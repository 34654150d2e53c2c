"""Trace and experiment-config files.

A trace file is line-delimited JSON with a fixed record order: one header,
every message in store (hence dependency) order, the chain catalog, every
event, then the final node states. All content ids are hex; every object is
dumped with sorted keys and no whitespace, so identical runs produce
byte-identical files. Loading re-derives each message id from its content and
refuses mismatches, which catches any corruption of the message records.

An experiment config is a single JSON object naming the environment, the
strategy (or, in the benign model, the scheduler), the seed list and the run
bounds. Parse errors carry line/column positions from the JSON decoder.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, TextIO, Tuple

from . import adversary as adv
from .engine import CorrectNodeSpec, Environment, Event, Trace, validate_environment
from .messages import GorillaMessage, MessageStore, SandglassMessage
from .oracle import VdfInput
from hashlib import sha256

FORMAT_VERSION = 1
_BYTES_KEYS = ("msg", "input")  # event-data fields holding content ids


class TraceFormatError(Exception):
    """A trace file that cannot be decoded back into a run."""


class ConfigError(Exception):
    """An experiment config that fails validation; message carries position."""


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# --- environment (de)serialization -------------------------------------------


def env_to_dict(env: Environment) -> Dict[str, object]:
    return {
        "k": env.k,
        "n": env.n,
        "max_steps": env.max_steps,
        "correct": [
            {"id": s.node_id, "value": s.value, "join": s.join, "leave": s.leave}
            for s in env.correct
        ],
        "capacity": list(env.capacity),
        "defective_values": list(env.defective_values),
    }


def env_from_dict(d: Dict[str, object]) -> Environment:
    try:
        correct = tuple(
            CorrectNodeSpec(
                node_id=str(c["id"]),
                value=str(c["value"]),
                join=int(c.get("join", 0)),
                leave=(None if c.get("leave") is None else int(c["leave"])),
            )
            for c in d["correct"]
        )
        env = Environment(
            k=int(d["k"]),
            n=int(d["n"]),
            max_steps=int(d["max_steps"]),
            correct=correct,
            capacity=tuple(int(x) for x in d.get("capacity", [0])),
            defective_values=tuple(str(v) for v in d.get("defective_values", ["a", "b"])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("bad environment: %s" % exc) from exc
    try:
        validate_environment(env)
    except ValueError as exc:
        raise ConfigError("bad environment: %s" % exc) from exc
    return env


def env_digest(env: Environment) -> str:
    return sha256(_dump(env_to_dict(env)).encode()).hexdigest()


# --- trace files --------------------------------------------------------------


def _msg_to_dict(msg) -> Dict[str, object]:
    if isinstance(msg, GorillaMessage):
        return {
            "kind": "G",
            "round": msg.round,
            "value": msg.value,
            "priority": msg.priority,
            "uc": msg.uc,
            "coffer": sorted(m.hex() for m in msg.coffer),
            "nonce": msg.nonce.hex(),
            "vdf": msg.vdf,
        }
    if isinstance(msg, SandglassMessage):
        return {
            "kind": "S",
            "sender": msg.sender,
            "uid": msg.uid,
            "round": msg.round,
            "value": msg.value,
            "priority": msg.priority,
            "uc": msg.uc,
            "coffer": sorted(m.hex() for m in msg.coffer),
        }
    raise TraceFormatError("unknown message type %r" % type(msg).__name__)


def _msg_from_dict(d: Dict[str, object]):
    coffer = frozenset(bytes.fromhex(m) for m in d["coffer"])
    if d["kind"] == "G":
        return GorillaMessage(
            round=int(d["round"]),
            value=str(d["value"]),
            priority=int(d["priority"]),
            uc=int(d["uc"]),
            coffer=coffer,
            nonce=bytes.fromhex(d["nonce"]),
            vdf=int(d["vdf"]),
        )
    if d["kind"] == "S":
        return SandglassMessage(
            sender=str(d["sender"]),
            uid=int(d["uid"]),
            round=int(d["round"]),
            value=str(d["value"]),
            priority=int(d["priority"]),
            uc=int(d["uc"]),
            coffer=coffer,
        )
    raise TraceFormatError("unknown message kind %r" % d["kind"])


def _event_data_out(data: Dict[str, object]) -> Dict[str, object]:
    out = dict(data)
    for key in _BYTES_KEYS:
        if isinstance(out.get(key), bytes):
            out[key] = out[key].hex()
    return out


def _event_data_in(data: Dict[str, object]) -> Dict[str, object]:
    out = dict(data)
    for key in _BYTES_KEYS:
        if isinstance(out.get(key), str):
            out[key] = bytes.fromhex(out[key])
    return out


def write_trace(trace: Trace, fh: TextIO) -> None:
    header = {
        "type": "header",
        "format": FORMAT_VERSION,
        "model": trace.model,
        "k": trace.k,
        "n": trace.env.n,
        "t": trace.t,
        "seed": trace.seed,
        "env_digest": env_digest(trace.env),
        "env": env_to_dict(trace.env),
        "meta": trace.meta,
    }
    fh.write(_dump(header) + "\n")
    for mid in trace.store.ids_in_order():
        rec = {"type": "msg", "id": mid.hex()}
        rec.update(_msg_to_dict(trace.store.get(mid)))
        fh.write(_dump(rec) + "\n")
    for digest in sorted(trace.chains):
        inp = trace.chains[digest]
        fh.write(_dump({
            "type": "chain",
            "digest": digest.hex(),
            "coffer": sorted(m.hex() for m in inp.coffer),
            "nonce": inp.nonce.hex(),
        }) + "\n")
    for ev in trace.events:
        fh.write(_dump({
            "type": "event",
            "tick": ev.tick,
            "phase": ev.phase,
            "seq": ev.seq,
            "kind": ev.kind,
            "data": _event_data_out(ev.data),
        }) + "\n")
    fh.write(_dump({"type": "final", "states": trace.final_states}) + "\n")


def save_trace(trace: Trace, path: str) -> None:
    with open(path, "w") as fh:
        write_trace(trace, fh)


def load_trace(path: str) -> Trace:
    header = None
    store = MessageStore()
    chains: Dict[bytes, VdfInput] = {}
    events: List[Event] = []
    final_states: Dict[str, Dict[str, object]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError("line %d: %s" % (lineno, exc)) from exc
            try:
                rtype = rec["type"]
                if rtype == "header":
                    if header is not None:
                        raise TraceFormatError("line %d: second header" % lineno)
                    if rec.get("format") != FORMAT_VERSION:
                        raise TraceFormatError(
                            "line %d: unsupported format %r"
                            % (lineno, rec.get("format"))
                        )
                    header = rec
                elif rtype == "msg":
                    msg = _msg_from_dict(rec)
                    mid = store.intern(msg)
                    if mid.hex() != rec["id"]:
                        raise TraceFormatError(
                            "line %d: message content does not hash to its id"
                            % lineno
                        )
                elif rtype == "chain":
                    inp = VdfInput(
                        frozenset(bytes.fromhex(m) for m in rec["coffer"]),
                        bytes.fromhex(rec["nonce"]),
                    )
                    if inp.digest.hex() != rec["digest"]:
                        raise TraceFormatError(
                            "line %d: chain input does not hash to its digest"
                            % lineno
                        )
                    chains[inp.digest] = inp
                elif rtype == "event":
                    events.append(Event(
                        tick=int(rec["tick"]),
                        phase=int(rec["phase"]),
                        seq=int(rec["seq"]),
                        kind=str(rec["kind"]),
                        data=_event_data_in(rec["data"]),
                    ))
                elif rtype == "final":
                    final_states = rec["states"]
                else:
                    raise TraceFormatError(
                        "line %d: unknown record type %r" % (lineno, rtype)
                    )
            except TraceFormatError:
                raise
            except Exception as exc:
                raise TraceFormatError("line %d: %s" % (lineno, exc)) from exc
    if header is None:
        raise TraceFormatError("no header record")
    env = env_from_dict(header["env"])
    if env_digest(env) != header["env_digest"]:
        raise TraceFormatError("environment does not hash to the header digest")
    return Trace(
        model=str(header["model"]),
        seed=int(header["seed"]),
        env=env,
        events=events,
        store=store,
        chains=chains,
        final_states=final_states,
        meta=dict(header.get("meta", {})),
    )


# --- experiment configs ---------------------------------------------------


@dataclass
class ExperimentConfig:
    env: Environment
    model: str = "gm"
    seeds: Tuple[int, ...] = (0,)
    strategy: str = "null"
    strategy_params: Dict[str, object] = field(default_factory=dict)
    unit_bits: int = 64
    out: Optional[str] = None

    def make_strategy(self, seed: int):
        """Instantiate the configured adversary for one seeded run."""
        params = dict(self.strategy_params)
        if self.strategy == "fuzz":
            params.setdefault("seed", seed)
        if self.model == "sm+":
            return adv.scheduler_from_config(self.strategy, params)
        return adv.strategy_from_config(self.strategy, params)


def config_from_dict(d: Dict[str, object]) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - {
        "environment", "model", "seeds", "max_steps", "strategy", "unit_bits", "out",
    }
    if unknown:
        raise ConfigError("unknown config keys: %s" % ", ".join(sorted(unknown)))
    if "environment" not in d:
        raise ConfigError("config needs an 'environment' object")
    env_dict = dict(d["environment"])
    if "max_steps" in d:
        env_dict["max_steps"] = d["max_steps"]
    env = env_from_dict(env_dict)
    model = str(d.get("model", "gm"))
    if model not in ("gm", "gm+", "sm+"):
        raise ConfigError("model must be gm, gm+ or sm+, not %r" % model)
    seeds = d.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a list of integers")
    strat = d.get("strategy", {"name": "null"})
    if isinstance(strat, str):
        strat = {"name": strat}
    if not isinstance(strat, dict) or "name" not in strat:
        raise ConfigError("strategy must be a name or {name, params}")
    name = str(strat["name"])
    params = dict(strat.get("params", {}))
    registry = adv.BUILTIN_SCHEDULERS if model == "sm+" else adv.BUILTIN_STRATEGIES
    if name not in registry:
        raise ConfigError(
            "unknown strategy %r for model %s (have: %s)"
            % (name, model, ", ".join(sorted(registry)))
        )
    return ExperimentConfig(
        env=env,
        model=model,
        seeds=tuple(seeds),
        strategy=name,
        strategy_params=params,
        unit_bits=int(d.get("unit_bits", 64)),
        out=(None if d.get("out") is None else str(d["out"])),
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            "%s: line %d column %d: %s" % (path, exc.lineno, exc.colno, exc.msg)
        ) from exc
    except OSError as exc:
        raise ConfigError("%s: %s" % (path, exc)) from exc
    return config_from_dict(raw)
