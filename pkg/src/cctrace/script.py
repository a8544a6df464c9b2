"""Line-based scripts that drive a :class:`~cctrace.registry.Registry`.

Directives, one per line (``#`` starts a comment)::

    PIPE     <owner> <pipe> [policy=0|1] [capacity=N]
    STREAM   <owner> <pipe> <stream> [log|data] [level=N] [flags=HEX]
             [console_level=N] [console_flags=HEX]
    EVENT    <owner> <pipe> <stream> <level> <flags-hex> <base64-payload>
    SNAPSHOT <owner> <pipe> <stream> <base64-payload>
    CCTOOL   <cctool configuration arguments>
    TIME     <nanoseconds since epoch>

PIPE and STREAM lines are declarations and run first, wherever they
appear; everything else runs in file order afterwards. Each EVENT advances
the script clock by one millisecond.
"""

from __future__ import annotations

import base64
import binascii
import shlex
from dataclasses import dataclass, field
from typing import Iterable

from .profile import CaptureConfig, parse_cctool_args
from .registry import (
    DATA_STREAM,
    DEFAULT_CAPACITY,
    LOG_STREAM,
    LogEvent,
    PipeDescriptor,
    Registry,
    RegistryError,
    StreamDescriptor,
)

DEFAULT_EPOCH_NS = 1_500_000_000 * 1_000_000_000
EVENT_STEP_NS = 1_000_000


class ScriptError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class _Clock:
    def __init__(self, now: int):
        self.now = now

    def __call__(self) -> int:
        return self.now


@dataclass
class Simulation:
    registry: Registry
    clock: _Clock
    accepted: int = 0
    rejected: int = 0
    reports: list = field(default_factory=list)


def _int(text: str, lineno: int, base: int = 0) -> int:
    try:
        return int(text, base)
    except ValueError:
        raise ScriptError(lineno, f"not an integer: {text!r}") from None


def _options(words, lineno: int, allowed) -> dict:
    out = {}
    for w in words:
        key, sep, value = w.partition("=")
        if not sep or key not in allowed:
            raise ScriptError(lineno, f"unexpected argument {w!r}")
        out[key] = _int(value, lineno, 16 if key.endswith("flags") else 0)
    return out


def _payload(text: str, lineno: int) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError):
        raise ScriptError(lineno, f"bad base64 payload {text!r}") from None


def _declare(sim: Simulation, lineno: int, verb: str, args: list) -> None:
    reg = sim.registry
    if verb == "PIPE":
        if len(args) < 2:
            raise ScriptError(lineno, "PIPE needs <owner> <pipe>")
        opts = _options(args[2:], lineno, {"policy", "capacity"})
        reg.register_pipe(PipeDescriptor(args[0], args[1], opts.get("policy", 0),
                                         opts.get("capacity", DEFAULT_CAPACITY)))
    else:
        if len(args) < 3:
            raise ScriptError(lineno, "STREAM needs <owner> <pipe> <stream>")
        rest = args[3:]
        kind = LOG_STREAM
        if rest and rest[0] in ("log", "data"):
            kind = DATA_STREAM if rest.pop(0) == "data" else LOG_STREAM
        opts = _options(rest, lineno, {"level", "flags", "console_level", "console_flags"})
        reg.register_stream((args[0], args[1]), StreamDescriptor(
            args[2], kind,
            log_level=opts.get("level", 0), log_flags=opts.get("flags", 0),
            console_level=opts.get("console_level", 0), console_flags=opts.get("console_flags", 0),
        ))


def _execute(sim: Simulation, lineno: int, verb: str, args: list) -> None:
    reg = sim.registry
    if verb == "EVENT":
        if len(args) != 6:
            raise ScriptError(lineno, "EVENT needs <owner> <pipe> <stream> <level> <flags-hex> <base64>")
        event = LogEvent(sim.clock.now, _int(args[3], lineno), _int(args[4], lineno, 16),
                         _payload(args[5], lineno))
        sim.clock.now += EVENT_STEP_NS
        if reg.emit_event(args[0], args[1], args[2], event):
            sim.accepted += 1
        else:
            sim.rejected += 1
    elif verb == "SNAPSHOT":
        if len(args) != 4:
            raise ScriptError(lineno, "SNAPSHOT needs <owner> <pipe> <stream> <base64>")
        data = _payload(args[3], lineno)
        reg.set_data_snapshot(args[0], args[1], args[2], lambda data=data: data)
    elif verb == "CCTOOL":
        inv = parse_cctool_args(args)
        if inv.is_capture:
            raise ScriptError(lineno, "capture commands are not allowed in scripts; use the dump command")
        sim.reports.append(reg.apply_config(inv.to_config()))
    elif verb == "TIME":
        if len(args) != 1:
            raise ScriptError(lineno, "TIME needs <ns>")
        sim.clock.now = _int(args[0], lineno)
    else:
        raise ScriptError(lineno, f"unknown directive {verb!r}")


def run_script(lines: Iterable[str], configs: Iterable[CaptureConfig] = (),
               epoch_ns: int = DEFAULT_EPOCH_NS) -> Simulation:
    """Build a registry from declarations, apply ``configs``, then run the rest."""
    clock = _Clock(epoch_ns)
    sim = Simulation(Registry(clock=clock), clock)
    parsed = []
    for lineno, line in enumerate(lines, 1):
        try:
            words = shlex.split(line, comments=True)
        except ValueError as exc:
            raise ScriptError(lineno, str(exc)) from None
        if not words:
            continue
        parsed.append((lineno, words[0].upper(), words[1:]))

    lineno = 0
    try:
        for lineno, verb, args in parsed:
            if verb in ("PIPE", "STREAM"):
                _declare(sim, lineno, verb, args)
        for config in configs:
            sim.reports.append(sim.registry.apply_config(config))
        for lineno, verb, args in parsed:
            if verb not in ("PIPE", "STREAM"):
                _execute(sim, lineno, verb, args)
    except (RegistryError, ValueError) as exc:
        if isinstance(exc, ScriptError):
            raise
        raise ScriptError(lineno, str(exc)) from exc
    return sim


def event_line(owner: str, pipe: str, stream: str, level: int, flags: int, payload: bytes) -> str:
    return f"EVENT {owner} {pipe} {stream} {level} {flags:x} {base64.b64encode(payload).decode()}"


def describe(sim: Simulation, owner_pattern: str = "*", pipe_pattern: str = "*") -> dict:
    pipes = []
    for pdesc, streams in sim.registry.query(owner_pattern, pipe_pattern):
        pipes.append({
            "owner": pdesc.owner,
            "name": pdesc.name,
            "log_policy": pdesc.log_policy,
            "capacity": pdesc.capacity,
            "buffered": len(sim.registry.buffered(pdesc.owner, pdesc.name)),
            "streams": [{
                "name": s.name,
                "kind": s.kind,
                "log_level": s.log_level,
                "log_flags": s.log_flags,
                "console_level": s.console_level,
                "console_flags": s.console_flags,
            } for s in streams],
        })
    return {"accepted": sim.accepted, "rejected": sim.rejected, "clock_ns": sim.clock.now, "pipes": pipes}
