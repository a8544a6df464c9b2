"""Pipes, streams and the deferred capture engine.

Streams feed events into their pipe's bounded buffer. Nothing is written
anywhere until :meth:`Registry.trigger_dump` drains the matching pipes into
a :class:`DumpBundle`, which :mod:`cctrace.folder` can materialize on disk.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from fnmatch import fnmatchcase
from typing import TYPE_CHECKING, Callable, Optional

if TYPE_CHECKING:
    from .profile import CaptureConfig

POLICY_OFF = 0
POLICY_CONTINUOUS = 1

LOG_STREAM = "log_stream"
DATA_STREAM = "data_stream"

REASON_MANUAL = "manual"
REASON_ERROR = "error"

DEFAULT_CAPACITY = 4096
MASK64 = (1 << 64) - 1


class RegistryError(Exception):
    pass


class DuplicatePipe(RegistryError):
    pass


class DuplicateStream(RegistryError):
    pass


class UnknownPipe(RegistryError):
    pass


class UnknownStream(RegistryError):
    pass


class NotALogStream(RegistryError):
    pass


class NotADataStream(RegistryError):
    pass


PipeId = tuple  # (owner, pipe name)
StreamId = tuple  # (owner, pipe name, stream name)


@dataclass(frozen=True)
class PipeDescriptor:
    owner: str
    name: str
    log_policy: int = POLICY_OFF
    capacity: int = DEFAULT_CAPACITY

    def __post_init__(self):
        if self.log_policy not in (POLICY_OFF, POLICY_CONTINUOUS):
            raise ValueError(f"log_policy must be 0 or 1, got {self.log_policy}")
        if self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")

    @property
    def id(self) -> PipeId:
        return (self.owner, self.name)


@dataclass(frozen=True)
class StreamDescriptor:
    """A stream under a pipe.

    ``owner`` and ``pipe`` are filled in by :meth:`Registry.register_stream`.
    Console settings are tracked but do not gate what reaches the pipe.
    """

    name: str
    kind: str = LOG_STREAM
    log_level: int = 0
    log_flags: int = 0
    console_level: int = 0
    console_flags: int = 0
    owner: str = ""
    pipe: str = ""

    def __post_init__(self):
        if self.kind not in (LOG_STREAM, DATA_STREAM):
            raise ValueError(f"unknown stream kind {self.kind!r}")
        for attr in ("log_level", "console_level"):
            if getattr(self, attr) < 0:
                raise ValueError(f"{attr} must be non-negative")
        for attr in ("log_flags", "console_flags"):
            if not 0 <= getattr(self, attr) <= MASK64:
                raise ValueError(f"{attr} must fit in 64 bits")

    @property
    def id(self) -> StreamId:
        return (self.owner, self.pipe, self.name)

    def accepts(self, level: int, flags: int) -> bool:
        if level > self.log_level:
            return False
        return flags == 0 or (flags & self.log_flags) != 0


@dataclass(frozen=True)
class LogEvent:
    timestamp: int  # ns since epoch
    level: int = 0
    flags: int = 0
    payload: bytes = b""
    sequence: Optional[int] = None


@dataclass(frozen=True)
class Snapshot:
    payload: bytes = b""
    provided: bool = True


@dataclass(frozen=True)
class DumpBundle:
    reason: str
    trigger_time: int
    events: dict = field(default_factory=dict)  # StreamId -> tuple[LogEvent, ...]
    snapshots: dict = field(default_factory=dict)  # StreamId -> Snapshot
    pipes: tuple = ()  # PipeIds that matched the trigger patterns

    @property
    def event_count(self) -> int:
        return sum(len(v) for v in self.events.values())

    @property
    def empty(self) -> bool:
        return not self.events and not self.snapshots

    def pipe_events(self, owner: str, pipe: str) -> list[LogEvent]:
        """All events of one pipe in acceptance order."""
        out = [e for (o, p, _), evs in self.events.items() if (o, p) == (owner, pipe) for e in evs]
        return sorted(out, key=lambda e: e.sequence)


@dataclass
class ChangeReport:
    applied: list = field(default_factory=list)  # (target id, {setting: value})
    unmatched: list = field(default_factory=list)  # target ids that matched nothing

    def __bool__(self):
        return bool(self.applied or self.unmatched)


class _PipeState:
    def __init__(self, descriptor: PipeDescriptor):
        self.descriptor = descriptor
        self.buffer: deque = deque(maxlen=descriptor.capacity)
        self.streams: dict[str, StreamDescriptor] = {}
        self.providers: dict[str, Callable[[], bytes]] = {}
        self.next_sequence = 0


class Registry:
    """In-memory mirror of the CoreCapture pipes and streams.

    Mutations are serialized by an internal lock; descriptors handed out by
    :meth:`query` are immutable snapshots.
    """

    def __init__(self, clock: Callable[[], int] = time.time_ns):
        self._pipes: dict[PipeId, _PipeState] = {}
        self._lock = threading.RLock()
        self._clock = clock

    def register_pipe(self, descriptor: PipeDescriptor) -> PipeId:
        with self._lock:
            if descriptor.id in self._pipes:
                raise DuplicatePipe(f"pipe {descriptor.owner}/{descriptor.name} already registered")
            self._pipes[descriptor.id] = _PipeState(descriptor)
        return descriptor.id

    def register_stream(self, pipe_id: PipeId, descriptor: StreamDescriptor) -> StreamId:
        with self._lock:
            state = self._pipe(pipe_id)
            if descriptor.name in state.streams:
                raise DuplicateStream(f"stream {descriptor.name} already registered under {pipe_id}")
            descriptor = replace(descriptor, owner=pipe_id[0], pipe=pipe_id[1])
            state.streams[descriptor.name] = descriptor
        return descriptor.id

    def _pipe(self, pipe_id: PipeId) -> _PipeState:
        try:
            return self._pipes[tuple(pipe_id)]
        except KeyError:
            raise UnknownPipe(f"no pipe {pipe_id[0]}/{pipe_id[1]}") from None

    def _stream(self, owner: str, pipe: str, stream: str) -> tuple[_PipeState, StreamDescriptor]:
        state = self._pipes.get((owner, pipe))
        if state is None or stream not in state.streams:
            raise UnknownStream(f"no stream {owner}/{pipe}/{stream}")
        return state, state.streams[stream]

    def pipe(self, owner: str, name: str) -> PipeDescriptor:
        return self._pipe((owner, name)).descriptor

    def stream(self, owner: str, pipe: str, name: str) -> StreamDescriptor:
        return self._stream(owner, pipe, name)[1]

    def buffered(self, owner: str, pipe: str) -> list[LogEvent]:
        with self._lock:
            return [ev for _, ev in self._pipe((owner, pipe)).buffer]

    def apply_config(self, config: "CaptureConfig") -> ChangeReport:
        """Push pipe policies and stream levels/flags from ``config``.

        Owner, pipe and stream names in the config are matched as globs.
        Targets that match nothing are reported, never raised.
        """
        report = ChangeReport()
        with self._lock:
            for owner, pipes in sorted(config.pipe_settings.items()):
                for pipe_name, setting in sorted(pipes.items()):
                    hits = [s for pid, s in sorted(self._pipes.items())
                            if fnmatchcase(pid[0], owner) and fnmatchcase(pid[1], pipe_name)]
                    if not hits:
                        report.unmatched.append((owner, pipe_name))
                    for state in hits:
                        state.descriptor = replace(state.descriptor, log_policy=setting.policy)
                        report.applied.append((state.descriptor.id, {"log_policy": setting.policy}))

            for owner, pipes in sorted(config.stream_settings.items()):
                for pipe_name, streams in sorted(pipes.items()):
                    for stream_name, setting in sorted(streams.items()):
                        changes = setting.changes()
                        matched = False
                        for pid, state in sorted(self._pipes.items()):
                            if not (fnmatchcase(pid[0], owner) and fnmatchcase(pid[1], pipe_name)):
                                continue
                            for sname, sdesc in sorted(state.streams.items()):
                                if fnmatchcase(sname, stream_name):
                                    matched = True
                                    state.streams[sname] = replace(sdesc, **changes)
                                    report.applied.append((sdesc.id, dict(changes)))
                        if not matched:
                            report.unmatched.append((owner, pipe_name, stream_name))
        return report

    def emit_event(self, owner: str, pipe: str, stream: str, event: LogEvent) -> bool:
        """Offer ``event`` to a log stream; returns whether the pipe kept it."""
        with self._lock:
            state, sdesc = self._stream(owner, pipe, stream)
            if sdesc.kind != LOG_STREAM:
                raise NotALogStream(f"{owner}/{pipe}/{stream} is a data stream")
            if state.descriptor.log_policy != POLICY_CONTINUOUS:
                return False
            if not sdesc.accepts(event.level, event.flags):
                return False
            # (stream name, event); deque maxlen evicts the oldest entry
            state.buffer.append((stream, replace(event, sequence=state.next_sequence)))
            state.next_sequence += 1
            return True

    def set_data_snapshot(self, owner: str, pipe: str, stream: str,
                          provider: Callable[[], bytes]) -> None:
        with self._lock:
            state, sdesc = self._stream(owner, pipe, stream)
            if sdesc.kind != DATA_STREAM:
                raise NotADataStream(f"{owner}/{pipe}/{stream} is a log stream")
            state.providers[stream] = provider

    def trigger_dump(self, owner_pattern: str = "*", pipe_pattern: str = "*",
                     reason: str = REASON_MANUAL, trigger_time: Optional[int] = None) -> DumpBundle:
        """Drain every pipe matching both glob patterns into a bundle.

        Data stream providers are called here, once per matching stream.
        """
        if reason not in (REASON_MANUAL, REASON_ERROR):
            raise ValueError(f"unknown dump reason {reason!r}")
        with self._lock:
            if trigger_time is None:
                trigger_time = self._clock()
            events: dict = {}
            snapshots: dict = {}
            matched = []
            for pid, state in sorted(self._pipes.items()):
                if not (fnmatchcase(pid[0], owner_pattern) and fnmatchcase(pid[1], pipe_pattern)):
                    continue
                matched.append(pid)
                for stream_name, ev in state.buffer:
                    events.setdefault(pid + (stream_name,), []).append(ev)
                state.buffer.clear()
                for sname, sdesc in sorted(state.streams.items()):
                    if sdesc.kind != DATA_STREAM:
                        continue
                    provider = state.providers.get(sname)
                    if provider is None:
                        snapshots[sdesc.id] = Snapshot(b"", provided=False)
                    else:
                        snapshots[sdesc.id] = Snapshot(bytes(provider()), provided=True)
            return DumpBundle(
                reason=reason,
                trigger_time=trigger_time,
                events={k: tuple(v) for k, v in events.items()},
                snapshots=snapshots,
                pipes=tuple(matched),
            )

    def query(self, owner_pattern: str = "*", pipe_pattern: str = "*") -> list:
        """``[(PipeDescriptor, [StreamDescriptor, ...]), ...]`` in name order."""
        with self._lock:
            return [
                (state.descriptor, [state.streams[s] for s in sorted(state.streams)])
                for pid, state in sorted(self._pipes.items())
                if fnmatchcase(pid[0], owner_pattern) and fnmatchcase(pid[1], pipe_pattern)
            ]

    def __len__(self):
        return len(self._pipes)
