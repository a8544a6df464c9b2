"""CoreCapture configuration: property-list profiles and cctool arguments.

Both sources reduce to :class:`CaptureConfig`, which addresses pipes by
``owner -> pipe`` and streams by ``owner -> pipe -> stream``.
"""

from __future__ import annotations

import plistlib
import shlex
import uuid
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1

CORECAPTURE_PAYLOAD = "com.apple.corecapture.configure"
PIPE_KEY = "CCConfigurePipe"
STREAM_KEY = "CCConfigureStream"
CORECAPTURE_DICT = "CoreCapture"
CONSOLE_DICT = "Console"

SIGNED_PROFILE = "signed_profile"
UNSIGNED_PROFILE = "unsigned_profile"
COMMAND_LINE = "command_line"

PROFILE_IDENTIFIER = "org.cctrace.corecapture"
_UUID_NAMESPACE = uuid.UUID("5e0b3c1a-6f8e-4c25-9a7e-0c0ac0de0150")


class ProfileError(Exception):
    pass


class MalformedPlist(ProfileError):
    pass


class NoCoreCapturePayload(UserWarning):
    """The profile parsed, but carries no CoreCapture payload."""


class CctoolArgError(ValueError):
    pass


class UnknownFlag(CctoolArgError):
    pass


class MissingValue(CctoolArgError):
    pass


class MixedCaptureAndConfig(CctoolArgError):
    pass


def _as_uint(value, bits: int, what: str) -> int:
    """Coerce a plist/cctool value; -1 means all ones."""
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, str):
        try:
            value = int(value.strip(), 0)
        except ValueError:
            raise ProfileError(f"{what}: not an integer: {value!r}") from None
    if not isinstance(value, int):
        raise ProfileError(f"{what}: expected integer, got {type(value).__name__}")
    if value == -1:
        return (1 << bits) - 1
    if not 0 <= value < (1 << bits):
        raise ProfileError(f"{what}: {value} does not fit in {bits} unsigned bits")
    return value


@dataclass(frozen=True)
class PipeSetting:
    policy: int

    def __post_init__(self):
        # only "off" and "continuous" have known semantics
        if self.policy not in (0, 1):
            raise ValueError(f"policy must be 0 or 1, got {self.policy}")


@dataclass(frozen=True)
class StreamSetting:
    """Per-stream overrides. ``None`` leaves the registry value alone."""

    log_level: Optional[int] = None
    log_flags: Optional[int] = None
    console_level: Optional[int] = None
    console_flags: Optional[int] = None

    def __post_init__(self):
        for name in ("log_level", "console_level"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("log_flags", "console_flags"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= MASK64:
                raise ValueError(f"{name} must fit in 64 bits")

    def changes(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @property
    def empty(self) -> bool:
        return not self.changes()

    def overlay(self, other: "StreamSetting") -> "StreamSetting":
        """Fields of ``self`` win; gaps are filled from ``other``."""
        merged = dict(other.changes())
        merged.update(self.changes())
        return StreamSetting(**merged)


@dataclass(frozen=True)
class CaptureConfig:
    """Normalized CoreCapture settings.

    Equality ignores ``provenance`` and ``inventory`` so configs from
    different sources compare on their settings alone.
    """

    pipe_settings: dict = field(default_factory=dict)
    stream_settings: dict = field(default_factory=dict)
    provenance: frozenset = field(default=frozenset(), compare=False)
    inventory: tuple = field(default=(), compare=False)

    def __post_init__(self):
        pipes = {
            owner: {p: s for p, s in sorted(inner.items())}
            for owner, inner in sorted(self.pipe_settings.items()) if inner
        }
        streams = {}
        for owner, inner in sorted(self.stream_settings.items()):
            o = {}
            for pipe, sinner in sorted(inner.items()):
                s = {name: st for name, st in sorted(sinner.items()) if not st.empty}
                if s:
                    o[pipe] = s
            if o:
                streams[owner] = o
        object.__setattr__(self, "pipe_settings", pipes)
        object.__setattr__(self, "stream_settings", streams)
        object.__setattr__(self, "provenance", frozenset(self.provenance))

    @property
    def empty(self) -> bool:
        return not self.pipe_settings and not self.stream_settings

    def pipes(self):
        for owner, inner in self.pipe_settings.items():
            for pipe, setting in inner.items():
                yield owner, pipe, setting

    def streams(self):
        for owner, inner in self.stream_settings.items():
            for pipe, sinner in inner.items():
                for stream, setting in sinner.items():
                    yield owner, pipe, stream, setting

    def to_dict(self) -> dict:
        return {
            "pipes": {o: {p: {"policy": s.policy} for p, s in inner.items()}
                      for o, inner in self.pipe_settings.items()},
            "streams": {o: {p: {s: st.changes() for s, st in sinner.items()}
                            for p, sinner in inner.items()}
                        for o, inner in self.stream_settings.items()},
            "provenance": sorted(self.provenance),
            "inventory": list(self.inventory),
        }


def build_config(pipes: Iterable = (), streams: Iterable = (), provenance=()) -> CaptureConfig:
    """Build a config from ``(owner, pipe, policy)`` and
    ``(owner, pipe, stream, StreamSetting)`` tuples."""
    ps: dict = {}
    for owner, pipe, policy in pipes:
        ps.setdefault(owner, {})[pipe] = PipeSetting(policy)
    ss: dict = {}
    for owner, pipe, stream, setting in streams:
        ss.setdefault(owner, {}).setdefault(pipe, {})[stream] = setting
    return CaptureConfig(ps, ss, frozenset(provenance))


# -- profiles -----------------------------------------------------------------

def unwrap_profile(data: bytes) -> tuple[bytes, Optional[tuple[bytes, bytes]]]:
    """Strip a signature envelope from a profile.

    Returns the plist bytes and, for a wrapped profile, the opaque
    ``(prefix, suffix)`` bytes surrounding it. No verification happens.
    """
    stripped = data.lstrip(b"\xef\xbb\xbf \t\r\n")
    if stripped.startswith((b"<?xml", b"<plist", b"<!DOCTYPE", b"bplist")):
        return data, None
    start = data.find(b"<?xml")
    if start < 0:
        start = data.find(b"<plist")
    end = data.rfind(b"</plist>")
    if start < 0 or end < start:
        return data, None
    end += len(b"</plist>")
    return data[start:end], (data[:start], data[end:])


def _stream_setting(node, where: str) -> StreamSetting:
    if not isinstance(node, dict):
        raise ProfileError(f"{where}: expected dict")
    kw = {}
    cc = node.get(CORECAPTURE_DICT, {})
    console = node.get(CONSOLE_DICT, {})
    if not isinstance(cc, dict) or not isinstance(console, dict):
        raise ProfileError(f"{where}: expected dict settings")
    if "LogLevel" in cc:
        kw["log_level"] = _as_uint(cc["LogLevel"], 32, f"{where}/LogLevel")
    if "LogFlags" in cc:
        kw["log_flags"] = _as_uint(cc["LogFlags"], 64, f"{where}/LogFlags")
    if "LogLevel" in console:
        kw["console_level"] = _as_uint(console["LogLevel"], 32, f"{where}/Console/LogLevel")
    if "LogFlags" in console:
        kw["console_flags"] = _as_uint(console["LogFlags"], 64, f"{where}/Console/LogFlags")
    return StreamSetting(**kw)


def _read_payload(payload: dict, pipes: dict, streams: dict) -> None:
    pipe_root = payload.get(PIPE_KEY, {})
    stream_root = payload.get(STREAM_KEY, {})
    if not isinstance(pipe_root, dict) or not isinstance(stream_root, dict):
        raise ProfileError(f"{PIPE_KEY}/{STREAM_KEY} must be dictionaries")
    for owner, inner in pipe_root.items():
        if not isinstance(inner, dict):
            raise ProfileError(f"{PIPE_KEY}/{owner}: expected dict")
        for pipe, node in inner.items():
            if not isinstance(node, dict):
                raise ProfileError(f"{PIPE_KEY}/{owner}/{pipe}: expected dict")
            if "Policy" in node:
                policy = _as_uint(node["Policy"], 32, f"{owner}/{pipe}/Policy")
                try:
                    pipes.setdefault(owner, {})[pipe] = PipeSetting(policy)
                except ValueError as exc:
                    raise ProfileError(f"{owner}/{pipe}: {exc}") from None
    for owner, inner in stream_root.items():
        if not isinstance(inner, dict):
            raise ProfileError(f"{STREAM_KEY}/{owner}: expected dict")
        for pipe, snodes in inner.items():
            if not isinstance(snodes, dict):
                raise ProfileError(f"{STREAM_KEY}/{owner}/{pipe}: expected dict")
            for stream, node in snodes.items():
                setting = _stream_setting(node, f"{owner}/{pipe}/{stream}")
                prev = streams.setdefault(owner, {}).setdefault(pipe, {}).get(stream)
                streams[owner][pipe][stream] = setting if prev is None else setting.overlay(prev)


def parse_profile(data: bytes, provenance: Optional[str] = None) -> CaptureConfig:
    """Extract CoreCapture settings from a configuration profile.

    Accepts a full profile (``PayloadContent`` list), a bare payload
    dictionary, or either wrapped in a signature envelope. Payloads of
    other types are listed in ``inventory`` but not interpreted.
    """
    body, wrapper = unwrap_profile(bytes(data))
    try:
        root = plistlib.loads(body)
    except Exception as exc:
        raise MalformedPlist(f"not a property list: {exc}") from exc
    if not isinstance(root, dict):
        raise MalformedPlist("top-level plist object must be a dict")

    if provenance is None:
        provenance = SIGNED_PROFILE if wrapper is not None else UNSIGNED_PROFILE

    if isinstance(root.get("PayloadContent"), list):
        payloads = root["PayloadContent"]
    else:
        payloads = [root]

    pipes: dict = {}
    streams: dict = {}
    inventory = []
    found = False
    for payload in payloads:
        if not isinstance(payload, dict):
            continue
        ptype = payload.get("PayloadType")
        if ptype is None and (PIPE_KEY in payload or STREAM_KEY in payload):
            ptype = CORECAPTURE_PAYLOAD
        inventory.append(str(ptype) if ptype is not None else "<untyped>")
        if ptype == CORECAPTURE_PAYLOAD:
            found = True
            _read_payload(payload, pipes, streams)
    if not found:
        warnings.warn("profile has no com.apple.corecapture.configure payload", NoCoreCapturePayload,
                      stacklevel=2)
    return CaptureConfig(pipes, streams, frozenset([provenance]), tuple(inventory))


def load_profile(path) -> CaptureConfig:
    with open(path, "rb") as fp:
        return parse_profile(fp.read())


def _config_payload_dicts(config: CaptureConfig) -> tuple[dict, dict]:
    pipe_root = {o: {p: {"Policy": s.policy} for p, s in inner.items()}
                 for o, inner in config.pipe_settings.items()}
    stream_root: dict = {}
    for owner, pipe, stream, st in config.streams():
        node = {}
        cc = {}
        if st.log_flags is not None:
            cc["LogFlags"] = st.log_flags
        if st.log_level is not None:
            cc["LogLevel"] = st.log_level
        if cc:
            node[CORECAPTURE_DICT] = cc
        console = {}
        if st.console_flags is not None:
            console["LogFlags"] = st.console_flags
        if st.console_level is not None:
            console["LogLevel"] = st.console_level
        if console:
            node[CONSOLE_DICT] = console
        stream_root.setdefault(owner, {}).setdefault(pipe, {})[stream] = node
    return pipe_root, stream_root


def generate_profile(config: CaptureConfig, identifier: str = PROFILE_IDENTIFIER,
                     display_name: str = "CoreCapture Logging") -> bytes:
    """Render an unsigned ``.mobileconfig`` with one CoreCapture payload.

    Output is deterministic: keys are sorted and the UUIDs are derived from
    the payload content.
    """
    pipe_root, stream_root = _config_payload_dicts(config)
    payload = {
        "PayloadType": CORECAPTURE_PAYLOAD,
        "PayloadVersion": 1,
        "PayloadIdentifier": f"{identifier}.{CORECAPTURE_PAYLOAD}",
        "PayloadDisplayName": "CoreCapture",
        PIPE_KEY: pipe_root,
        STREAM_KEY: stream_root,
    }
    fingerprint = plistlib.dumps(payload, sort_keys=True)
    payload["PayloadUUID"] = str(uuid.uuid5(_UUID_NAMESPACE, fingerprint.decode()))
    profile = {
        "PayloadContent": [payload],
        "PayloadDisplayName": display_name,
        "PayloadIdentifier": identifier,
        "PayloadType": "Configuration",
        "PayloadUUID": str(uuid.uuid5(_UUID_NAMESPACE, identifier + payload["PayloadUUID"])),
        "PayloadVersion": 1,
    }
    return plistlib.dumps(profile, fmt=plistlib.FMT_XML, sort_keys=True)


def merge_configs(signed: CaptureConfig, unsigned: CaptureConfig) -> CaptureConfig:
    """Union of two configs where ``signed`` wins every conflicting field."""
    pipes: dict = {}
    for owner, pipe, setting in unsigned.pipes():
        pipes.setdefault(owner, {})[pipe] = setting
    for owner, pipe, setting in signed.pipes():
        pipes.setdefault(owner, {})[pipe] = setting
    streams: dict = {}
    for owner, pipe, stream, setting in unsigned.streams():
        streams.setdefault(owner, {}).setdefault(pipe, {})[stream] = setting
    for owner, pipe, stream, setting in signed.streams():
        inner = streams.setdefault(owner, {}).setdefault(pipe, {})
        prev = inner.get(stream)
        inner[stream] = setting if prev is None else setting.overlay(prev)
    return CaptureConfig(
        pipes, streams,
        signed.provenance | unsigned.provenance,
        signed.inventory + tuple(i for i in unsigned.inventory if i not in signed.inventory),
    )


# -- cctool -------------------------------------------------------------------

_VALUE_FLAGS = {
    "-o": "owner",
    "-p": "pipe",
    "-s": "stream",
    "-x": "policy",
    "-l": "log_level",
    "-f": "log_flags",
    "-g": "console_level",
    "-m": "console_flags",
    "-c": "capture_command",
}
_STREAM_FIELDS = ("log_level", "log_flags", "console_level", "console_flags")
_CONFIG_FIELDS = ("policy",) + _STREAM_FIELDS


@dataclass(frozen=True)
class CctoolInvocation:
    owner: str
    pipe: str
    stream: Optional[str] = None
    policy: Optional[int] = None
    log_level: Optional[int] = None
    log_flags: Optional[int] = None
    console_level: Optional[int] = None
    console_flags: Optional[int] = None
    capture_command: Optional[str] = None

    @property
    def is_capture(self) -> bool:
        return self.capture_command is not None

    def to_config(self) -> CaptureConfig:
        if self.is_capture:
            return CaptureConfig(provenance=frozenset([COMMAND_LINE]))
        pipes = []
        if self.policy is not None:
            pipes.append((self.owner, self.pipe, self.policy))
        streams = []
        setting = StreamSetting(self.log_level, self.log_flags, self.console_level, self.console_flags)
        if not setting.empty:
            streams.append((self.owner, self.pipe, self.stream, setting))
        return build_config(pipes, streams, [COMMAND_LINE])


def _parse_number(flag: str, text: str, bits: int) -> int:
    try:
        return _as_uint(text, bits, flag)
    except ProfileError as exc:
        raise CctoolArgError(str(exc)) from None


def parse_cctool_args(args: list) -> CctoolInvocation:
    """Parse cctool-style ``-o OWNER -p PIPE ...`` arguments.

    A value of ``-1`` means all ones: 64 bits for flag masks, 32 bits for
    levels.
    """
    raw: dict = {}
    args = list(args)
    i = 0
    while i < len(args):
        flag = args[i]
        if flag not in _VALUE_FLAGS:
            raise UnknownFlag(f"unknown option {flag!r}")
        if i + 1 >= len(args):
            raise MissingValue(f"option {flag} needs a value")
        raw[_VALUE_FLAGS[flag]] = (flag, args[i + 1])
        i += 2

    for needed, flag in (("owner", "-o"), ("pipe", "-p")):
        if needed not in raw:
            raise MissingValue(f"option {flag} is required")

    kw = {name: raw[name][1] for name in ("owner", "pipe", "stream", "capture_command") if name in raw}
    for name in _CONFIG_FIELDS:
        if name in raw:
            flag, text = raw[name]
            bits = 64 if name.endswith("flags") else 32
            kw[name] = _parse_number(flag, text, bits)

    has_config = any(name in kw for name in _CONFIG_FIELDS)
    if "capture_command" in kw and has_config:
        raise MixedCaptureAndConfig("-c cannot be combined with configuration options")
    if "capture_command" not in kw and not has_config:
        raise MissingValue("nothing to do: give configuration options or -c")
    if any(name in kw for name in _STREAM_FIELDS) and "stream" not in kw:
        raise MissingValue("-l/-f/-g/-m need a stream (-s)")
    if kw.get("policy", 0) not in (0, 1):
        raise CctoolArgError(f"-x must be 0 or 1, got {kw['policy']}")
    return CctoolInvocation(**kw)


def _cctool_words(line: str) -> list:
    words = shlex.split(line, comments=True)
    while words and not words[0].startswith("-"):
        words.pop(0)
    return words


def parse_cctool_line(line: str) -> CctoolInvocation:
    """Parse one command line, ignoring any leading ``sudo cctool`` words."""
    return parse_cctool_args(_cctool_words(line))


def emit_cctool_commands(config: CaptureConfig, prefix: str = "") -> list:
    """One cctool argument line per pipe setting and per stream setting."""
    q = shlex.quote
    lines = []
    owners = sorted(set(config.pipe_settings) | set(config.stream_settings))
    for owner in owners:
        pipe_map = config.pipe_settings.get(owner, {})
        stream_map = config.stream_settings.get(owner, {})
        for pipe in sorted(set(pipe_map) | set(stream_map)):
            if pipe in pipe_map:
                lines.append(f"-o {q(owner)} -p {q(pipe)} -x {pipe_map[pipe].policy}")
            for stream, st in stream_map.get(pipe, {}).items():
                parts = [f"-o {q(owner)} -p {q(pipe)} -s {q(stream)}"]
                for flag, value in (("-l", st.log_level), ("-f", st.log_flags),
                                    ("-g", st.console_level), ("-m", st.console_flags)):
                    if value is not None:
                        parts.append(f"{flag} {value}")
                lines.append(" ".join(parts))
    if prefix:
        lines = [f"{prefix} {line}" for line in lines]
    return lines


def config_from_cctool_lines(lines: Iterable[str]) -> CaptureConfig:
    """Fold cctool lines into one config; later lines override earlier ones.

    Capture commands (``-c``), comments and lines without options (such as
    ``export CCTOOL=...``) are skipped.
    """
    config = CaptureConfig(provenance=frozenset([COMMAND_LINE]))
    for line in lines:
        words = _cctool_words(line)
        if not words:
            continue
        inv = parse_cctool_args(words)
        if not inv.is_capture:
            config = merge_configs(inv.to_config(), config)
    return config
