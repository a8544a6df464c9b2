"""Dissection of private link-type payloads.

The CoreCapture per-record layout is not public, so decoding is a plugin
registry plus heuristics (log text, generic TLV, opaque bytes). Every frame
says how sure it is through ``confidence``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from typing import Callable, NamedTuple, Optional

from .pcap import LINKTYPE_CORECAPTURE, LINKTYPE_USER0, LINKTYPE_USER15, link_type_name

log = logging.getLogger(__name__)

FRAME_SCHEMA = "cctrace-frame/1"

EXACT = "exact"
HEURISTIC = "heuristic"
OPAQUE = "opaque"

TEXT_LOG = "text_log"
TLV_LIKE = "tlv_like"
BINARY = "binary"

PRINTABLE_THRESHOLD = 0.95

_PRINTABLE = frozenset(range(0x20, 0x7F)) | {0x09, 0x0A, 0x0D}


class DltOutOfPrivateRange(ValueError):
    pass


def printable_ratio(data: bytes) -> float:
    """Fraction of printable-or-whitespace bytes.

    Bytes >= 0x80 count as printable only when ``data`` is valid UTF-8.
    """
    if not data:
        return 0.0
    try:
        data.decode("utf-8")
        high_ok = True
    except UnicodeDecodeError:
        high_ok = False
    good = sum(1 for b in data if b in _PRINTABLE or (high_ok and b >= 0x80))
    return good / len(data)


def looks_like_text(data: bytes) -> bool:
    return bool(data) and printable_ratio(data) >= PRINTABLE_THRESHOLD


# -- TLV ------------------------------------------------------------------------

@dataclass(frozen=True)
class TlvConfig:
    type_width: int = 1
    length_width: int = 1
    endianness: str = "big"

    def __post_init__(self):
        if self.type_width not in (1, 2, 4) or self.length_width not in (1, 2, 4):
            raise ValueError("TLV field widths must be 1, 2 or 4 bytes")
        if self.endianness not in ("big", "little"):
            raise ValueError(f"bad endianness {self.endianness!r}")

    @property
    def header_len(self) -> int:
        return self.type_width + self.length_width

    def __str__(self):
        return f"T{self.type_width}L{self.length_width}/{self.endianness}"


# type width, length width, then endianness; first exact tiling wins
DEFAULT_TLV_PROBES = tuple(
    TlvConfig(t, l, e) for t in (1, 2, 4) for l in (1, 2, 4) for e in ("big", "little")
)


class Tlv(NamedTuple):
    type: int
    value: bytes


class TlvParse(NamedTuple):
    items: list
    residue: int  # bytes left unparsed at the tail

    @property
    def exact(self) -> bool:
        return self.residue == 0


def parse_tlv(payload: bytes, config: TlvConfig = TlvConfig()) -> TlvParse:
    """Parse TLVs from the front of ``payload`` until one does not fit."""
    items = []
    pos = 0
    n = len(payload)
    while pos + config.header_len <= n:
        t = int.from_bytes(payload[pos:pos + config.type_width], config.endianness)
        lpos = pos + config.type_width
        length = int.from_bytes(payload[lpos:lpos + config.length_width], config.endianness)
        start = pos + config.header_len
        if start + length > n:
            break
        items.append(Tlv(t, bytes(payload[start:start + length])))
        pos = start + length
    return TlvParse(items, n - pos)


def serialize_tlv(items, config: TlvConfig = TlvConfig()) -> bytes:
    out = bytearray()
    for t, value in items:
        out += t.to_bytes(config.type_width, config.endianness)
        out += len(value).to_bytes(config.length_width, config.endianness)
        out += value
    return bytes(out)


def find_tlv_tiling(payload: bytes, probes=DEFAULT_TLV_PROBES) -> Optional[tuple]:
    """First probe config that parses all of a non-empty ``payload``."""
    if not payload:
        return None
    for cfg in probes:
        parsed = parse_tlv(payload, cfg)
        if parsed.exact:
            return cfg, parsed
    return None


def heuristic_classify(payload: bytes) -> str:
    if looks_like_text(payload):
        return TEXT_LOG
    if find_tlv_tiling(payload) is not None:
        return TLV_LIKE
    return BINARY


# -- frames ---------------------------------------------------------------------

@dataclass(frozen=True)
class Field:
    name: str
    offset: int
    length: int
    value: object = None
    children: tuple = ()

    def to_dict(self) -> dict:
        value = self.value
        if isinstance(value, (bytes, bytearray)):
            value = bytes(value).hex()
        d = {"name": self.name, "offset": self.offset, "length": self.length, "value": value}
        if self.children:
            d["children"] = [c.to_dict() for c in self.children]
        return d


@dataclass(frozen=True)
class DissectedFrame:
    protocol: str
    payload: bytes
    fields: tuple = ()
    residue: tuple = (0, 0)  # (offset, length)
    confidence: str = OPAQUE
    summary: str = ""

    def to_dict(self) -> dict:
        return {
            "schema": FRAME_SCHEMA,
            "protocol": self.protocol,
            "confidence": self.confidence,
            "summary": self.summary,
            "length": len(self.payload),
            "fields": [f.to_dict() for f in self.fields],
            "residue": {"offset": self.residue[0], "length": self.residue[1]},
        }


def raw_frame(payload: bytes) -> DissectedFrame:
    return DissectedFrame("raw", bytes(payload), (), (0, len(payload)), OPAQUE)


def frame_problems(frame: DissectedFrame) -> list:
    """Structural defects of ``frame``; empty when it is well formed.

    Checks that sibling ranges stay inside their parent without overlap and
    that top-level fields plus the residue partition the payload.
    """
    problems = []
    n = len(frame.payload)

    def check(fields, lo, hi, path):
        spans = []
        for f in fields:
            if f.offset < lo or f.length < 0 or f.offset + f.length > hi:
                problems.append(f"{path}{f.name}: range {f.offset}+{f.length} outside [{lo},{hi})")
            spans.append((f.offset, f.offset + f.length, f.name))
            check(f.children, f.offset, f.offset + f.length, f"{path}{f.name}.")
        spans.sort()
        for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
            if b0 < a1:
                problems.append(f"{path}{an} overlaps {bn}")

    check(frame.fields, 0, n, "")
    r_off, r_len = frame.residue
    if r_off < 0 or r_len < 0 or r_off + r_len > n:
        problems.append(f"residue {r_off}+{r_len} outside payload of {n}")
    spans = sorted([(f.offset, f.offset + f.length) for f in frame.fields if f.length]
                   + ([(r_off, r_off + r_len)] if r_len else []))
    pos = 0
    for a, b in spans:
        if a != pos:
            problems.append(f"coverage gap or overlap at {min(a, pos)}")
            break
        pos = b
    else:
        if pos != n:
            problems.append(f"coverage ends at {pos}, payload is {n}")
    if frame.confidence not in (EXACT, HEURISTIC, OPAQUE):
        problems.append(f"bad confidence {frame.confidence!r}")
    return problems


def _text_frame(payload: bytes) -> DissectedFrame:
    text = payload.decode("utf-8", errors="replace")
    return DissectedFrame(
        "cc-logtext", payload,
        (Field("text", 0, len(payload), text),),
        (len(payload), 0), HEURISTIC,
        text.rstrip("\r\n")[:80],
    )


def tlv_frame(payload: bytes, config: TlvConfig, protocol: str = "cc-tlv",
              confidence: str = HEURISTIC) -> DissectedFrame:
    parsed = parse_tlv(payload, config)
    fields = []
    pos = 0
    for i, (t, value) in enumerate(parsed.items):
        tw, lw = config.type_width, config.length_width
        children = (
            Field("type", pos, tw, t),
            Field("length", pos + tw, lw, len(value)),
            Field("value", pos + tw + lw, len(value), value),
        )
        size = tw + lw + len(value)
        fields.append(Field(f"tlv[{i}]", pos, size, None, children))
        pos += size
    return DissectedFrame(protocol, payload, tuple(fields), (pos, len(payload) - pos),
                          confidence, f"{len(fields)} TLVs {config}")


def heuristic_dissect(payload: bytes) -> DissectedFrame:
    payload = bytes(payload)
    if not payload:
        return raw_frame(payload)
    if looks_like_text(payload):
        return _text_frame(payload)
    found = find_tlv_tiling(payload)
    if found is not None:
        return tlv_frame(payload, found[0])
    return raw_frame(payload)


# -- registry -------------------------------------------------------------------

@dataclass(frozen=True)
class DissectorSelector:
    link_type: int = LINKTYPE_CORECAPTURE
    stream_name_glob: Optional[str] = None
    priority: int = 0

    def matches(self, link_type: int, context: Optional[str]) -> bool:
        if link_type != self.link_type:
            return False
        if self.stream_name_glob is None:
            return True
        return context is not None and fnmatchcase(context, self.stream_name_glob)


# (payload, context) -> DissectedFrame, or None to decline
Dissector = Callable[[bytes, Optional[str]], Optional[DissectedFrame]]


@dataclass
class DissectorRegistry:
    _entries: list = field(default_factory=list)

    def register(self, selector: DissectorSelector, dissector: Dissector) -> None:
        self._entries.append((selector, len(self._entries), dissector))

    def candidates(self, link_type: int, context: Optional[str] = None) -> list:
        hits = [e for e in self._entries if e[0].matches(link_type, context)]
        hits.sort(key=lambda e: (-e[0].priority, e[1]))
        return [e[2] for e in hits]

    def dissect(self, link_type: int, payload: bytes, context: Optional[str] = None) -> DissectedFrame:
        """Run the best matching dissector, falling back to heuristics.

        Never raises: a plugin that fails, or returns a malformed frame, is
        treated as declining.
        """
        payload = bytes(payload)
        for fn in self.candidates(link_type, context):
            try:
                frame = fn(payload, context)
            except Exception:
                log.exception("dissector %r failed", fn)
                continue
            if frame is None:
                continue
            if not isinstance(frame, DissectedFrame) or frame.payload != payload or frame_problems(frame):
                log.warning("dissector %r returned a malformed frame; ignoring it", fn)
                continue
            return frame
        return heuristic_dissect(payload)


def register_dissector(registry: DissectorRegistry, selector: DissectorSelector,
                       dissector: Dissector) -> None:
    registry.register(selector, dissector)


def dissect(registry: DissectorRegistry, link_type: int, payload: bytes,
            context: Optional[str] = None) -> DissectedFrame:
    return registry.dissect(link_type, payload, context)


# -- output ---------------------------------------------------------------------

def emit_wireshark_user_dlt(dlt: int = LINKTYPE_CORECAPTURE, protocol: str = "corecapture") -> str:
    """One line for Wireshark's ``user_dlts`` preferences table."""
    if not LINKTYPE_USER0 <= dlt <= LINKTYPE_USER15:
        raise DltOutOfPrivateRange(f"DLT {dlt} is outside the private range 147..162")
    return f'"User {dlt - LINKTYPE_USER0} (DLT={dlt})","{protocol}","0","","0",""'


def hexdump(data: bytes, base: int = 0, indent: str = "") -> list:
    lines = []
    for i in range(0, len(data), 16):
        chunk = data[i:i + 16]
        hexpart = " ".join(f"{b:02x}" for b in chunk)
        text = "".join(chr(b) if 0x20 <= b < 0x7F else "." for b in chunk)
        lines.append(f"{indent}{base + i:04x}  {hexpart:<47}  {text}")
    return lines


def _value_text(value) -> str:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex() or "(empty)"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if value is None:
        return ""
    return str(value)


def render(frame: DissectedFrame, fmt: str = "text", link_type: Optional[int] = None) -> str:
    if fmt == "json":
        d = frame.to_dict()
        if link_type is not None:
            d["link_type"] = link_type
            d["link_type_name"] = link_type_name(link_type)
        return json.dumps(d, sort_keys=True)
    if fmt != "text":
        raise ValueError(f"unknown render format {fmt!r}")

    head = f"{frame.protocol} [{frame.confidence}] {len(frame.payload)} bytes"
    if link_type is not None:
        head += f" {link_type_name(link_type)}"
    if frame.summary:
        head += f": {frame.summary}"
    lines = [head]

    def walk(fields, depth):
        for f in fields:
            val = _value_text(f.value)
            lines.append(f"{'  ' * depth}0x{f.offset:04x}+{f.length} {f.name}" + (f" = {val}" if val else ""))
            walk(f.children, depth + 1)

    walk(frame.fields, 1)
    r_off, r_len = frame.residue
    if r_len:
        lines.append(f"  0x{r_off:04x}+{r_len} residue")
        lines.extend(hexdump(frame.payload[r_off:r_off + r_len], r_off, "    "))
    return "\n".join(lines)
