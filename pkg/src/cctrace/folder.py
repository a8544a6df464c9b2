"""CoreCapture trace folders: scan, classify, validate, summarize, write.

A capture folder holds a ``Metadata`` directory plus one directory per
owner (driver bundle id) whose files mirror that owner's pipes and streams.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import plistlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Optional

from . import __version__
from .dissector import PRINTABLE_THRESHOLD, printable_ratio
from .pcap import (
    LINKTYPE_CORECAPTURE,
    NANOSECOND,
    PCAP_MAGIC_PREFIXES,
    PcapError,
    PcapGlobalHeader,
    PcapReader,
    PcapRecord,
    link_type_name,
    write_file,
)
from .profile import CaptureConfig, generate_profile
from .registry import DumpBundle

REPORT_SCHEMA = "cctrace-report/1"
HEAD_LEN = 64

PCAP = "PCAP"
TXT = "TXT"
XML = "XML"
BIN = "BIN"
EMPTY = "EMPTY"

IOS = "ios"
MACOS = "macos"

ERROR = "error"
WARNING = "warning"
INFO = "info"
_SEVERITIES = (ERROR, WARNING, INFO)

METADATA = "Metadata"
UNKNOWN = "Unknown"
SNAPSHOT_DIR = "StateSnapshots"


@dataclass(frozen=True)
class KindSpec:
    formats: frozenset
    platforms: frozenset


# File kinds found in CoreCapture folders: expected formats and the platforms
# on which they show up.
KINDS = {
    "DatapathEvents": KindSpec(frozenset({PCAP}), frozenset({IOS})),
    "DriverLogs": KindSpec(frozenset({TXT}), frozenset({IOS, MACOS})),
    "FirmwareBusLogs": KindSpec(frozenset({PCAP}), frozenset({IOS})),
    "FirmwareLogs": KindSpec(frozenset({TXT}), frozenset({IOS})),
    "StateSnapshots": KindSpec(frozenset({TXT, BIN}), frozenset({IOS, MACOS})),
    "AssociationEventHistory": KindSpec(frozenset({XML}), frozenset({IOS, MACOS})),
    "ControlPath": KindSpec(frozenset({PCAP}), frozenset({IOS, MACOS})),
    "IO80211AWDLPeerManager": KindSpec(frozenset({PCAP}), frozenset({IOS, MACOS})),
    "OneStats": KindSpec(frozenset({XML}), frozenset({IOS, MACOS})),
    "IOReporters": KindSpec(frozenset({XML}), frozenset({IOS, MACOS})),
}
# longest first so FirmwareBusLogs is not swallowed by a shorter prefix
_KIND_KEYS = sorted(((k.lower(), k) for k in KINDS), key=lambda kv: -len(kv[0]))

_PLATFORM_OWNER_HINTS = (
    ("applebcmwlancore", IOS),
    ("brcm4360", MACOS),
    ("airport", MACOS),
)


class FolderError(Exception):
    pass


class RootNotFound(FolderError):
    pass


class DestinationNotEmpty(FolderError):
    pass


class WriteFailure(FolderError):
    pass


@dataclass(frozen=True)
class FileKind:
    name: str
    format: str  # sniffed
    expected: frozenset = frozenset()

    @property
    def mismatch(self) -> bool:
        return bool(self.expected) and self.format != EMPTY and self.format not in self.expected


@dataclass(frozen=True)
class PcapStats:
    record_count: int
    link_type: int
    timestamp_unit: str
    first_ns: Optional[int] = None
    last_ns: Optional[int] = None
    truncated: bool = False

    @property
    def link_type_name(self) -> str:
        return link_type_name(self.link_type)


@dataclass(frozen=True)
class Finding:
    severity: str
    code: str
    message: str
    path: Optional[str] = None

    def to_dict(self) -> dict:
        return {"severity": self.severity, "code": self.code, "path": self.path, "message": self.message}


@dataclass(frozen=True)
class Entry:
    path: str  # posix, relative to root
    kind: FileKind
    size: int
    pcap: Optional[PcapStats] = None

    @property
    def verdict(self) -> str:
        if self.kind.format == PCAP and self.pcap is not None and self.pcap.truncated:
            return "PCAP(truncated)"
        return self.kind.format

    def to_dict(self) -> dict:
        d = {
            "path": self.path,
            "kind": self.kind.name,
            "format": self.kind.format,
            "expected": sorted(self.kind.expected),
            "verdict": self.verdict,
            "size": self.size,
            "pcap": None,
        }
        if self.pcap is not None:
            p = self.pcap
            d["pcap"] = {
                "records": p.record_count,
                "link_type": p.link_type,
                "link_type_name": p.link_type_name,
                "timestamp_unit": p.timestamp_unit,
                "first_ns": p.first_ns,
                "last_ns": p.last_ns,
                "truncated": p.truncated,
            }
        return d


@dataclass(frozen=True)
class FolderIndex:
    root: str
    metadata: dict = field(default_factory=dict)
    owners: tuple = ()
    entries: tuple = ()
    findings: tuple = ()

    def entry(self, path: str) -> Entry:
        for e in self.entries:
            if e.path == path:
                return e
        raise KeyError(path)

    def kinds(self) -> set:
        return {e.kind.name for e in self.entries}


# -- classification -------------------------------------------------------------

def _normalize(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch.isalnum())


def kind_for_name(name: str) -> Optional[str]:
    """Known kind whose name prefixes ``name``, ignoring case and separators."""
    norm = _normalize(name)
    for key, kind in _KIND_KEYS:
        if norm.startswith(key):
            return kind
    return None


def sniff_format(head: bytes) -> str:
    if not head:
        return EMPTY
    if head[:4] in PCAP_MAGIC_PREFIXES:
        return PCAP
    stripped = head.lstrip(b"\xef\xbb\xbf \t\r\n")
    if stripped.startswith((b"<?xml", b"<plist", b"<!DOCTYPE")):
        return XML
    # the head may cut a multi-byte UTF-8 sequence; retry without the tail
    ratio = max(printable_ratio(head[:len(head) - cut]) for cut in range(min(4, len(head))))
    if ratio >= PRINTABLE_THRESHOLD:
        return TXT
    return BIN


def classify_file(relative_path: str, head: bytes) -> FileKind:
    """Decide kind (from the path) and format (from the leading bytes).

    The nearest enclosing directory named after a kind wins over the file's
    own stem, so ``StateSnapshots/anything.bin`` is a state snapshot.
    """
    parts = PurePosixPath(str(relative_path).replace(os.sep, "/")).parts
    fmt = sniff_format(bytes(head[:HEAD_LEN]))
    if parts and parts[0] == METADATA:
        return FileKind(METADATA, fmt)
    kind = None
    for directory in reversed(parts[:-1]):
        kind = kind_for_name(directory)
        if kind:
            break
    if kind is None and parts:
        stem = parts[-1]
        if "." in stem.lstrip("."):
            stem = stem.rsplit(".", 1)[0]
        kind = kind_for_name(stem)
    if kind is None:
        return FileKind(UNKNOWN, fmt)
    return FileKind(kind, fmt, KINDS[kind].formats)


# -- scanning -------------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, _dt.datetime):
        return value.isoformat()
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


def _read_metadata_file(path: Path, rel: str) -> dict:
    data = path.read_bytes()
    stem = PurePosixPath(rel).name
    try:
        obj = plistlib.loads(data)
    except Exception:
        obj = None
    if isinstance(obj, dict):
        return {f"{stem}.{k}": _jsonable(v) for k, v in obj.items()}
    if data and sniff_format(data[:HEAD_LEN]) == TXT:
        out = {}
        for line in data.decode("utf-8", errors="replace").splitlines():
            for sep in (":", "="):
                if sep in line:
                    k, v = line.split(sep, 1)
                    if k.strip():
                        out[f"{stem}.{k.strip()}"] = v.strip()
                    break
        if out:
            return out
    return {stem: f"<{len(data)} bytes>"}


def _pcap_stats(path: Path) -> tuple:
    """Returns (stats or None, finding or None)."""
    with open(path, "rb") as fp:
        try:
            reader = PcapReader(fp)
        except PcapError as exc:
            return None, f"unreadable PCAP header: {exc}"
        count = 0
        first = last = None
        problem = None
        try:
            for rec in reader:
                ts = reader.timestamp_ns(rec)
                first = ts if first is None else min(first, ts)
                last = ts if last is None else max(last, ts)
                count += 1
        except PcapError as exc:
            problem = str(exc)
    stats = PcapStats(count, reader.header.link_type, reader.header.timestamp_unit, first, last,
                      truncated=problem is not None)
    return stats, problem


def _scan_file(root: Path, path: Path) -> tuple:
    rel = path.relative_to(root).as_posix()
    findings = []
    try:
        size = path.stat().st_size
        with open(path, "rb") as fp:
            head = fp.read(HEAD_LEN)
    except OSError as exc:
        findings.append(Finding(ERROR, "unreadable", f"cannot read: {exc}", rel))
        return Entry(rel, FileKind(UNKNOWN, BIN), 0), findings, {}

    kind = classify_file(rel, head)
    stats = None
    if kind.format == PCAP:
        try:
            stats, problem = _pcap_stats(path)
        except OSError as exc:
            stats, problem = None, f"cannot read: {exc}"
        if stats is None:
            kind = FileKind(kind.name, BIN, kind.expected)
            findings.append(Finding(ERROR, "pcap-unreadable", problem, rel))
        elif problem:
            findings.append(Finding(ERROR, "pcap-truncated", problem, rel))

    metadata = {}
    if kind.name == METADATA:
        try:
            metadata = _read_metadata_file(path, rel)
        except OSError as exc:
            findings.append(Finding(ERROR, "unreadable", f"cannot read: {exc}", rel))
    return Entry(rel, kind, size, stats), findings, metadata


def scan_folder(root, workers: int = 1) -> FolderIndex:
    """Inventory every file under ``root``.

    Malformed member files become findings; only a missing root raises.
    """
    root = Path(root)
    if not root.is_dir():
        raise RootNotFound(f"no such capture folder: {root}")
    files = sorted((p for p in root.rglob("*") if p.is_file()),
                   key=lambda p: p.relative_to(root).as_posix())
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda p: _scan_file(root, p), files))
    else:
        results = [_scan_file(root, p) for p in files]

    entries = []
    findings = []
    metadata = {}
    for entry, found, meta in results:
        entries.append(entry)
        findings.extend(found)
        metadata.update(meta)

    top_dirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    owners = tuple(d for d in top_dirs if d != METADATA and "." in d)
    if not owners and METADATA not in top_dirs:
        findings.insert(0, Finding(WARNING, "no-owner-folders", "no owner folders found"))
    return FolderIndex(str(root), dict(sorted(metadata.items())), owners, tuple(entries), tuple(findings))


# -- validation -----------------------------------------------------------------

def infer_platform(index: FolderIndex) -> Optional[str]:
    for owner in index.owners:
        low = owner.lower()
        for needle, platform in _PLATFORM_OWNER_HINTS:
            if needle in low:
                return platform
    return None


def validate_index(index: FolderIndex, platform: Optional[str] = None) -> list:
    """Scan findings plus missing-file, format and content checks.

    ``platform`` (``"ios"`` or ``"macos"``) defaults to a guess from owner
    folder names; without one, missing-file checks are skipped.
    """
    if platform is None:
        platform = infer_platform(index)
    elif platform not in (IOS, MACOS):
        raise ValueError(f"platform must be 'ios' or 'macos', not {platform!r}")

    findings = list(index.findings)
    for e in index.entries:
        if e.kind.mismatch:
            findings.append(Finding(
                ERROR, "format-mismatch",
                f"{e.kind.name} should be {'/'.join(sorted(e.kind.expected))}, found {e.kind.format}",
                e.path))
        if e.size == 0:
            findings.append(Finding(INFO, "empty-file", "file is empty", e.path))
        if e.kind.name == UNKNOWN:
            findings.append(Finding(INFO, "unknown-file", "file does not match a known kind", e.path))

    if platform is not None:
        present = index.kinds()
        for kind, spec in KINDS.items():
            if platform in spec.platforms and kind not in present:
                findings.append(Finding(WARNING, "missing-expected",
                                        f"missing expected file {kind} for {platform}"))
    return findings


# -- reporting ------------------------------------------------------------------

def _iso(ns: Optional[int]) -> str:
    if ns is None:
        return "-"
    sec, rem = divmod(ns, 1_000_000_000)
    stamp = _dt.datetime.fromtimestamp(sec, _dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")
    return f"{stamp}.{rem:09d}Z"


def finding_counts(findings) -> dict:
    counts = {s: 0 for s in _SEVERITIES}
    for f in findings:
        counts[f.severity] = counts.get(f.severity, 0) + 1
    return counts


def summarize(index: FolderIndex, fmt: str = "text", findings=None,
              platform: Optional[str] = None) -> str:
    """Deterministic report of ``index``.

    ``findings`` defaults to the scan findings stored on the index.
    """
    findings = list(index.findings if findings is None else findings)
    counts = finding_counts(findings)
    pcaps = [e for e in index.entries if e.pcap is not None]
    if fmt == "json":
        doc = {
            "schema": REPORT_SCHEMA,
            "root": index.root,
            "platform": platform,
            "owners": list(index.owners),
            "metadata": index.metadata,
            "entries": [e.to_dict() for e in index.entries],
            "findings": [f.to_dict() for f in findings],
            "counts": {
                "files": len(index.entries),
                "pcap_files": len(pcaps),
                "pcap_records": sum(e.pcap.record_count for e in pcaps),
                "findings": counts,
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    out = [f"CoreCapture folder: {index.root}"]
    if platform:
        out.append(f"platform: {platform}")
    out.append(f"owners ({len(index.owners)}):")
    out.extend(f"  {o}" for o in index.owners)
    if index.metadata:
        out.append(f"metadata ({len(index.metadata)} keys):")
        out.extend(f"  {k} = {v}" for k, v in index.metadata.items() if not isinstance(v, (dict, list)))
    out.append(f"files ({len(index.entries)}):")
    for e in index.entries:
        out.append(f"  {e.path:<60} {e.kind.name:<24} {e.verdict:<16} {e.size:>10}")
    if pcaps:
        out.append("pcap files:")
        for e in pcaps:
            p = e.pcap
            out.append(f"  {e.path}: {p.record_count} records, {p.link_type_name} ({p.link_type}), "
                       f"{_iso(p.first_ns)} .. {_iso(p.last_ns)}")
    out.append("findings: " + ", ".join(f"{counts[s]} {s}" for s in _SEVERITIES))
    for f in findings:
        where = f" {f.path}:" if f.path else ""
        out.append(f"  [{f.severity}] {f.code}:{where} {f.message}")
    return "\n".join(out) + "\n"


# -- writing --------------------------------------------------------------------

def _safe_name(name: str) -> str:
    cleaned = "".join(ch if ch.isalnum() or ch in "._-" else "_" for ch in name).strip(".")
    return cleaned or "_"


def _log_format(pipe: str) -> str:
    kind = kind_for_name(pipe)
    if kind is None:
        return PCAP
    formats = KINDS[kind].formats
    if PCAP in formats:
        return PCAP
    if TXT in formats:
        return TXT
    return XML


def _event_line(ev) -> str:
    payload = ev.payload
    text = payload.decode("utf-8", errors="replace") if printable_ratio(payload) >= PRINTABLE_THRESHOLD \
        else payload.hex()
    text = text.rstrip("\r\n").replace("\n", "\\n")
    return f"{_iso(ev.timestamp)} seq={ev.sequence} level={ev.level} flags=0x{ev.flags:x} {text}\n"


def _write_events(path: Path, fmt: str, events) -> str:
    if fmt == PCAP:
        snaplen = max([65535] + [len(e.payload) for e in events])
        header = PcapGlobalHeader(LINKTYPE_CORECAPTURE, snaplen, timestamp_unit=NANOSECOND)
        data = write_file(header, [PcapRecord.from_ns(e.timestamp, e.payload) for e in events])
        path = path.with_name(path.name + ".pcap")
    elif fmt == TXT:
        data = "".join(_event_line(e) for e in events).encode("utf-8")
        path = path.with_name(path.name + ".txt")
    else:
        data = plistlib.dumps([
            {"Timestamp": e.timestamp, "Sequence": e.sequence, "Level": e.level,
             "Flags": e.flags, "Payload": e.payload} for e in events
        ], sort_keys=True)
        path = path.with_name(path.name + ".xml")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def materialize_folder(bundle: DumpBundle, config: Optional[CaptureConfig], dest) -> FolderIndex:
    """Write ``bundle`` as a capture folder at ``dest`` and re-scan it.

    Layout: ``Metadata/`` (capture info plist and config snapshot), then per
    owner one file per log stream group named after its pipe (or
    ``<pipe>/<stream>`` when a pipe has several groups) and data stream
    snapshots under ``StateSnapshots/``.
    """
    dest = Path(dest)
    if dest.exists() and (not dest.is_dir() or any(dest.iterdir())):
        raise DestinationNotEmpty(f"{dest} exists and is not empty")
    config = config if config is not None else CaptureConfig()

    groups_per_pipe: dict = {}
    for owner, pipe, stream in bundle.events:
        groups_per_pipe.setdefault((owner, pipe), []).append(stream)

    streams_info = []
    try:
        dest.mkdir(parents=True, exist_ok=True)
        for (owner, pipe, stream), events in sorted(bundle.events.items()):
            base = dest / _safe_name(owner)
            if len(groups_per_pipe[(owner, pipe)]) == 1:
                target = base / _safe_name(pipe)
            else:
                target = base / _safe_name(pipe) / _safe_name(stream)
            written = _write_events(target, _log_format(pipe), events)
            streams_info.append({
                "Owner": owner, "Pipe": pipe, "Stream": stream, "Kind": "log_stream",
                "Events": len(events), "File": written.relative_to(dest).as_posix(),
            })
        for (owner, pipe, stream), snap in sorted(bundle.snapshots.items()):
            ext = ".txt" if snap.payload and printable_ratio(snap.payload) >= PRINTABLE_THRESHOLD else ".bin"
            target = dest / _safe_name(owner) / SNAPSHOT_DIR / f"{_safe_name(pipe)}-{_safe_name(stream)}{ext}"
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(snap.payload)
            streams_info.append({
                "Owner": owner, "Pipe": pipe, "Stream": stream, "Kind": "data_stream",
                "Provided": snap.provided, "Bytes": len(snap.payload),
                "File": target.relative_to(dest).as_posix(),
            })

        sec, rem = divmod(bundle.trigger_time, 1_000_000_000)
        info = {
            "Tool": "cctrace",
            "ToolVersion": __version__,
            "CaptureTime": _dt.datetime.fromtimestamp(sec, _dt.timezone.utc).replace(tzinfo=None),
            "CaptureTimeNs": str(bundle.trigger_time),
            "Reason": bundle.reason,
            "Pipes": [f"{o}/{p}" for o, p in bundle.pipes],
            "Streams": streams_info,
        }
        meta = dest / METADATA
        meta.mkdir(exist_ok=True)
        (meta / "CaptureInfo.plist").write_bytes(plistlib.dumps(info, sort_keys=True))
        (meta / "CaptureConfig.mobileconfig").write_bytes(generate_profile(config))
    except (OSError, ValueError, OverflowError) as exc:
        raise WriteFailure(f"writing {dest}: {exc}") from exc
    return scan_folder(dest)
