"""Classic PCAP container reading and writing.

Only the original libpcap format is handled (no pcapng). All four magic
variants are accepted on input; output honours the byte order and timestamp
unit of the header it is given, which default to little-endian microseconds.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Optional, Sequence, Union

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

MAGIC_MICRO = 0xA1B2C3D4
MAGIC_NANO = 0xA1B23C4D

MICROSECOND = "microsecond"
NANOSECOND = "nanosecond"
LITTLE = "little"
BIG = "big"

_UNIT_DIVISOR = {MICROSECOND: 1_000_000, NANOSECOND: 1_000_000_000}
_BYTE_ORDER_PREFIX = {LITTLE: "<", BIG: ">"}

# raw leading 4 bytes -> (byte order, timestamp unit)
_MAGICS = {
    struct.pack("<I", MAGIC_MICRO): (LITTLE, MICROSECOND),
    struct.pack(">I", MAGIC_MICRO): (BIG, MICROSECOND),
    struct.pack("<I", MAGIC_NANO): (LITTLE, NANOSECOND),
    struct.pack(">I", MAGIC_NANO): (BIG, NANOSECOND),
}
PCAP_MAGIC_PREFIXES = frozenset(_MAGICS)

LINKTYPE_USER0 = 147
LINKTYPE_USER15 = 162
LINKTYPE_CORECAPTURE = 150

# Subset of the public tcpdump.org linktype registry.
_LINKTYPE_NAMES = {
    0: "NULL",
    1: "ETHERNET",
    3: "AX25",
    6: "IEEE802_5",
    7: "ARCNET_BSD",
    8: "SLIP",
    9: "PPP",
    10: "FDDI",
    50: "PPP_HDLC",
    51: "PPP_ETHER",
    100: "ATM_RFC1483",
    101: "RAW",
    104: "C_HDLC",
    105: "IEEE802_11",
    107: "FRELAY",
    108: "LOOP",
    113: "LINUX_SLL",
    114: "LTALK",
    117: "PFLOG",
    119: "IEEE802_11_PRISM",
    122: "IP_OVER_FC",
    123: "SUNATM",
    127: "IEEE802_11_RADIOTAP",
    129: "ARCNET_LINUX",
    138: "APPLE_IP_OVER_IEEE1394",
    139: "MTP2_WITH_PHDR",
    140: "MTP2",
    141: "MTP3",
    142: "SCCP",
    143: "DOCSIS",
    144: "LINUX_IRDA",
    163: "IEEE802_11_AVS",
    165: "BACNET_MS_TP",
    166: "PPP_PPPD",
    169: "GPRS_LLC",
    177: "LINUX_LAPD",
    187: "BLUETOOTH_HCI_H4",
    189: "USB_LINUX",
    192: "PPI",
    195: "IEEE802_15_4_WITHFCS",
    201: "BLUETOOTH_HCI_H4_WITH_PHDR",
    215: "IEEE802_15_4_NONASK_PHY",
    220: "USB_LINUX_MMAPPED",
    228: "IPV4",
    229: "IPV6",
    230: "IEEE802_15_4_NOFCS",
    249: "NETLINK",
    251: "BLUETOOTH_LE_LL",
    252: "WIRESHARK_UPPER_PDU",
    256: "BLUETOOTH_LE_LL_WITH_PHDR",
    276: "LINUX_SLL2",
}


class PcapError(Exception):
    """Base class for container errors."""


class UnknownMagic(PcapError):
    pass


class Truncated(PcapError):
    pass


class TruncatedRecord(PcapError):
    """A record header or payload is shorter than declared.

    ``offset`` is the byte offset of the offending record header.
    """

    def __init__(self, offset: int, message: str):
        super().__init__(f"truncated record at offset {offset}: {message}")
        self.offset = offset


class RecordExceedsSnaplen(PcapError):
    pass


def link_type_name(code: int) -> str:
    if LINKTYPE_USER0 <= code <= LINKTYPE_USER15:
        return f"USER{code - LINKTYPE_USER0}"
    try:
        return _LINKTYPE_NAMES[code]
    except KeyError:
        return f"UNKNOWN({code})"


def is_private_link_type(code: int) -> bool:
    return LINKTYPE_USER0 <= code <= LINKTYPE_USER15


@dataclass(frozen=True)
class PcapGlobalHeader:
    link_type: int = LINKTYPE_CORECAPTURE
    snaplen: int = 65535
    byte_order: str = LITTLE
    timestamp_unit: str = MICROSECOND
    version_major: int = 2
    version_minor: int = 4
    thiszone: int = 0
    sigfigs: int = 0

    def __post_init__(self):
        if self.byte_order not in _BYTE_ORDER_PREFIX:
            raise ValueError(f"byte_order must be 'little' or 'big', not {self.byte_order!r}")
        if self.timestamp_unit not in _UNIT_DIVISOR:
            raise ValueError(f"unknown timestamp unit {self.timestamp_unit!r}")
        if not 0 <= self.link_type <= 0xFFFF:
            raise ValueError(f"link type {self.link_type} out of range")

    @property
    def link_type_name(self) -> str:
        return link_type_name(self.link_type)

    @property
    def ticks_per_second(self) -> int:
        return _UNIT_DIVISOR[self.timestamp_unit]

    def pack(self) -> bytes:
        magic = MAGIC_NANO if self.timestamp_unit == NANOSECOND else MAGIC_MICRO
        return struct.pack(
            _BYTE_ORDER_PREFIX[self.byte_order] + "IHHiIII",
            magic,
            self.version_major,
            self.version_minor,
            self.thiszone,
            self.sigfigs,
            self.snaplen,
            self.link_type,
        )

    @classmethod
    def unpack(cls, data: bytes) -> "PcapGlobalHeader":
        if len(data) < GLOBAL_HEADER_LEN:
            raise Truncated(f"need {GLOBAL_HEADER_LEN} header bytes, got {len(data)}")
        try:
            byte_order, unit = _MAGICS[bytes(data[:4])]
        except KeyError:
            raise UnknownMagic(f"unrecognised magic {bytes(data[:4]).hex()}") from None
        _, vmaj, vmin, zone, sigfigs, snaplen, network = struct.unpack(
            _BYTE_ORDER_PREFIX[byte_order] + "IHHiIII", data[:GLOBAL_HEADER_LEN]
        )
        # The upper 16 bits of the network field may carry FCS info; keep the link type only.
        return cls(
            link_type=network & 0xFFFF,
            snaplen=snaplen,
            byte_order=byte_order,
            timestamp_unit=unit,
            version_major=vmaj,
            version_minor=vmin,
            thiszone=zone,
            sigfigs=sigfigs,
        )


@dataclass(frozen=True)
class PcapRecord:
    """One captured frame.

    ``ts_frac`` is in the unit of the containing file (micro- or nanoseconds).
    ``original_length`` defaults to the payload length.
    """

    ts_sec: int
    ts_frac: int
    payload: bytes
    original_length: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "payload", bytes(self.payload))
        if self.original_length is None:
            object.__setattr__(self, "original_length", len(self.payload))
        if self.original_length < len(self.payload):
            raise ValueError(
                f"original_length {self.original_length} < captured length {len(self.payload)}"
            )

    @property
    def captured_length(self) -> int:
        return len(self.payload)

    def timestamp_ns(self, unit: str = MICROSECOND) -> int:
        return self.ts_sec * 1_000_000_000 + self.ts_frac * (1_000_000_000 // _UNIT_DIVISOR[unit])

    def timestamp(self, unit: str = MICROSECOND) -> float:
        return self.ts_sec + self.ts_frac / _UNIT_DIVISOR[unit]

    @classmethod
    def from_ns(cls, timestamp_ns: int, payload: bytes, unit: str = NANOSECOND,
                original_length: Optional[int] = None) -> "PcapRecord":
        sec, rem = divmod(timestamp_ns, 1_000_000_000)
        return cls(sec, rem // (1_000_000_000 // _UNIT_DIVISOR[unit]), payload, original_length)


class PcapReader:
    """Sequential reader over a classic PCAP byte stream.

    The global header is decoded eagerly. Records come from
    :meth:`next_record` (``None`` at end of file) or by iteration. A
    :class:`TruncatedRecord` is raised once for a short trailing record;
    the reader is at end of file afterwards, so records already returned
    stay valid.
    """

    def __init__(self, source: Union[bytes, bytearray, memoryview, BinaryIO]):
        if isinstance(source, (bytes, bytearray, memoryview)):
            source = io.BytesIO(bytes(source))
        self._fp = source
        self.header = PcapGlobalHeader.unpack(self._fp.read(GLOBAL_HEADER_LEN))
        self._record_fmt = _BYTE_ORDER_PREFIX[self.header.byte_order] + "IIII"
        self._offset = GLOBAL_HEADER_LEN
        self._eof = False
        self.records_read = 0

    def next_record(self) -> Optional[PcapRecord]:
        if self._eof:
            return None
        start = self._offset
        hdr = self._fp.read(RECORD_HEADER_LEN)
        if not hdr:
            self._eof = True
            return None
        if len(hdr) < RECORD_HEADER_LEN:
            self._eof = True
            raise TruncatedRecord(start, f"record header has {len(hdr)} of {RECORD_HEADER_LEN} bytes")
        ts_sec, ts_frac, incl_len, orig_len = struct.unpack(self._record_fmt, hdr)
        payload = self._fp.read(incl_len)
        if len(payload) < incl_len:
            self._eof = True
            raise TruncatedRecord(start, f"declared {incl_len} payload bytes, {len(payload)} available")
        self._offset = start + RECORD_HEADER_LEN + incl_len
        self.records_read += 1
        # some writers emit orig_len < incl_len; never let that make the record unreadable
        return PcapRecord(ts_sec, ts_frac, payload, max(orig_len, incl_len))

    def __iter__(self) -> Iterator[PcapRecord]:
        while True:
            rec = self.next_record()
            if rec is None:
                return
            yield rec

    def timestamp_ns(self, record: PcapRecord) -> int:
        return record.timestamp_ns(self.header.timestamp_unit)


def open_reader(source) -> PcapReader:
    return PcapReader(source)


def read_file(path) -> tuple[PcapGlobalHeader, list[PcapRecord]]:
    with open(path, "rb") as fp:
        reader = PcapReader(fp)
        return reader.header, list(reader)


def write_file(header: PcapGlobalHeader, records: Sequence[PcapRecord]) -> bytes:
    """Serialize ``header`` and ``records`` to PCAP bytes."""
    fmt = _BYTE_ORDER_PREFIX[header.byte_order] + "IIII"
    out = [header.pack()]
    for i, rec in enumerate(records):
        if rec.captured_length > header.snaplen:
            raise RecordExceedsSnaplen(
                f"record {i}: captured length {rec.captured_length} > snaplen {header.snaplen}"
            )
        if rec.ts_frac >= header.ticks_per_second:
            raise ValueError(f"record {i}: fractional timestamp {rec.ts_frac} overflows one second")
        out.append(struct.pack(fmt, rec.ts_sec, rec.ts_frac, rec.captured_length, rec.original_length))
        out.append(rec.payload)
    return b"".join(out)


def save_file(path, header: PcapGlobalHeader, records: Sequence[PcapRecord]) -> None:
    data = write_file(header, records)
    with open(path, "wb") as fp:
        fp.write(data)
