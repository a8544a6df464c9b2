import json

import pytest
from hypothesis import given, settings, strategies as st

from cctrace.dissector import (
    BINARY,
    DEFAULT_TLV_PROBES,
    TEXT_LOG,
    TLV_LIKE,
    DissectedFrame,
    DissectorRegistry,
    DissectorSelector,
    DltOutOfPrivateRange,
    Field,
    TlvConfig,
    dissect,
    emit_wireshark_user_dlt,
    frame_problems,
    heuristic_classify,
    parse_tlv,
    register_dissector,
    render,
    serialize_tlv,
)


def tiles(data, tw, lw, endian):
    """Oracle: does data split exactly into TLVs? Written recursively, not shared."""
    if not data:
        return True
    if len(data) < tw + lw:
        return False
    n = int.from_bytes(data[tw:tw + lw], endian)
    rest = data[tw + lw:]
    return len(rest) >= n and tiles(rest[n:], tw, lw, endian)


def test_parse_tlv_examples():
    assert parse_tlv(b"") == ([], 0)
    items, residue = parse_tlv(bytes.fromhex("0103AABBCC"), TlvConfig(1, 1, "big"))
    assert [(t, v.hex()) for t, v in items] == [(1, "aabbcc")] and residue == 0
    assert parse_tlv(bytes.fromhex("01FFAA")) == ([], 3)


def test_parse_tlv_wider_little_endian():
    data = bytes.fromhex("0200" "0300" "AABBCC" "0500" "0000")
    items, residue = parse_tlv(data, TlvConfig(2, 2, "little"))
    assert [(t, v) for t, v in items] == [(2, b"\xaa\xbb\xcc"), (5, b"")]
    assert residue == 0


def test_probe_set_order():
    assert len(DEFAULT_TLV_PROBES) == 18
    assert DEFAULT_TLV_PROBES[0] == TlvConfig(1, 1, "big")
    assert DEFAULT_TLV_PROBES[1] == TlvConfig(1, 1, "little")
    assert DEFAULT_TLV_PROBES[-1] == TlvConfig(4, 4, "little")


def test_heuristic_examples():
    assert heuristic_classify(b"wl: scan started\n") == TEXT_LOG
    assert heuristic_classify(bytes.fromhex("0103AABBCC0201FF")) == TLV_LIKE
    data = bytes.fromhex("fffe000180 90a0b0".replace(" ", ""))
    assert not any(tiles(data, c.type_width, c.length_width, c.endianness) for c in DEFAULT_TLV_PROBES)
    assert heuristic_classify(data) == BINARY
    assert heuristic_classify(b"") == BINARY


def test_text_threshold():
    assert heuristic_classify(b"a" * 95 + b"\x00" * 5) == TEXT_LOG
    assert heuristic_classify(b"\x00" * 5 + b"a" * 94) != TEXT_LOG
    assert heuristic_classify("température élevée\n".encode()) == TEXT_LOG


@given(st.binary(max_size=40))
@settings(max_examples=300, deadline=None)
def test_classify_agrees_with_tiling_oracle(data):
    verdict = heuristic_classify(data)
    any_tiling = bool(data) and any(tiles(data, c.type_width, c.length_width, c.endianness)
                                    for c in DEFAULT_TLV_PROBES)
    if verdict == TLV_LIKE:
        assert any_tiling
    elif verdict == BINARY:
        assert not any_tiling


def test_dissect_text():
    frame = dissect(DissectorRegistry(), 150, b"wl: scan started\n")
    assert frame.protocol == "cc-logtext" and frame.confidence == "heuristic"
    assert [f.value for f in frame.fields] == ["wl: scan started\n"]
    assert frame_problems(frame) == []


def test_dissect_empty():
    frame = dissect(DissectorRegistry(), 150, b"")
    assert (frame.protocol, frame.fields, frame.residue, frame.confidence) == ("raw", (), (0, 0), "opaque")


def test_dissect_tlv():
    frame = dissect(DissectorRegistry(), 150, bytes.fromhex("0103AABBCC"))
    assert frame.protocol == "cc-tlv"
    (tlv,) = frame.fields
    assert [(c.name, c.value) for c in tlv.children] == [("type", 1), ("length", 3), ("value", b"\xaa\xbb\xcc")]
    assert frame_problems(frame) == []


def test_custom_dissector_dispatch_and_priority():
    reg = DissectorRegistry()
    calls = []

    def make(tag):
        def fn(payload, ctx):
            calls.append(tag)
            return DissectedFrame(tag, payload, (Field("all", 0, len(payload), None),), (len(payload), 0), "exact")
        return fn

    register_dissector(reg, DissectorSelector(150, priority=1), make("low"))
    register_dissector(reg, DissectorSelector(150, priority=2), make("high"))
    assert dissect(reg, 150, b"abc").protocol == "high"
    assert dissect(reg, 1, b"\x00\x01\x02\x03\x04\x05\x06\x07\x08").protocol != "high"


def test_ties_broken_by_registration_order():
    reg = DissectorRegistry()
    reg.register(DissectorSelector(150), lambda p, c: DissectedFrame("first", p, (), (0, len(p)), "exact"))
    reg.register(DissectorSelector(150), lambda p, c: DissectedFrame("second", p, (), (0, len(p)), "exact"))
    assert reg.dissect(150, b"x").protocol == "first"


def test_stream_glob_selector():
    reg = DissectorRegistry()
    reg.register(DissectorSelector(150, "IO80211AWDL*", 5),
                 lambda p, c: DissectedFrame("awdl", p, (), (0, len(p)), "exact"))
    assert reg.dissect(150, b"\x00\xff", "IO80211AWDLPeerManager").protocol == "awdl"
    assert reg.dissect(150, b"\x00\xff", "ControlPath").protocol != "awdl"
    assert reg.dissect(150, b"\x00\xff", None).protocol != "awdl"


def test_declining_raising_or_malformed_dissectors_fall_back():
    reg = DissectorRegistry()
    reg.register(DissectorSelector(150, priority=3), lambda p, c: None)
    reg.register(DissectorSelector(150, priority=2), lambda p, c: 1 / 0)
    reg.register(DissectorSelector(150, priority=1),
                 lambda p, c: DissectedFrame("bad", p, (Field("x", 0, 99),), (0, 0), "exact"))
    frame = reg.dissect(150, b"hello world\n")
    assert frame.protocol == "cc-logtext"


def test_wireshark_lines():
    assert emit_wireshark_user_dlt(150, "corecapture") == '"User 3 (DLT=150)","corecapture","0","","0",""'
    assert emit_wireshark_user_dlt(147, "x") == '"User 0 (DLT=147)","x","0","","0",""'
    with pytest.raises(DltOutOfPrivateRange):
        emit_wireshark_user_dlt(146, "x")
    with pytest.raises(DltOutOfPrivateRange):
        emit_wireshark_user_dlt(163, "x")


def test_render_raw_hexdump():
    frame = dissect(DissectorRegistry(), 150, b"\xde\xad\xbe\xef")
    text = render(frame)
    assert "0000  de ad be ef" in text


def test_render_tlv_json():
    frame = dissect(DissectorRegistry(), 150, bytes.fromhex("0103AABBCC0201FF"))
    doc = json.loads(render(frame, "json"))
    assert doc["schema"] == "cctrace-frame/1"
    assert len(doc["fields"]) == 2
    assert doc["fields"][0]["children"][2]["value"] == "aabbcc"


def test_render_pure():
    a = dissect(DissectorRegistry(), 150, b"x\x00\x01y")
    b = dissect(DissectorRegistry(), 150, b"x\x00\x01y")
    assert render(a) == render(b) and render(a, "json") == render(b, "json")


def test_frame_problems_detects_gaps_and_overlap():
    p = b"abcdef"
    assert frame_problems(DissectedFrame("t", p, (Field("a", 0, 2),), (3, 3))) != []
    assert frame_problems(DissectedFrame("t", p, (Field("a", 0, 4), Field("b", 3, 1)), (4, 2))) != []
    assert frame_problems(DissectedFrame("t", p, (Field("a", 0, 4, children=(Field("c", 3, 2),)),), (4, 2))) != []
    assert frame_problems(DissectedFrame("t", p, (Field("a", 0, 4),), (4, 2))) == []


@given(st.binary(max_size=128))
@settings(max_examples=300, deadline=None)
def test_totality_property(data):
    frame = dissect(DissectorRegistry(), 150, data)
    assert frame.payload == data
    assert frame_problems(frame) == []


@pytest.mark.parametrize("cfg", DEFAULT_TLV_PROBES, ids=str)
def test_tlv_soundness_prefix(cfg):
    data = serialize_tlv([(1, b"ab"), (2, b"")], cfg) + b"\x07"
    items, residue = parse_tlv(data, cfg)
    assert serialize_tlv(items, cfg) == data[:len(data) - residue]
