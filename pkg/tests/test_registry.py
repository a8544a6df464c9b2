from fnmatch import fnmatch

import pytest
from hypothesis import given, settings, strategies as st

from cctrace.profile import StreamSetting, build_config
from cctrace.registry import (
    DATA_STREAM,
    DuplicatePipe,
    DuplicateStream,
    LogEvent,
    NotADataStream,
    NotALogStream,
    PipeDescriptor,
    Registry,
    StreamDescriptor,
    UnknownPipe,
    UnknownStream,
)

BRCM = "com.apple.driver.AirPort.Brcm4360.0"
BCM = "com.apple.driver.AppleBCMWLANCoreV3.0"
IO80211 = "com.apple.iokit.IO80211Family"


@pytest.fixture
def reg():
    r = Registry(clock=lambda: 10**18)
    r.register_pipe(PipeDescriptor(BRCM, "DriverLogs", 1))
    r.register_stream((BRCM, "DriverLogs"), StreamDescriptor("DriverLogs", log_level=5, log_flags=8388608))
    r.register_pipe(PipeDescriptor(IO80211, "IO80211AWDLPeerManager", 1))
    r.register_stream((IO80211, "IO80211AWDLPeerManager"),
                      StreamDescriptor("bpfIO80211Awdl", log_level=5, log_flags=27358198660246032))
    r.register_pipe(PipeDescriptor(BCM, "FirmwareLogs", 0))
    r.register_stream((BCM, "FirmwareLogs"), StreamDescriptor("Chip_UART"))
    return r


def ev(i, level=0, flags=0):
    return LogEvent(timestamp=i, level=level, flags=flags, payload=f"event {i}".encode())


def test_register_known_pipes(reg):
    assert reg.pipe(BRCM, "DriverLogs").log_policy == 1
    assert reg.stream(BCM, "FirmwareLogs", "Chip_UART").owner == BCM
    with pytest.raises(DuplicatePipe):
        reg.register_pipe(PipeDescriptor(BRCM, "DriverLogs"))


def test_register_stream_errors(reg):
    with pytest.raises(UnknownPipe):
        reg.register_stream(("nobody", "nothing"), StreamDescriptor("x"))
    with pytest.raises(DuplicateStream):
        reg.register_stream((BRCM, "DriverLogs"), StreamDescriptor("DriverLogs"))


def test_descriptor_invariants():
    with pytest.raises(ValueError):
        PipeDescriptor("o", "p", log_policy=2)
    with pytest.raises(ValueError):
        PipeDescriptor("o", "p", capacity=0)
    with pytest.raises(ValueError):
        StreamDescriptor("s", log_flags=1 << 64)


def test_megawifi_levels_accept():
    r = Registry()
    r.register_pipe(PipeDescriptor(BCM, "FirmwareLogs", 1))
    r.register_stream((BCM, "FirmwareLogs"), StreamDescriptor("Chip_UART", log_level=5, log_flags=1))
    assert r.emit_event(BCM, "FirmwareLogs", "Chip_UART", ev(0, level=5, flags=1))
    assert not r.emit_event(BCM, "FirmwareLogs", "Chip_UART", ev(1, level=6, flags=1))
    assert not r.emit_event(BCM, "FirmwareLogs", "Chip_UART", ev(2, level=5, flags=2))
    assert r.emit_event(BCM, "FirmwareLogs", "Chip_UART", ev(3, level=0, flags=0))


def test_policy_off_rejects(reg):
    assert not reg.emit_event(BCM, "FirmwareLogs", "Chip_UART", ev(0))
    assert reg.buffered(BCM, "FirmwareLogs") == []


def test_emit_errors(reg):
    with pytest.raises(UnknownStream):
        reg.emit_event(BRCM, "DriverLogs", "nope", ev(0))
    reg.register_stream((BRCM, "DriverLogs"), StreamDescriptor("RAM", kind=DATA_STREAM))
    with pytest.raises(NotALogStream):
        reg.emit_event(BRCM, "DriverLogs", "RAM", ev(0))
    with pytest.raises(NotADataStream):
        reg.set_data_snapshot(BRCM, "DriverLogs", "DriverLogs", lambda: b"")


def test_capacity_three_keeps_last_three():
    r = Registry()
    r.register_pipe(PipeDescriptor("o", "p", 1, capacity=3))
    r.register_stream(("o", "p"), StreamDescriptor("s", log_level=9))
    sent = [ev(i) for i in range(1, 6)]
    for e in sent:
        assert r.emit_event("o", "p", "s", e)
    # oracle: a plain list truncated from the front
    model = []
    for e in sent:
        model.append(e.timestamp)
        model = model[-3:]
    assert [e.timestamp for e in r.buffered("o", "p")] == model == [3, 4, 5]


def test_snapshot_provider_called_once_per_dump():
    r = Registry()
    r.register_pipe(PipeDescriptor("o", "StateSnapshots", 1))
    r.register_stream(("o", "StateSnapshots"), StreamDescriptor("RAM", kind=DATA_STREAM))
    calls = []

    def provider():
        calls.append(1)
        return bytes(range(16))

    r.set_data_snapshot("o", "StateSnapshots", "RAM", provider)
    assert calls == []
    b1 = r.trigger_dump()
    assert b1.snapshots[("o", "StateSnapshots", "RAM")].payload == bytes(range(16))
    r.trigger_dump()
    assert len(calls) == 2


def test_unprovided_snapshot_is_flagged():
    r = Registry()
    r.register_pipe(PipeDescriptor("o", "p", 1))
    r.register_stream(("o", "p"), StreamDescriptor("d", kind=DATA_STREAM))
    snap = r.trigger_dump().snapshots[("o", "p", "d")]
    assert snap.payload == b"" and not snap.provided


def test_dump_all_then_empty(reg):
    for i in range(3):
        assert reg.emit_event(BRCM, "DriverLogs", "DriverLogs", ev(i, 5, 8388608))
    assert reg.emit_event(IO80211, "IO80211AWDLPeerManager", "bpfIO80211Awdl", ev(9, 1, 16))
    bundle = reg.trigger_dump("*", "*")
    assert bundle.event_count == 4
    assert [e.timestamp for e in bundle.events[(BRCM, "DriverLogs", "DriverLogs")]] == [0, 1, 2]
    assert set(bundle.events) == {(BRCM, "DriverLogs", "DriverLogs"),
                                  (IO80211, "IO80211AWDLPeerManager", "bpfIO80211Awdl")}
    again = reg.trigger_dump("*", "*")
    assert again.empty and again.event_count == 0


def test_dump_glob_matches_iokit_only(reg):
    for o, p, s in [(BRCM, "DriverLogs", "DriverLogs"),
                    (IO80211, "IO80211AWDLPeerManager", "bpfIO80211Awdl")]:
        reg.emit_event(o, p, s, ev(1, 1, 0))
    bundle = reg.trigger_dump("com.apple.iokit.*", "*")
    expected = [(o, p) for (o, p) in [(BRCM, "DriverLogs"), (IO80211, "IO80211AWDLPeerManager"),
                                      (BCM, "FirmwareLogs")] if o.startswith("com.apple.iokit.")]
    assert list(bundle.pipes) == expected
    assert {k[:2] for k in bundle.events} == set(expected)
    # untouched pipe still holds its event
    assert len(reg.buffered(BRCM, "DriverLogs")) == 1


def test_error_reason(reg):
    assert reg.trigger_dump(reason="error").reason == "error"
    with pytest.raises(ValueError):
        reg.trigger_dump(reason="panic")


def test_apply_config(reg):
    report = reg.apply_config(build_config([(BCM, "FirmwareLogs", 1)]))
    assert reg.pipe(BCM, "FirmwareLogs").log_policy == 1
    assert report.applied == [((BCM, "FirmwareLogs"), {"log_policy": 1})]
    assert not reg.apply_config(build_config())


def test_apply_config_unmatched_is_soft(reg):
    before = reg.query()
    report = reg.apply_config(build_config(
        [("com.example.missing", "Nope", 1)],
        [(BCM, "FirmwareLogs", "Missing", StreamSetting(log_level=3))]))
    assert report.applied == []
    assert report.unmatched == [("com.example.missing", "Nope"), (BCM, "FirmwareLogs", "Missing")]
    assert reg.query() == before


def test_query_order_and_read_your_writes(reg):
    assert Registry().query() == []
    owners = [p.owner for p, _ in reg.query()]
    assert owners == sorted(owners)
    assert len(reg.query(BRCM, "*")) == 1
    reg.apply_config(build_config(streams=[(BRCM, "DriverLogs", "DriverLogs", StreamSetting(log_level=7))]))
    (pipe, streams), = reg.query(BRCM, "DriverLogs")
    assert streams[0].log_level == 7
    assert streams[0].log_flags == 8388608


@given(st.lists(st.tuples(st.integers(0, 10), st.integers(0, 15)), max_size=20),
       st.integers(0, 10), st.integers(0, 15), st.integers(0, 5))
@settings(max_examples=200, deadline=None)
def test_filter_monotone_in_level(events, level, mask, bump):
    low = StreamDescriptor("s", log_level=level, log_flags=mask)
    high = StreamDescriptor("s", log_level=level + bump, log_flags=mask)
    for lv, fl in events:
        if low.accepts(lv, fl):
            assert high.accepts(lv, fl)


@given(st.lists(st.one_of(st.tuples(st.just("emit"), st.integers(0, 3)), st.just(("dump",))), max_size=40),
       st.integers(1, 5))
@settings(max_examples=200, deadline=None)
def test_every_accepted_event_dumped_at_most_once(ops, cap):
    r = Registry(clock=lambda: 0)
    r.register_pipe(PipeDescriptor("o", "p", 1, capacity=cap))
    r.register_stream(("o", "p"), StreamDescriptor("s", log_level=2))
    accepted = []
    dumped = []
    for i, op in enumerate(ops):
        if op[0] == "emit":
            if r.emit_event("o", "p", "s", LogEvent(i, level=op[1])):
                accepted.append(i)
        else:
            dumped.extend(e.timestamp for e in r.trigger_dump().pipe_events("o", "p"))
        assert len(r.buffered("o", "p")) <= cap
    dumped.extend(e.timestamp for e in r.trigger_dump().pipe_events("o", "p"))
    assert len(dumped) == len(set(dumped))
    assert set(dumped) <= set(accepted)
    assert dumped == sorted(dumped)


def test_glob_oracle_matches_fnmatch(reg):
    for pattern in ["*", "com.apple.*", "com.apple.driver.*", "*Family", "nothing"]:
        got = [p.owner for p, _ in reg.query(pattern, "*")]
        assert got == sorted(o for o in {BRCM, BCM, IO80211} if fnmatch(o, pattern))
