"""Builders shared by folder, CLI and acceptance tests."""

from cctrace.registry import DATA_STREAM, LogEvent, PipeDescriptor, Registry, StreamDescriptor

BCM = "com.apple.driver.AppleBCMWLANCoreV3.0"
BRCM = "com.apple.driver.AirPort.Brcm4360.0"
IO80211 = "com.apple.iokit.IO80211Family"

DRIVER_PIPES = ["DatapathEvents", "DriverLogs", "FirmwareBusLogs", "FirmwareLogs"]
FAMILY_PIPES = ["AssociationEventHistory", "ControlPath", "IO80211AWDLPeerManager", "OneStats", "IOReporters"]


def full_capture_registry(driver_owner=BCM, pipes=None):
    """Registry with one pipe per known file kind, each holding a couple of events."""
    reg = Registry(clock=lambda: 1_600_000_000 * 10**9)
    layout = [(driver_owner, p) for p in DRIVER_PIPES] + [(IO80211, p) for p in FAMILY_PIPES]
    if pipes is not None:
        layout = [(o, p) for o, p in layout if p in pipes]
    t = 1_599_999_000 * 10**9
    for owner, pipe in layout:
        reg.register_pipe(PipeDescriptor(owner, pipe, 1))
        reg.register_stream((owner, pipe), StreamDescriptor(pipe + "Stream", log_level=5, log_flags=1))
        for i in range(2):
            t += 1_000_123
            reg.emit_event(owner, pipe, pipe + "Stream",
                           LogEvent(t, 1, 1, f"{pipe} message {i}\n".encode()))
    reg.register_pipe(PipeDescriptor(driver_owner, "StateSnapshots", 1))
    reg.register_stream((driver_owner, "StateSnapshots"), StreamDescriptor("SocRAM", kind=DATA_STREAM))
    reg.register_stream((driver_owner, "StateSnapshots"), StreamDescriptor("StateDump", kind=DATA_STREAM))
    reg.set_data_snapshot(driver_owner, "StateSnapshots", "SocRAM", lambda: bytes(range(256)))
    reg.set_data_snapshot(driver_owner, "StateSnapshots", "StateDump", lambda: b"state: idle\n")
    return reg
