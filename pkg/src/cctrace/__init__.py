"""Tools for Apple CoreCapture logging: configuration, capture simulation,
trace folder inspection and dissection of DLT 150 PCAP frames."""

__version__ = "0.1.0"

from .pcap import (  # noqa: E402
    PcapGlobalHeader,
    PcapReader,
    PcapRecord,
    link_type_name,
    open_reader,
    write_file,
)
from .registry import (  # noqa: E402
    DumpBundle,
    LogEvent,
    PipeDescriptor,
    Registry,
    StreamDescriptor,
)
from .profile import (  # noqa: E402
    CaptureConfig,
    CctoolInvocation,
    emit_cctool_commands,
    generate_profile,
    merge_configs,
    parse_cctool_args,
    parse_profile,
)
from .dissector import (  # noqa: E402
    DissectedFrame,
    DissectorRegistry,
    DissectorSelector,
    TlvConfig,
    emit_wireshark_user_dlt,
    heuristic_classify,
    parse_tlv,
    render,
)
from .folder import (  # noqa: E402
    FolderIndex,
    classify_file,
    materialize_folder,
    scan_folder,
    summarize,
    validate_index,
)

__all__ = [
    "PcapGlobalHeader", "PcapReader", "PcapRecord", "link_type_name", "open_reader", "write_file",
    "DumpBundle", "LogEvent", "PipeDescriptor", "Registry", "StreamDescriptor",
    "CaptureConfig", "CctoolInvocation", "emit_cctool_commands", "generate_profile", "merge_configs",
    "parse_cctool_args", "parse_profile",
    "DissectedFrame", "DissectorRegistry", "DissectorSelector", "TlvConfig", "emit_wireshark_user_dlt",
    "heuristic_classify", "parse_tlv", "render",
    "FolderIndex", "classify_file", "materialize_folder", "scan_folder", "summarize", "validate_index",
]
