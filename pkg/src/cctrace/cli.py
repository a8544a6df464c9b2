"""``cctrace`` command line.

Exit codes: 0 success, 1 validation findings of error severity, 2 usage
error, 3 I/O or parse failure.
"""

from __future__ import annotations

import argparse
import contextlib
import importlib
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from .dissector import DissectorRegistry, emit_wireshark_user_dlt, render
from .folder import ERROR, FolderError, finding_counts, infer_platform, materialize_folder, \
    scan_folder, summarize, validate_index
from .pcap import LINKTYPE_CORECAPTURE, PcapError, PcapReader, link_type_name
from .profile import (
    CaptureConfig,
    CctoolArgError,
    ProfileError,
    config_from_cctool_lines,
    emit_cctool_commands,
    generate_profile,
    merge_configs,
    parse_cctool_args,
    parse_profile,
    SIGNED_PROFILE,
)
from .registry import REASON_ERROR, REASON_MANUAL
from .script import ScriptError, describe, run_script

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2
EXIT_FAILURE = 3

NVRAM_COMMANDS = (
    "csrutil enable --without nvram\n"
    "nvram boot-args=debug=0x10000 awdl_log_flags=0xffffffffffffffff "
    "awdl_log_flags_verbose=0xffffffffffffffff awdl_log_flags_config=1 wlan.debug.enable=0xff\n"
)

NVRAM_WARNING = """\
WARNING: these commands partially disable System Integrity Protection and
change the boot arguments stored in NVRAM. A machine configured this way is
easier to attack. Use a dedicated test machine, never a production one.
Run them from the Terminal of macOS Recovery (hold cmd+R while rebooting).
cctrace prints them for reference only and never runs them.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _read_source(path: str) -> CaptureConfig:
    data = Path(path).read_bytes()
    head = data.lstrip()[:64]
    looks_cctool = head.startswith((b"-", b"#", b"sudo", b"cctool", b"$")) or b"<" not in data[:4096]
    if path.endswith((".mobileconfig", ".plist", ".xml")) or not looks_cctool:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return parse_profile(data)
    return config_from_cctool_lines(data.decode("utf-8").splitlines())


def _gather_config(sources, cctool_args) -> CaptureConfig:
    """Merge config sources; signed profiles beat everything else."""
    signed = CaptureConfig()
    rest = CaptureConfig()
    for src in sources:
        cfg = _read_source(src)
        if SIGNED_PROFILE in cfg.provenance:
            signed = merge_configs(signed, cfg)
        else:
            rest = merge_configs(cfg, rest)
    if cctool_args:
        inv = parse_cctool_args(cctool_args)
        if inv.is_capture:
            raise UsageError(f"-c {inv.capture_command} is a capture command; use 'cctrace dump --cctool ...'")
        rest = merge_configs(inv.to_config(), rest)
    if signed.provenance:
        return merge_configs(signed, rest)
    return rest


def _add_sources(p):
    p.add_argument("sources", nargs="*", metavar="SOURCE",
                   help="profile (.mobileconfig/.plist) or text file of cctool lines")


def _build_parser() -> _Parser:
    parser = _Parser(prog="cctrace", description="CoreCapture configuration, capture and trace tools.")
    parser.add_argument("--version", action="version", version=f"cctrace {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("configure", help="print the normalized configuration",
                       description="Parse profiles and/or cctool flags (after --cctool) and print "
                                   "the merged configuration as JSON.")
    _add_sources(p)

    p = sub.add_parser("emit-profile", help="write an unsigned .mobileconfig")
    _add_sources(p)
    p.add_argument("-o", "--output", help="output file (default: stdout)")
    p.add_argument("--identifier", default="org.cctrace.corecapture")

    p = sub.add_parser("emit-cctool", help="print equivalent cctool command lines")
    _add_sources(p)
    p.add_argument("--prefix", default="", help='prepended to each line, e.g. "sudo $CCTOOL"')

    for verb in ("simulate", "dump"):
        p = sub.add_parser(verb, help="run a capture script" if verb == "simulate"
                           else "run a capture script, trigger a dump and write the folder")
        p.add_argument("script", help="script file ('-' for stdin)")
        p.add_argument("--config", action="append", default=[], metavar="SOURCE",
                       help="config source applied after the declarations")
        if verb == "simulate":
            p.add_argument("--json", action="store_true")
        else:
            p.add_argument("--dest", required=True, help="capture folder to create")
            p.add_argument("--owner", default="*", help="owner glob (default *)")
            p.add_argument("--pipe", default="*", help="pipe glob (default *)")
            p.add_argument("--reason", choices=(REASON_MANUAL, REASON_ERROR), default=REASON_MANUAL)

    p = sub.add_parser("scan", help="inventory and validate a capture folder")
    p.add_argument("root")
    p.add_argument("--json", action="store_true")
    p.add_argument("--platform", choices=("ios", "macos"))
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("extract", help="dissect every record of a PCAP file")
    p.add_argument("pcap")
    p.add_argument("--json", action="store_true")
    p.add_argument("--context", help="stream name for dissector selection (default: file stem)")
    p.add_argument("--limit", type=int, help="stop after N records")
    p.add_argument("--plugin", action="append", default=[], metavar="MODULE:FUNC",
                   help="callable taking a DissectorRegistry to register dissectors")

    p = sub.add_parser("wireshark-map", help="print a Wireshark user_dlts table line")
    p.add_argument("--dlt", type=int, default=LINKTYPE_CORECAPTURE)
    p.add_argument("--protocol", default="corecapture")

    sub.add_parser("nvram-help", help="show the macOS boot-args commands (never runs them)",
                   description="Print the boot-args commands that raise driver verbosity on macOS. "
                               "Nothing is executed.")
    return parser


def _split_cctool(argv: list) -> tuple:
    if "--cctool" in argv:
        i = argv.index("--cctool")
        return argv[:i], argv[i + 1:]
    return argv, None


def _read_lines(path: str, stdin) -> list:
    if path == "-":
        return stdin.read().splitlines()
    return Path(path).read_text(encoding="utf-8").splitlines()


def _cmd_configure(args, out, err):
    config = _gather_config(args.sources, args.cctool)
    out.write(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_emit_profile(args, out, err):
    data = generate_profile(_gather_config(args.sources, args.cctool), identifier=args.identifier)
    if args.output:
        Path(args.output).write_bytes(data)
    else:
        out.write(data.decode("utf-8"))
    return EXIT_OK


def _cmd_emit_cctool(args, out, err):
    for line in emit_cctool_commands(_gather_config(args.sources, args.cctool), prefix=args.prefix):
        out.write(line + "\n")
    return EXIT_OK


def _simulate(args, stdin):
    configs = [_read_source(src) for src in args.config]
    return run_script(_read_lines(args.script, stdin), configs)


def _cmd_simulate(args, out, err, stdin):
    sim = _simulate(args, stdin)
    state = describe(sim)
    if args.json:
        out.write(json.dumps(state, indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    out.write(f"accepted {state['accepted']} rejected {state['rejected']}\n")
    for p in state["pipes"]:
        out.write(f"{p['owner']} {p['name']} policy={p['log_policy']} "
                  f"buffered={p['buffered']}/{p['capacity']}\n")
        for s in p["streams"]:
            out.write(f"  {s['name']} {s['kind']} level={s['log_level']} flags=0x{s['log_flags']:x}\n")
    return EXIT_OK


def _cmd_dump(args, out, err, stdin):
    owner, pipe = args.owner, args.pipe
    if args.cctool is not None:
        inv = parse_cctool_args(args.cctool)
        if not inv.is_capture:
            raise UsageError("dump --cctool expects a capture command such as -o '*' -p '*' -c manual_dump")
        owner, pipe = inv.owner, inv.pipe
    sim = _simulate(args, stdin)
    bundle = sim.registry.trigger_dump(owner, pipe, args.reason)
    config = CaptureConfig()
    for src in args.config:
        config = merge_configs(_read_source(src), config)
    index = materialize_folder(bundle, config, args.dest)
    out.write(f"wrote {len(index.entries)} files ({bundle.event_count} events) to {args.dest}\n")
    return EXIT_OK


def _cmd_scan(args, out, err):
    index = scan_folder(args.root, workers=args.workers)
    platform = args.platform or infer_platform(index)
    findings = validate_index(index, platform)
    report = summarize(index, "json" if args.json else "text", findings, platform)
    out.write(report if report.endswith("\n") else report + "\n")
    return EXIT_FINDINGS if finding_counts(findings)[ERROR] else EXIT_OK


def _load_plugin(spec: str, registry: DissectorRegistry):
    module, _, func = spec.partition(":")
    if not func:
        raise UsageError(f"plugin must look like module:function, got {spec!r}")
    getattr(importlib.import_module(module), func)(registry)


def _cmd_extract(args, out, err):
    registry = DissectorRegistry()
    for spec in args.plugin:
        _load_plugin(spec, registry)
    context = args.context or Path(args.pcap).stem
    frames = []
    status = EXIT_OK
    with open(args.pcap, "rb") as fp:
        reader = PcapReader(fp)
        link = reader.header.link_type
        if not args.json:
            out.write(f"# {args.pcap}: link type {link_type_name(link)} ({link}), "
                      f"{reader.header.timestamp_unit} timestamps\n")
        try:
            for i, rec in enumerate(reader):
                if args.limit is not None and i >= args.limit:
                    break
                frame = registry.dissect(link, rec.payload, context)
                ts = reader.timestamp_ns(rec)
                if args.json:
                    d = frame.to_dict()
                    d.update(index=i, timestamp_ns=ts, original_length=rec.original_length)
                    frames.append(d)
                else:
                    out.write(f"#{i} ts={ts} len={rec.captured_length}/{rec.original_length}\n")
                    out.write(render(frame, "text") + "\n")
        except PcapError as exc:
            err.write(f"cctrace: {exc}\n")
            status = EXIT_FAILURE
    if args.json:
        doc = {"schema": "cctrace-frame/1", "file": args.pcap, "link_type": link,
               "link_type_name": link_type_name(link), "frames": frames}
        out.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return status


def _cmd_wireshark_map(args, out, err):
    try:
        out.write(emit_wireshark_user_dlt(args.dlt, args.protocol) + "\n")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return EXIT_OK


def _cmd_nvram_help(args, out, err):
    out.write(NVRAM_WARNING + "\n" + NVRAM_COMMANDS)
    return EXIT_OK


_COMMANDS = {
    "configure": _cmd_configure,
    "emit-profile": _cmd_emit_profile,
    "emit-cctool": _cmd_emit_cctool,
    "scan": _cmd_scan,
    "extract": _cmd_extract,
    "wireshark-map": _cmd_wireshark_map,
    "nvram-help": _cmd_nvram_help,
}
_STDIN_COMMANDS = {"simulate": _cmd_simulate, "dump": _cmd_dump}
_CCTOOL_VERBS = {"configure", "emit-profile", "emit-cctool", "dump"}


def run(argv=None, stdin=None, stdout=None, stderr=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    argv, cctool = _split_cctool(argv)
    parser = _build_parser()
    try:
        with contextlib.redirect_stdout(stdout):
            args = parser.parse_args(argv)
        if cctool is not None and args.verb not in _CCTOOL_VERBS:
            raise UsageError(f"{parser.prog} {args.verb}: --cctool is not accepted here")
        args.cctool = cctool
        if args.verb in _STDIN_COMMANDS:
            return _STDIN_COMMANDS[args.verb](args, stdout, stderr, stdin)
        return _COMMANDS[args.verb](args, stdout, stderr)
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except (UsageError, CctoolArgError) as exc:
        stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except (OSError, PcapError, ProfileError, FolderError, ScriptError, UnicodeDecodeError) as exc:
        stderr.write(f"cctrace: {exc}\n")
        return EXIT_FAILURE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
