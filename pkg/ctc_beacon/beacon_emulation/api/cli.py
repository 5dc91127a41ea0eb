# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
Command-line front end

Subcommands:
    encode     identity JSON -> packet hex JSON
    emulate    packet -> waveform frames (JSON container or float32 I/Q files)
    decode     waveform frames -> decode result for one sampling draw
    prr        Monte Carlo packet reception ratio, one CSV row
    stability  received packets per second over a broadcast run
    channels   BLE/WiFi channel plan and RSSI range tables
    attack     impersonation scenario -> report CSVs and CDF data

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ctc_beacon import __version__
from ctc_beacon.beacon_emulation.api.validators import validate_identity, validate_prr_options, validate_scenario
from ctc_beacon.beacon_emulation.attack_sim import ScenarioMode, run_scenario
from ctc_beacon.beacon_emulation.ble_link import (
	ADVERTISING_CHANNELS,
	CHANNEL_FREQUENCY_MHZ,
	canonical_packet,
	default_identity,
	packet_from_json,
	packet_to_json,
)
from ctc_beacon.beacon_emulation.emulation import (
	QAM_ORDERS,
	WINDOW_MODES,
	EmulationConfig,
	Variant,
	emulate_packet,
	frames_from_json,
	frames_to_json,
)
from ctc_beacon.beacon_emulation.exceptions import USAGE_ERRORS, ValidationError
from ctc_beacon.beacon_emulation.radio_env import ChannelPlan, PathLossModel, SourceKind, rssi_range_report
from ctc_beacon.beacon_emulation.receiver import (
	PRR_CSV_HEADER,
	DecodeMode,
	DecodeReference,
	SamplingContext,
	decode_frames,
	estimate_prr,
	prr_csv_row,
	stability_trace,
)
from ctc_beacon.beacon_emulation.utils import (
	configure_logging,
	format_float,
	get_settings,
	log_error,
	logger,
	read_json,
	rows_to_csv,
	write_text,
)
from ctc_beacon.config import DEFAULT_SCENARIO

STABILITY_CSV_HEADER = ("variant", "qam_order", "repeat", "mean", "cv", "counts")
CHANNEL_CSV_HEADER = ("ble_channel", "ble_mhz", "wifi_channel", "overlap_mhz", "subcarrier_offset")
RSSI_CSV_HEADER = ("true_power_dbm", "distance_m", "mean_rss_dbm")


class UsageError(ValidationError):
	"""Bad command-line input detected after parsing"""


# ==================== INPUT HELPERS ====================


def _emit(text, out=None):
	if out:
		path = write_text(out, text)
		logger("cli").info(f"Wrote {path}")
	else:
		sys.stdout.write(text)


def _load_json(path, what):
	path = Path(path)
	if not path.is_file():
		raise UsageError(f"{what} file not found: {path}")
	return read_json(path)


def _load_identity(path):
	if path is None:
		return default_identity()
	result = validate_identity(_load_json(path, "Identity"))
	if not result["valid"]:
		raise UsageError("; ".join(result["errors"]))
	for warning in result["warnings"]:
		logger("cli").warning(warning)
	return result["identity"]


def _load_packet(args):
	if getattr(args, "packet", None):
		return packet_from_json(_load_json(args.packet, "Packet"))
	return canonical_packet(_load_identity(getattr(args, "identity", None)), args.channel)


def _qam(value):
	if value is None:
		return get_settings().qam_order
	return None if value == "off" else int(value)


def _emulation_config(args, channel=None):
	kwargs = {"variant": Variant(args.variant), "qam_order": _qam(args.qam)}
	if getattr(args, "window", None):
		kwargs["window_mode"] = args.window
	if getattr(args, "scale", None) is not None:
		kwargs["constellation_scale"] = args.scale
	channel = getattr(args, "channel", None) if channel is None else channel
	if channel is not None:
		kwargs["ble_channel"] = channel
	return EmulationConfig(**kwargs)


def _log_resolved(command, seed, **config):
	logger("cli").info(f"{command}: seed={seed} config={json.dumps(config, sort_keys=True, default=str)}")


# ==================== SUBCOMMANDS ====================


def cmd_encode(args):
	"""Identity JSON -> packet hex JSON"""
	packet = _load_packet(args)
	_log_resolved("encode", args.seed, channel=packet.channel_index, bits=packet.bit_count)
	_emit(json.dumps(packet_to_json(packet), indent=1, sort_keys=True) + "\n", args.out)
	return 0


def cmd_emulate(args):
	"""Packet -> frames; float32 output writes one <role>.f32 file per frame into --out"""
	packet = _load_packet(args)
	config = _emulation_config(args, packet.channel_index)
	_log_resolved("emulate", args.seed, **config.to_json())
	frames = emulate_packet(packet, config)

	if args.format == "f32":
		if not args.out:
			raise UsageError("--format f32 needs --out DIR")
		out_dir = Path(args.out)
		out_dir.mkdir(parents=True, exist_ok=True)
		for frame in frames:
			path = out_dir / f"{frame.role.value}.f32"
			path.write_bytes(frame.to_float32())
			logger("cli").info(f"Wrote {path} ({frame.samples.size} samples, evm={frame.evm:.4f})")
		return 0

	_emit(frames_to_json(frames) + "\n", args.out)
	return 0


def cmd_decode(args):
	"""Decode emulated frames for one (offset, mode) draw"""
	path = Path(args.frames)
	if not path.is_file():
		raise UsageError(f"Frames file not found: {path}")
	frames = frames_from_json(path.read_text(encoding="utf-8"))
	if not frames:
		raise UsageError("Frame container is empty")

	packet = _load_packet(args)
	ctx = SamplingContext(args.offset, DecodeMode(args.mode), args.snr, args.seed)
	_log_resolved("decode", args.seed, offset_ns=ctx.offset_ns, mode=ctx.mode.value, snr_db=args.snr)

	result = decode_frames(frames, ctx, DecodeReference.for_packet(packet))
	summary = {
		"frames": [f.role.value for f in frames],
		"offset_ns": ctx.offset_ns,
		"mode": ctx.mode.value,
		"segment": ctx.segment,
		"packet_ok": bool(result.packet_ok),
		"bit_errors": list(result.per_bit_errors),
	}
	_emit(json.dumps(summary, sort_keys=True) + "\n", args.out)
	return 0


def cmd_prr(args):
	"""One PRR estimate as a CSV row (with header unless --no-header)"""
	check = validate_prr_options(args.variant, args.qam or "off", args.trials, args.snr)
	if not check["valid"]:
		raise UsageError("; ".join(check["errors"]))
	for warning in check["warnings"]:
		logger("cli").warning(warning)

	seed = args.seed or 0
	config = _emulation_config(args)
	_log_resolved("prr", seed, trials=args.trials, snr_db=args.snr, jobs=args.jobs, **config.to_json())
	estimate = estimate_prr(
		canonical_packet(channel_index=config.ble_channel),
		config,
		args.trials,
		seed=seed,
		snr_db=args.snr,
		jobs=args.jobs,
		block_size=args.block_size,
	)
	text = rows_to_csv(PRR_CSV_HEADER, [prr_csv_row(estimate)])
	if args.no_header:
		text = text.split("\n", 1)[1]
	_emit(text, args.out)
	return 0


def cmd_stability(args):
	"""Per-second received counts over --duration seconds, one row per repeat"""
	if args.repeats < 1:
		raise UsageError("--repeats must be >= 1")
	seed = args.seed or 0
	config = _emulation_config(args)
	_log_resolved("stability", seed, duration_s=args.duration, interval_s=args.interval, **config.to_json())

	packet = canonical_packet(channel_index=config.ble_channel)
	seeds = np.random.SeedSequence(seed).generate_state(args.repeats)
	rows = []
	for repeat, repeat_seed in enumerate(seeds):
		trace = stability_trace(
			packet, config, int(repeat_seed), args.interval, args.duration, args.snr, args.jobs
		)
		rows.append(
			(
				config.variant.value,
				"off" if config.qam_order is None else config.qam_order,
				repeat,
				format_float(trace.mean, 3),
				format_float(trace.cv),
				";".join(str(c) for c in trace.counts),
			)
		)
	_emit(rows_to_csv(STABILITY_CSV_HEADER, rows), args.out)
	return 0


def cmd_channels(args):
	"""Channel plan table, or an RSSI range table with --rssi"""
	if args.rssi:
		model = PathLossModel()
		distances = args.distances or [0.5, 1, 2, 5, 10, 20, 50]
		levels = args.levels or [-80, -70, -64, -58, -52, -46, -40]
		report = rssi_range_report(SourceKind(args.rssi), distances, levels, model)
		_log_resolved("channels", args.seed, kind=args.rssi, **model.to_json())
		rows = [(format_float(p, 1), format_float(d, 3), format_float(r, 3)) for p, d, r in report.rows()]
		_emit(rows_to_csv(RSSI_CSV_HEADER, rows), args.out)
		logger("cli").info(f"RSS range {report.minimum:.1f} .. {report.maximum:.1f} dBm")
		return 0

	plan = ChannelPlan.derive() if args.derive else ChannelPlan.default()
	_log_resolved("channels", args.seed, mapping=plan.mapping)
	rows = []
	for ble_channel in ADVERTISING_CHANNELS:
		wifi = plan.wifi_channel(ble_channel)
		rows.append(
			(
				ble_channel,
				CHANNEL_FREQUENCY_MHZ[ble_channel],
				"none" if wifi is None else wifi,
				format_float(0.0 if wifi is None else ChannelPlan.overlap_mhz(ble_channel, wifi), 3),
				"none" if wifi is None else plan.subcarrier_offset(ble_channel),
			)
		)
	_emit(rows_to_csv(CHANNEL_CSV_HEADER, rows), args.out)
	logger("cli").info(f"Scan coverage of a WiFi source: {plan.coverage():.4f}")
	return 0


def cmd_attack(args):
	"""Run one attack scenario and write its report files into --out"""
	path = Path(args.scenario) if args.scenario else DEFAULT_SCENARIO
	data = _load_json(path, "Scenario")
	if isinstance(data, dict):
		if args.seed is not None:
			data = {**data, "seed": args.seed}
		if args.trials is not None:
			data = {**data, "trials": args.trials}

	result = validate_scenario(data, args.mode)
	if not result["valid"]:
		raise UsageError("; ".join(result["errors"]))
	scenario = result["scenario"]
	_log_resolved(
		"attack",
		scenario.seed,
		scenario=scenario.name,
		mode=args.mode,
		trials=scenario.trials,
		window_s=scenario.window_s,
		jobs=args.jobs,
		**scenario.model.to_json(),
	)

	report = run_scenario(scenario, args.mode, jobs=args.jobs)
	for written in report.write(args.out):
		print(written)
	return 0


# ==================== PARSER ====================


def _common_flags():
	common = argparse.ArgumentParser(add_help=False)
	common.add_argument("--seed", type=int, default=None, help="Root seed (default 0, scenario seed for attack)")
	common.add_argument("--jobs", type=int, default=1, help="Worker processes; output is identical for any value")
	common.add_argument("--out", default=None, help="Output file (or directory) instead of standard output")
	verbosity = common.add_mutually_exclusive_group()
	verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
	verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
	return common


def _packet_flags(parser):
	parser.add_argument("--identity", help="iBeacon identity JSON {uuid, major, minor, tx_power_ref}")
	parser.add_argument("--packet", help="Packet hex JSON written by 'encode' (overrides --identity)")
	parser.add_argument("--channel", type=int, choices=ADVERTISING_CHANNELS, default=None)


def _emulation_flags(parser, variant="enhanced"):
	parser.add_argument("--variant", choices=[v.value for v in Variant], default=variant)
	parser.add_argument("--qam", choices=["off", *[str(q) for q in QAM_ORDERS]], default=None)
	parser.add_argument("--window", choices=list(WINDOW_MODES), default=None)
	parser.add_argument("--scale", type=float, default=None, help="Fixed constellation scale (default: EVM search)")


def build_parser():
	common = _common_flags()
	parser = argparse.ArgumentParser(
		prog="ctc-beacon",
		description="Emulate iBeacon advertisements with WiFi OFDM symbols and simulate impersonation attacks",
	)
	parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
	sub = parser.add_subparsers(dest="command", required=True)

	encode = sub.add_parser("encode", parents=[common], help="Build an iBeacon advertising packet")
	_packet_flags(encode)
	encode.set_defaults(handler=cmd_encode)

	emulate = sub.add_parser("emulate", parents=[common], help="Emulate a packet as WiFi frames")
	_packet_flags(emulate)
	_emulation_flags(emulate)
	emulate.add_argument("--format", choices=["json", "f32"], default="json")
	emulate.set_defaults(handler=cmd_emulate)

	decode = sub.add_parser("decode", parents=[common], help="Decode frames for one sampling draw")
	_packet_flags(decode)
	decode.add_argument("--frames", required=True, help="Frame container JSON written by 'emulate'")
	decode.add_argument("--offset", type=int, default=0, help="Sampling offset in ns, 0..499")
	decode.add_argument("--mode", choices=[m.value for m in DecodeMode], default=DecodeMode.EARLY.value)
	decode.add_argument("--snr", type=float, default=None, help="AWGN level in dB (default noise-free)")
	decode.set_defaults(handler=cmd_decode)

	prr = sub.add_parser("prr", parents=[common], help="Monte Carlo packet reception ratio")
	_emulation_flags(prr)
	prr.add_argument("--channel", type=int, choices=ADVERTISING_CHANNELS, default=None)
	prr.add_argument("--snr", type=float, default=None)
	prr.add_argument("--trials", type=int, default=1000)
	prr.add_argument("--block-size", type=int, default=None)
	prr.add_argument("--no-header", action="store_true")
	prr.set_defaults(handler=cmd_prr)

	stability = sub.add_parser("stability", parents=[common], help="Received packets per second")
	_emulation_flags(stability)
	stability.add_argument("--channel", type=int, choices=ADVERTISING_CHANNELS, default=None)
	stability.add_argument("--snr", type=float, default=None)
	stability.add_argument("--duration", type=float, default=30)
	stability.add_argument("--interval", type=float, default=0.1)
	stability.add_argument("--repeats", type=int, default=1)
	stability.set_defaults(handler=cmd_stability)

	channels = sub.add_parser("channels", parents=[common], help="Channel plan or RSSI range tables")
	channels.add_argument("--derive", action="store_true", help="Derive the plan from band edges")
	channels.add_argument("--rssi", choices=[k.value for k in SourceKind], default=None)
	channels.add_argument("--distances", type=float, nargs="+", default=None)
	channels.add_argument("--levels", type=float, nargs="+", default=None)
	channels.set_defaults(handler=cmd_channels)

	attack = sub.add_parser("attack", parents=[common], help="Run an impersonation attack scenario")
	attack.add_argument("--scenario", default=None, help=f"Scenario JSON (default {DEFAULT_SCENARIO.name})")
	attack.add_argument("--mode", choices=[m.value for m in ScenarioMode], required=True)
	attack.add_argument("--trials", type=int, default=None, help="Override the scenario's trial count")
	attack.set_defaults(handler=cmd_attack)

	return parser


def main(argv=None):
	"""
	Entry point of the ctc-beacon console script

	Returns:
	    int: process exit code
	"""
	parser = build_parser()
	try:
		args = parser.parse_args(argv)
	except SystemExit as e:
		return e.code if isinstance(e.code, int) else 2

	level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
	configure_logging(level)

	if args.command == "attack" and not args.out:
		print("error: attack needs --out DIR", file=sys.stderr)
		return 2
	if args.jobs < 1:
		print("error: --jobs must be >= 1", file=sys.stderr)
		return 2

	try:
		return args.handler(args)
	except USAGE_ERRORS as e:
		log_error(str(e), f"CLI {args.command}")
		print(f"error: {e}", file=sys.stderr)
		return 2
	except Exception as e:
		log_error(f"{type(e).__name__}: {e}", f"CLI {args.command}")
		print(f"error: {e}", file=sys.stderr)
		return 1


if __name__ == "__main__":
	sys.exit(main())
