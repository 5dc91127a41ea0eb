# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
BLE downsampling receiver

The receiver takes one sample every 0.5 µs starting at offset tau in [0, 0.5) µs and
decides each bit from the sign of the phase change across a pair of samples:
    early   -> samples (2i, 2i+1)
    delayed -> samples (2i+1, 2i+2)
Sample 0 falls in the half-bit lead-in before the frame. Offsets are integer nanoseconds.
"""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from ctc_beacon.beacon_emulation.ble_link import check_crc
from ctc_beacon.beacon_emulation.emulation import (
	ROLE_DELAYS_NS,
	SLOT_NS,
	FrameRole,
	Variant,
	emulate_bits,
	emulate_packet,
)
from ctc_beacon.beacon_emulation.exceptions import ConfigurationError, ShapeError, ValidationError
from ctc_beacon.beacon_emulation.tasks.trial_runner import run_blocks
from ctc_beacon.beacon_emulation.utils import child_seeds, format_float, get_settings, logger, split_trials, throw

OFFSET_RANGE_NS = SLOT_NS
SEGMENT_A_NS = 200
P_SEGMENT_A = SEGMENT_A_NS / OFFSET_RANGE_NS
P_SEGMENT_B = 1 - P_SEGMENT_A
P_DELAYED = 0.5
PREAMBLE_BITS = 8

PRR_CSV_HEADER = ("variant", "qam_order", "snr_db", "trials", "prr", "ci95")


class DecodeMode(str, Enum):
	EARLY = "early"
	DELAYED = "delayed"


MODES = (DecodeMode.EARLY, DecodeMode.DELAYED)


@dataclass(frozen=True)
class SamplingContext:
	"""One receiver draw: offset in ns, decode mode and optional SNR"""

	offset_ns: int
	mode: DecodeMode
	snr_db: float | None = None
	seed: int | None = None

	def __post_init__(self):
		object.__setattr__(self, "mode", DecodeMode(self.mode))
		if not 0 <= int(self.offset_ns) < OFFSET_RANGE_NS:
			throw(f"Sampling offset must lie in [0, {OFFSET_RANGE_NS}) ns, got {self.offset_ns}")
		object.__setattr__(self, "offset_ns", int(self.offset_ns))

	@property
	def offset(self):
		return self.offset_ns * 1e-9

	@property
	def segment(self):
		return "A" if self.offset_ns < SEGMENT_A_NS else "B"


@dataclass(frozen=True)
class DecodeReference:
	"""
	Bits a decode is judged against

	Attributes:
	    bits: Expected bits (padding excluded)
	    checked_from: First bit that counts toward success (preamble sync is ideal)
	    channel_index: When set, a decoded packet must also pass the CRC check
	"""

	bits: tuple
	checked_from: int = 0
	channel_index: int | None = None

	@classmethod
	def for_packet(cls, packet):
		return cls(packet.whitened_bits, PREAMBLE_BITS, packet.channel_index)

	@classmethod
	def for_bits(cls, bits):
		return cls(tuple(int(b) for b in bits))

	@property
	def array(self):
		return np.asarray(self.bits, dtype=np.uint8)


@dataclass(frozen=True)
class DecodeResult:
	bits: np.ndarray = field(compare=False)
	packet_ok: bool
	per_bit_errors: tuple


@dataclass(frozen=True)
class PrrEstimate:
	variant: str
	qam_order: int | None
	snr_db: float | None
	trials: int
	successes: int

	@property
	def prr(self):
		return self.successes / self.trials

	@property
	def ci95(self):
		p = self.prr
		return float(stats.norm.ppf(0.975) * math.sqrt(p * (1 - p) / self.trials))


@dataclass(frozen=True)
class StabilityTrace:
	counts: tuple
	interval_s: float

	@property
	def mean(self):
		return float(np.mean(self.counts))

	@property
	def cv(self):
		"""Coefficient of variation; 0 when nothing was received"""
		mean = self.mean
		return 0.0 if mean == 0 else float(np.std(self.counts) / mean)


# ==================== SAMPLING ====================


def receiver_stream(frame):
	"""Frame samples with the half-bit lead-in before and a half-bit hold after"""
	slot = int(round(frame.sample_rate_hz * SLOT_NS / 1e9))
	lead = np.full(slot, np.exp(1j * frame.lead_phase))
	hold = np.full(slot, frame.samples[-1])
	return np.concatenate([lead, frame.samples, hold])


def sample_indices(offsets_ns, origin_ns, count, sample_rate_hz):
	"""Stream indices of `count` instants per offset, 0.5 µs apart"""
	offsets = np.atleast_1d(np.asarray(offsets_ns, dtype=np.int64))
	times = origin_ns + offsets[:, np.newaxis] + SLOT_NS * np.arange(count, dtype=np.int64)
	return times * int(sample_rate_hz) // 1_000_000_000


def downsample(stream, offsets_ns, origin_ns, count, sample_rate_hz):
	"""
	Take the 2 Msps sampling points out of a stream

	Args:
	    stream: Complex samples at sample_rate_hz, starting at the lead-in
	    offsets_ns: Offset or array of offsets (ns)
	    origin_ns: Content-grid origin (a supplementary frame's built-in delay)
	    count: Sampling points per offset
	    sample_rate_hz: Stream sample rate

	Returns:
	    np.ndarray of shape (len(offsets), count)
	"""
	idx = sample_indices(offsets_ns, origin_ns, count, sample_rate_hz)
	if idx.max() >= len(stream):
		throw(f"Stream of {len(stream)} samples is too short for {count} sampling points", ShapeError)
	return np.asarray(stream)[idx]


def decide_bits(points, mode, bit_count):
	"""Sign of the wrapped phase change over each bit's sample pair (positive is 1)"""
	start = 0 if DecodeMode(mode) is DecodeMode.EARLY else 1
	first = points[..., start : start + 2 * bit_count : 2]
	second = points[..., start + 1 : start + 2 * bit_count + 1 : 2]
	return (np.angle(second * np.conj(first)) > 0).astype(np.uint8)


def _judge(decoded, reference):
	expected = reference.array
	n = expected.size
	errors = np.flatnonzero(decoded[:n] != expected)
	errors = tuple(int(i) for i in errors if i >= reference.checked_from)
	ok = not errors
	if ok and reference.channel_index is not None:
		ok = check_crc(decoded[:n], reference.channel_index)
	return DecodeResult(decoded[:n], ok, errors)


def _effective(frame, offset_ns):
	delay = frame.built_in_delay_ns
	return (offset_ns - delay) % OFFSET_RANGE_NS, delay


def add_noise(stream, snr_db, normals, signal_power=None):
	"""AWGN at `snr_db` built from pre-drawn standard normals of shape (len(stream), 2)"""
	if snr_db is None:
		return stream
	power = float(np.mean(np.abs(stream) ** 2)) if signal_power is None else signal_power
	sigma = math.sqrt(power / 10 ** (snr_db / 10) / 2)
	return stream + sigma * (normals[: len(stream), 0] + 1j * normals[: len(stream), 1])


def decode_samples(points, mode, reference):
	"""
	Decode 2 Msps sampling points

	Args:
	    points: 2N+1 complex (or unit-phasor) samples, the first in the lead-in half-bit
	    mode: DecodeMode
	    reference: DecodeReference

	Returns:
	    DecodeResult
	"""
	points = np.asarray(points)
	n = len(reference.bits)
	if points.size < 2 * n + 1:
		throw(f"{points.size} sampling points cannot carry {n} bits", ShapeError)
	return _judge(decide_bits(points, mode, n), reference)


def decode(frame, ctx, reference, normals=None):
	"""
	Decode one frame for one sampling context

	The receiver aligns to the frame's content grid, so a supplementary frame delayed by
	d is sampled at effective offset (tau - d) mod 0.5 µs.
	"""
	offset, origin = _effective(frame, ctx.offset_ns)
	stream = receiver_stream(frame)
	if ctx.snr_db is not None:
		if normals is None:
			normals = np.random.default_rng(ctx.seed).standard_normal((len(stream), 2))
		stream = add_noise(stream, ctx.snr_db, normals, float(np.mean(np.abs(frame.samples) ** 2)))
	points = downsample(stream, offset, origin, 2 * frame.bit_count + 1, frame.sample_rate_hz)[0]
	return _judge(decide_bits(points, ctx.mode, frame.bit_count), reference)


def _require_roles(frames):
	roles = {f.role for f in frames}
	if roles != set(FrameRole):
		missing = sorted(r.value for r in set(FrameRole) - roles)
		raise ConfigurationError(f"Enhanced decoding needs beacon1-3, missing: {', '.join(missing)}")
	for f in frames:
		if f.built_in_delay_ns != ROLE_DELAYS_NS[f.role]:
			raise ConfigurationError(f"{f.role.value} must carry a {ROLE_DELAYS_NS[f.role]} ns delay")


def decode_enhanced(frames, ctx, reference, normals=None):
	"""
	Decode the three enhanced frames under one (offset, mode) draw

	Returns the first fully decoded frame's result, else beacon1's.
	"""
	_require_roles(frames)
	ordered = sorted(frames, key=lambda f: f.built_in_delay_ns)
	results = []
	for i, frame in enumerate(ordered):
		result = decode(frame, ctx, reference, None if normals is None else normals[i])
		if result.packet_ok:
			return result
		results.append(result)
	return results[0]


def decode_frames(frames, ctx, reference, normals=None):
	"""One frame decodes directly; three frames take the enhanced path"""
	if len(frames) == 1:
		return decode(frames[0], ctx, reference, None if normals is None else normals[0])
	return decode_enhanced(frames, ctx, reference, normals)


# ==================== OUTCOMES ====================


def outcome_table(frames, reference):
	"""
	Noise-free success of every (mode, offset) pair

	Returns:
	    np.ndarray of bool, shape (2, 500): row 0 early, row 1 delayed
	"""
	offsets = np.arange(OFFSET_RANGE_NS)
	table = np.zeros((len(MODES), OFFSET_RANGE_NS), dtype=bool)
	expected = reference.array
	n = expected.size
	checked = slice(reference.checked_from, n)

	for frame in frames:
		effective = (offsets - frame.built_in_delay_ns) % OFFSET_RANGE_NS
		points = downsample(
			receiver_stream(frame),
			effective,
			frame.built_in_delay_ns,
			2 * frame.bit_count + 1,
			frame.sample_rate_hz,
		)
		for m, mode in enumerate(MODES):
			decoded = decide_bits(points, mode, frame.bit_count)[:, :n]
			table[m] |= np.all(decoded[:, checked] == expected[checked], axis=1)
	return table


def analytic_decode_prob(symbol, variant):
	"""
	Probability that one 4-bit symbol decodes correctly

	P = 1 - P(A)·P(W|A) - P(B)·P(W|B), where the error terms already carry the
	0.5 chance of delayed decoding.
	"""
	bits = tuple(int(b) for b in symbol)
	if len(bits) != 4:
		throw(f"A symbol has 4 bits, got {len(bits)}")
	variant = Variant(variant)
	if bits[0] == bits[3] or variant is Variant.ENHANCED:
		return 1.0

	wrong_given_a = P_DELAYED if variant is Variant.BASIC else 0.0
	wrong_given_b = P_DELAYED
	return 1 - P_SEGMENT_A * wrong_given_a - P_SEGMENT_B * wrong_given_b


# ==================== MONTE CARLO ====================


def _simulate_block(payload):
	"""Per-trial success for one block; module level so worker processes can pickle it"""
	frames, reference, table, snr_db, block_seed, count = payload
	draws, noise = block_seed.spawn(2)
	rng = np.random.default_rng(draws)
	offsets = rng.integers(0, OFFSET_RANGE_NS, size=count)
	modes = rng.integers(0, len(MODES), size=count)

	if snr_db is None:
		return table[modes, offsets]

	noise_rng = np.random.default_rng(noise)
	stream_len = len(receiver_stream(frames[0]))
	outcomes = np.empty(count, dtype=bool)
	for t in range(count):
		normals = noise_rng.standard_normal((len(frames), stream_len, 2))
		ctx = SamplingContext(int(offsets[t]), MODES[modes[t]], snr_db)
		outcomes[t] = decode_frames(frames, ctx, reference, normals).packet_ok
	return outcomes


def simulate_trials(frames, reference, trials, seed, snr_db=None, jobs=1, block_size=None):
	"""
	Per-trial packet success for `trials` independent (offset, mode, noise) draws

	Trials are cut into fixed blocks seeded from `seed`, so the outcome vector is the
	same for any `jobs`.
	"""
	if int(trials) < 1:
		throw(f"Trial count must be >= 1, got {trials}")
	block_size = block_size or get_settings().trial_block_size
	sizes = split_trials(trials, block_size)
	table = outcome_table(frames, reference) if snr_db is None else None
	payloads = [
		(frames, reference, table, snr_db, block_seed, size)
		for block_seed, size in zip(child_seeds(seed, len(sizes)), sizes, strict=True)
	]
	return np.concatenate(run_blocks(_simulate_block, payloads, jobs))


def _estimate(frames, reference, config, trials, seed, snr_db, jobs, block_size):
	outcomes = simulate_trials(frames, reference, trials, seed, snr_db, jobs, block_size)
	estimate = PrrEstimate(config.variant.value, config.qam_order, snr_db, int(trials), int(outcomes.sum()))
	logger("receiver").info(
		f"PRR {estimate.prr:.4f} ± {estimate.ci95:.4f} over {trials} trials "
		f"(variant={config.variant.value}, qam={config.qam_order or 'off'}, snr={snr_db}, seed={seed})"
	)
	return estimate


def estimate_prr(packet, config, trials, seed=0, snr_db=None, jobs=1, block_size=None):
	"""
	Monte Carlo packet reception ratio

	Args:
	    packet: AdvertisingPacket to emulate
	    config: EmulationConfig
	    trials: Number of packets (>= 1)
	    seed: Root seed
	    snr_db: AWGN level, None for noise-free
	    jobs: Worker processes
	    block_size: Trials per seeded block (settings default)

	Returns:
	    PrrEstimate
	"""
	frames = emulate_packet(packet, config)
	return _estimate(frames, DecodeReference.for_packet(packet), config, trials, seed, snr_db, jobs, block_size)


def estimate_bits_prr(bits, config, trials, seed=0, snr_db=None, jobs=1, block_size=None):
	"""Same as estimate_prr for a raw bit sequence (no CRC check, every bit counts)"""
	frames = emulate_bits(bits, config)
	return _estimate(frames, DecodeReference.for_bits(bits), config, trials, seed, snr_db, jobs, block_size)


def stability_trace(packet, config, seed=0, interval_s=0.1, duration_s=30, snr_db=None, jobs=1):
	"""
	Received packets per second while broadcasting every `interval_s`

	Returns:
	    StabilityTrace with one count per second
	"""
	if duration_s <= 0 or not math.isclose(duration_s, round(duration_s)):
		throw(f"Duration must be a whole number of seconds, got {duration_s}")
	if interval_s <= 0 or not math.isclose(1 / interval_s, round(1 / interval_s)):
		raise ValidationError(f"Interval {interval_s} s does not divide one second")

	seconds, per_second = int(round(duration_s)), int(round(1 / interval_s))
	frames = emulate_packet(packet, config)
	outcomes = simulate_trials(
		frames, DecodeReference.for_packet(packet), seconds * per_second, seed, snr_db, jobs, per_second
	)
	counts = outcomes.reshape(seconds, per_second).sum(axis=1)
	return StabilityTrace(tuple(int(c) for c in counts), float(interval_s))


def prr_csv_row(estimate):
	return (
		estimate.variant,
		"off" if estimate.qam_order is None else str(estimate.qam_order),
		"none" if estimate.snr_db is None else format_float(estimate.snr_db, 1),
		str(estimate.trials),
		format_float(estimate.prr),
		format_float(estimate.ci95),
	)
