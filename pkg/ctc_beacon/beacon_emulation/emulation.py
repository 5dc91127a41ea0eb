# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
WiFi OFDM emulation of BLE phase ladders

Workflow per packet:
    1. on-air bits -> 1 µs ladders -> 0.5 µs fine ladders (ble_link)
    2. every 4 bits become one 4 µs OFDM symbol (80 samples at 20 MHz)
    3. the last 0.8 µs of each symbol is forced to repeat the first 0.8 µs (cyclic prefix)
    4. optional supplementary frames delayed by 0.2 / 0.3 µs
    5. optional QAM quantization of every symbol body

Slot k of a symbol covers [0.5k, 0.5k + 0.5) µs and holds the phase the FSK
ramp reaches at the end of that slot. The free section is [3.0, 3.2) µs.
"""

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import fft

from ctc_beacon.beacon_emulation.ble_link import (
	QUARTER_PI,
	bits_to_phase_ladders,
	split_fine_grained,
)
from ctc_beacon.beacon_emulation.exceptions import (
	ConfigurationError,
	LengthError,
	SchemaError,
	ShapeError,
	ValidationError,
)
from ctc_beacon.beacon_emulation.radio_env import ChannelPlan
from ctc_beacon.beacon_emulation.utils import get_settings, logger, throw, wrap_phase

SYMBOL_NS = 4000
BODY_NS = 3200
CP_NS = 800
SLOT_NS = 500
FREE_START_NS = 3000
BITS_PER_SYMBOL = 4
LADDERS_PER_SYMBOL = 8
SUPPLEMENTARY_DELAYS_NS = (200, 300)
QAM_ORDERS = (4, 16, 64)

# free-section search grid, in units of pi/64
FREE_SEARCH_STEPS = 64
# x_5 -> x_0 gap search grid for tuned symbols, in units of pi/32 (keeps the free-section midpoint on the grid above)
GAP_SEARCH_STEPS = 32
# base-level grid shared by every order; nested constellations keep EVM monotone in order
SCALE_GRID = np.union1d(
	np.geomspace(0.02, 8.0, 321),
	[1.0 / math.sqrt(2 * (m - 1) / 3) for m in QAM_ORDERS],
)

FROM_SETTINGS = object()

WIFI_NULL_BINS = (0, 27, 28, 29, 30, 31, 32, -27, -28, -29, -30, -31, -32)
WIFI_PILOT_BINS = {-21: 1.0, -7: 1.0, 7: 1.0, 21: -1.0}
WINDOW_MODES = ("band", "all", "strict")


class Variant(str, Enum):
	BASIC = "basic"
	ADJUSTED = "adjusted"
	ENHANCED = "enhanced"


class FrameRole(str, Enum):
	BEACON1 = "beacon1"
	BEACON2 = "beacon2"
	BEACON3 = "beacon3"


ROLE_DELAYS_NS = {FrameRole.BEACON1: 0, FrameRole.BEACON2: 200, FrameRole.BEACON3: 300}


def _samples_for(ns, sample_rate_hz):
	count = ns * sample_rate_hz / 1e9
	if not math.isclose(count, round(count)):
		raise ConfigurationError(f"{ns} ns is not a whole number of samples at {sample_rate_hz:g} Hz")
	return int(round(count))


# ==================== CONFIG ====================


@dataclass(frozen=True)
class EmulationConfig:
	"""
	Emulation parameters

	Unset fields fall back to Simulation Settings.

	Attributes:
	    variant: basic, adjusted (free-section fix) or enhanced (adjusted + supplementary frames)
	    qam_order: None (quantization off), 4, 16 or 64
	    sample_rate_hz: Must give whole samples for 0.1 µs
	    window_mode: "band" quantizes the BLE band and leaves the rest to the receiver's channel
	        filter; "all" quantizes every bin; "strict" is "band" plus 802.11 nulls and pilots
	    constellation_scale: None searches the scale; a float fixes it (1.0 = unit average power)
	    ble_channel: Advertising channel, selects the WiFi bin offset in strict mode
	"""

	variant: Variant = Variant.ENHANCED
	qam_order: int | None = FROM_SETTINGS
	sample_rate_hz: float = FROM_SETTINGS
	window_mode: str = FROM_SETTINGS
	constellation_scale: float | None = FROM_SETTINGS
	ble_channel: int = FROM_SETTINGS

	def __post_init__(self):
		settings = get_settings()
		object.__setattr__(self, "variant", Variant(self.variant))
		defaults = {
			"qam_order": settings.qam_order,
			"sample_rate_hz": settings.sample_rate_hz,
			"window_mode": settings.qam_window_mode,
			"constellation_scale": settings.constellation_scale,
			"ble_channel": settings.ble_channel,
		}
		for name, value in defaults.items():
			if getattr(self, name) is FROM_SETTINGS:
				object.__setattr__(self, name, value)

		if self.qam_order is not None and self.qam_order not in QAM_ORDERS:
			raise ConfigurationError(f"QAM order must be off or one of {QAM_ORDERS}, got {self.qam_order}")
		if self.window_mode not in WINDOW_MODES:
			raise ConfigurationError(f"Window mode must be one of {WINDOW_MODES}, got {self.window_mode!r}")
		if self.constellation_scale is not None and self.constellation_scale <= 0:
			raise ConfigurationError("Constellation scale must be positive")

		# 0.1 µs must be whole samples so every delay and section boundary lands on a sample
		_samples_for(100, self.sample_rate_hz)
		if self.qam_order is not None and self.window_mode != "all" and self.body_samples != 64:
			raise ConfigurationError(f"Window mode {self.window_mode!r} needs the 64-bin 802.11 grid (20 MHz)")

	@classmethod
	def cp_only(cls, variant, **kwargs):
		"""Config with QAM quantization switched off regardless of settings"""
		return cls(variant=variant, qam_order=None, **kwargs)

	@property
	def symbol_samples(self):
		return _samples_for(SYMBOL_NS, self.sample_rate_hz)

	@property
	def body_samples(self):
		return _samples_for(BODY_NS, self.sample_rate_hz)

	@property
	def cp_samples(self):
		return _samples_for(CP_NS, self.sample_rate_hz)

	@property
	def slot_samples(self):
		return _samples_for(SLOT_NS, self.sample_rate_hz)

	@property
	def free_start(self):
		return _samples_for(FREE_START_NS, self.sample_rate_hz)

	@property
	def subcarrier_window(self):
		"""FFT bin indices (numpy order, BLE-centered) that get quantized"""
		n = self.body_samples
		if self.window_mode == "all":
			return tuple(range(n))
		offset = self.wifi_bin_offset
		return tuple((w - offset) % n for w in ChannelPlan.default().subcarrier_window(self.ble_channel))

	@property
	def wifi_bin_offset(self):
		return ChannelPlan.default().subcarrier_offset(self.ble_channel)

	def to_json(self):
		return {
			"variant": self.variant.value,
			"qam_order": self.qam_order,
			"sample_rate_hz": self.sample_rate_hz,
			"window_mode": self.window_mode,
			"constellation_scale": self.constellation_scale,
			"ble_channel": self.ble_channel,
		}


# ==================== SYMBOLS ====================


@dataclass(frozen=True, eq=False)
class EmulatedSymbol:
	"""
	One 4-bit BLE symbol carried by one OFDM symbol

	Attributes:
	    target_ladders: x_0..x_7, the unconstrained fine ladders
	    constrained_ladders: slot values after CP enforcement (slot 6 holds the segment-B value)
	    phases: Per-sample phase trajectory, CP identity applied
	    free_phase: Phase written to [3.0, 3.2) µs
	    opening: Phase the symbol starts from
	    bits: b_0..b_3
	"""

	target_ladders: np.ndarray
	constrained_ladders: np.ndarray
	phases: np.ndarray
	free_phase: float
	opening: float
	bits: tuple

	@property
	def closing(self):
		"""Midpoint of the two CP values slot 7 can be sampled at"""
		x0, x1 = self.constrained_ladders[0], self.constrained_ladders[1]
		return float(x0 + wrap_phase(x1 - x0) / 2)

	def next_opening(self, next_first_bit):
		"""
		Opening for the following symbol

		Its x_0 lands 2·(pi/4) past the closing midpoint in b_0's direction, which leaves
		3pi/8 on both CP values of slot 7 for the first early decision.
		"""
		return self.closing + (2 * int(next_first_bit) - 1) * QUARTER_PI

	@property
	def needs_adjustment(self):
		return self.bits[0] != self.bits[3]


def _symbol_bits(ladders, end_phase):
	edges = np.append(ladders, end_phase)[::2]
	return tuple(int(b) for b in (np.diff(edges) > 0))


def _search_free_phase(x5, x0, sign):
	"""Free-section phase between x5 and x0 that maximizes the worse of both decision margins"""
	thetas = np.arange(1, FREE_SEARCH_STEPS) * math.pi / FREE_SEARCH_STEPS
	candidates = x5 + sign * thetas
	margins = np.minimum(sign * wrap_phase(candidates - x5), sign * wrap_phase(x0 - candidates))
	return float(candidates[int(np.argmax(margins))])


def _search_gap(x0, x3, s2, s3):
	"""
	Gap D with x_5 = x_0 - s3·D for a symbol whose free section gets tuned

	The free section sits halfway across the gap, so both segment-A b_3 decisions get D/2.
	The segment-B early decision needs D < pi, and b_2's half-steps (x_3 -> x_5) must keep
	room on both sides of zero and pi. Returns the D that maximizes the worst of these.
	"""
	gaps = np.arange(1, GAP_SEARCH_STEPS) * math.pi / GAP_SEARCH_STEPS
	half_steps = np.mod(s2 * (x0 - s3 * gaps - x3), 2 * math.pi) / 2
	margins = np.minimum.reduce([gaps / 2, math.pi - gaps, half_steps, math.pi - half_steps])
	return float(gaps[int(np.argmax(margins))])


def apply_cp_constraint(target_ladders, variant, opening=None, end_phase=None, config=None):
	"""
	Fit 8 fine ladders into one OFDM symbol whose last 0.8 µs repeats its first 0.8 µs

	Args:
	    target_ladders: x_0..x_7 phase values (ladder starts)
	    variant: Variant; adjusted and enhanced tune b_2's steps and the free section of
	        b_0 != b_3 symbols
	    opening: Phase the symbol starts from (defaults to x_0)
	    end_phase: Phase after the last ladder, needed only to read b_3 (defaults to x_7 ramp)
	    config: EmulationConfig for sample geometry

	Returns:
	    EmulatedSymbol
	"""
	target = np.asarray(target_ladders, dtype=float)
	if target.shape != (LADDERS_PER_SYMBOL,):
		throw(f"A symbol needs {LADDERS_PER_SYMBOL} fine ladders, got {target.shape}", ShapeError)

	config = config or EmulationConfig.cp_only(variant)
	variant = Variant(variant)
	steps = np.diff(target)
	if end_phase is None:
		end_phase = target[-1] + steps[-1]
	bits = _symbol_bits(target, end_phase)
	s0, s1, s2, s3 = (2 * b - 1 for b in bits)
	q = QUARTER_PI
	eps = q / 2
	opening = float(target[0] if opening is None else opening)

	x = np.empty(LADDERS_PER_SYMBOL)
	x[0] = opening + s0 * q
	x[1] = x[0] + s0 * q
	x[2] = x[1] + s1 * q
	x[3] = x[2] + s1 * q
	tuned = variant is not Variant.BASIC and bits[0] != bits[3]
	if tuned:
		span = np.mod(s2 * (x[0] - s3 * _search_gap(x[0], x[3], s2, s3) - x[3]), 2 * math.pi)
	else:
		# b_2's two steps absorb whatever is needed for x_6 to close back onto the opening phase
		span = np.mod(s2 * (-(2 * s0 + 2 * s1 + s3) * q - s3 * eps), 2 * math.pi)
	x[4] = x[3] + s2 * span / 2
	x[5] = x[3] + s2 * span
	x[6] = x[5] + s3 * q
	x[7] = x[6] + s3 * q

	free_phase = float(x[6])
	if tuned:
		free_phase = _search_free_phase(x[5], x[0], s3)

	slot = config.slot_samples
	phases = np.repeat(x, slot)
	phases[config.free_start : config.body_samples] = free_phase
	phases[config.body_samples :] = phases[: config.cp_samples]

	constrained = x.copy()
	constrained[6] = phases[config.body_samples]
	constrained[7] = phases[-1]

	return EmulatedSymbol(target, constrained, phases, free_phase, opening, bits)


def constrain_trajectory(fine_seq, config):
	"""Constrain every symbol of a fine ladder sequence, chaining openings between symbols"""
	values = fine_seq.values
	if values.size % LADDERS_PER_SYMBOL:
		throw(f"{values.size} fine ladders do not fill whole symbols", LengthError)

	boundaries = fine_seq.boundaries()
	symbols = []
	opening = fine_seq.initial_phase
	for start in range(0, values.size, LADDERS_PER_SYMBOL):
		targets = values[start : start + LADDERS_PER_SYMBOL]
		end_phase = boundaries[start + LADDERS_PER_SYMBOL]
		if symbols:
			opening = symbols[-1].next_opening(_symbol_bits(targets, end_phase)[0])
		symbols.append(
			apply_cp_constraint(targets, config.variant, opening=opening, end_phase=end_phase, config=config)
		)
	return symbols


def render_unconstrained(fine_seq, config):
	"""Per-sample phase of the ideal staircase, no CP rule (slot k holds ladder k+1's start)"""
	return np.repeat(fine_seq.boundaries()[1:], config.slot_samples)


# ==================== SUPPLEMENTARY FRAMES ====================


def make_supplementary(trajectory, delay_ns, config):
	"""
	Delay every symbol of a trajectory and repair its cyclic prefix

	Args:
	    trajectory: Per-sample phases (or complex samples) of whole symbols
	    delay_ns: 200 or 300
	    config: EmulationConfig for sample geometry

	Returns:
	    np.ndarray of the same shape where, per symbol, out[t] = in[t - delay] and the
	    vacated head repeats [3.2 - delay, 3.2) µs of the same symbol
	"""
	if delay_ns not in SUPPLEMENTARY_DELAYS_NS:
		raise ConfigurationError(f"Supplementary delay must be one of {SUPPLEMENTARY_DELAYS_NS} ns, got {delay_ns}")

	per_symbol = config.symbol_samples
	trajectory = np.asarray(trajectory)
	if trajectory.size % per_symbol:
		throw(f"Trajectory of {trajectory.size} samples is not whole symbols", ShapeError)

	shift = _samples_for(delay_ns, config.sample_rate_hz)
	body = config.body_samples
	rows = trajectory.reshape(-1, per_symbol)
	return np.concatenate([rows[:, body - shift : body], rows[:, : per_symbol - shift]], axis=1).reshape(-1)


# ==================== WAVEFORM ====================


def synthesize_waveform(trajectory, config=None):
	"""Unit-amplitude complex baseband samples e^{j phi}"""
	trajectory = np.asarray(trajectory, dtype=float)
	if config is not None and trajectory.size % config.symbol_samples:
		throw("Trajectory duration must be a multiple of 4 µs", ShapeError)
	return np.exp(1j * trajectory)


def _qam_levels(order):
	side = int(math.isqrt(order))
	return np.arange(-(side - 1), side, 2, dtype=float)


def _unit_power_base(order):
	return 1.0 / math.sqrt(2 * (order - 1) / 3)


def _snap(values, base, order):
	"""Nearest square-QAM point for base level(s) `base` (broadcast over a leading axis)"""
	side = int(math.isqrt(order))

	def axis(component):
		idx = np.clip(np.rint((component / base + side - 1) / 2), 0, side - 1)
		return base * (2 * idx + 1 - side)

	return axis(values.real) + 1j * axis(values.imag)


def _strict_masks(config):
	n = config.body_samples
	offset = config.wifi_bin_offset
	nulls = {(w - offset) % n for w in WIFI_NULL_BINS}
	pilots = {(w - offset) % n: value for w, value in WIFI_PILOT_BINS.items()}
	window = [b for b in config.subcarrier_window if b not in nulls and b not in pilots]
	return window, sorted(nulls), pilots


def qam_quantize(symbol_samples, config):
	"""
	Snap one symbol's subcarriers to the nearest constellation points

	Args:
	    symbol_samples: 80 complex samples (CP + body)
	    config: EmulationConfig with qam_order set

	Returns:
	    tuple: (quantized samples with CP re-copied from the new body tail, evm)
	"""
	if config.qam_order is None:
		raise ConfigurationError("QAM quantization requested with qam_order off")

	samples = np.asarray(symbol_samples, dtype=complex)
	if samples.shape != (config.symbol_samples,):
		throw(f"Expected {config.symbol_samples} samples, got {samples.shape}", ShapeError)

	cp = config.cp_samples
	order = config.qam_order
	spectrum = fft.fft(samples[cp:], norm="ortho")
	quantized = spectrum.copy()

	if config.window_mode == "strict":
		window, nulls, pilots = _strict_masks(config)
		quantized[nulls] = 0
		for b, value in pilots.items():
			quantized[b] = value
	else:
		# in band mode the bins left out are rejected by the BLE receiver's channel filter
		window = list(config.subcarrier_window)

	bins = spectrum[window]
	if config.constellation_scale is not None:
		snapped = _snap(bins, config.constellation_scale * _unit_power_base(order), order)
	else:
		candidates = _snap(bins[np.newaxis, :], SCALE_GRID[:, np.newaxis], order)
		cost = np.sum(np.abs(candidates - bins) ** 2, axis=1)
		snapped = candidates[int(np.argmin(cost))]
	quantized[window] = snapped

	evm = float(np.sqrt(np.mean(np.abs(quantized - spectrum) ** 2)))
	body = fft.ifft(quantized, norm="ortho")
	out = np.concatenate([body[-cp:], body])
	return out, evm


# ==================== FRAMES ====================


@dataclass(frozen=True, eq=False)
class WaveformFrame:
	"""
	Complex baseband samples of one emulated WiFi frame

	The receiver prepends `lead_phase` for half a bit and holds the last sample
	after the frame.
	"""

	samples: np.ndarray
	role: FrameRole
	built_in_delay_ns: int
	evm: float
	lead_phase: float
	bit_count: int
	sample_rate_hz: float

	@property
	def symbol_count(self):
		return self.bit_count // BITS_PER_SYMBOL

	def to_json(self):
		return {
			"role": self.role.value,
			"delay_us": self.built_in_delay_ns / 1000,
			"evm": self.evm,
			"lead_phase": self.lead_phase,
			"bit_count": self.bit_count,
			"sample_rate_hz": self.sample_rate_hz,
			"samples": [[float(s.real), float(s.imag)] for s in self.samples],
		}

	@classmethod
	def from_json(cls, data):
		try:
			pairs = np.asarray(data["samples"], dtype=float)
			return cls(
				samples=pairs[:, 0] + 1j * pairs[:, 1],
				role=FrameRole(data["role"]),
				built_in_delay_ns=int(round(float(data["delay_us"]) * 1000)),
				evm=float(data["evm"]),
				lead_phase=float(data["lead_phase"]),
				bit_count=int(data["bit_count"]),
				sample_rate_hz=float(data["sample_rate_hz"]),
			)
		except (KeyError, TypeError, ValueError, IndexError) as e:
			raise SchemaError(f"Invalid frame JSON: {e}")

	def to_float32(self):
		"""Interleaved little-endian float32 I/Q"""
		interleaved = np.empty(self.samples.size * 2, dtype="<f4")
		interleaved[0::2] = self.samples.real
		interleaved[1::2] = self.samples.imag
		return interleaved.tobytes()


def frames_to_json(frames):
	return json.dumps({"frames": [f.to_json() for f in frames]}, indent=1)


def frames_from_json(text):
	try:
		data = json.loads(text)
	except json.JSONDecodeError as e:
		raise ValidationError(f"Malformed frame JSON: {e}")
	if not isinstance(data, dict) or not isinstance(data.get("frames"), list):
		raise SchemaError("Frame container needs a 'frames' list")
	return [WaveformFrame.from_json(f) for f in data["frames"]]


def pad_bits(bits):
	"""Repeat the last bit up to a whole symbol so the final slope continues"""
	bits = np.asarray(bits, dtype=np.uint8)
	if bits.size == 0:
		throw("Cannot emulate an empty bit sequence", LengthError)
	missing = (-bits.size) % BITS_PER_SYMBOL
	return np.concatenate([bits, np.full(missing, bits[-1], dtype=np.uint8)])


def _quantize_frame(samples, config):
	per_symbol = config.symbol_samples
	out = np.empty_like(samples)
	evms = []
	for start in range(0, samples.size, per_symbol):
		out[start : start + per_symbol], evm = qam_quantize(samples[start : start + per_symbol], config)
		evms.append(evm)
	return out, float(np.sqrt(np.mean(np.square(evms))))


def emulate_bits(bits, config, initial_phase=0.0):
	"""
	Emulate an arbitrary bit stream

	Args:
	    bits: 0/1 sequence, padded to a multiple of 4
	    config: EmulationConfig
	    initial_phase: Phase before the first bit

	Returns:
	    list[WaveformFrame]: one frame, or three for the enhanced variant
	"""
	bits = np.asarray(bits, dtype=np.uint8)
	padded = pad_bits(bits)
	fine = split_fine_grained(bits_to_phase_ladders(padded, initial_phase))
	trajectory = np.concatenate([s.phases for s in constrain_trajectory(fine, config)])

	roles = [FrameRole.BEACON1]
	if config.variant is Variant.ENHANCED:
		roles += [FrameRole.BEACON2, FrameRole.BEACON3]

	frames = []
	for role in roles:
		delay_ns = ROLE_DELAYS_NS[role]
		phases = trajectory if delay_ns == 0 else make_supplementary(trajectory, delay_ns, config)
		samples = synthesize_waveform(phases, config)
		evm = 0.0
		if config.qam_order is not None:
			samples, evm = _quantize_frame(samples, config)
		frames.append(
			WaveformFrame(
				samples=samples,
				role=role,
				built_in_delay_ns=delay_ns,
				evm=evm,
				lead_phase=float(initial_phase),
				bit_count=int(padded.size),
				sample_rate_hz=config.sample_rate_hz,
			)
		)

	logger("emulation").debug(
		f"Emulated {bits.size} bits ({padded.size - bits.size} padding) as {len(frames)} frame(s), "
		f"variant={config.variant.value}, qam={config.qam_order or 'off'}"
	)
	return frames


def emulate_packet(packet, config, initial_phase=0.0):
	"""Emulate an AdvertisingPacket's on-air bits"""
	return emulate_bits(packet.bits, config, initial_phase)


def emulate_unconstrained(bits, config, initial_phase=0.0):
	"""Reference frame of the ideal staircase without the CP rule"""
	padded = pad_bits(bits)
	fine = split_fine_grained(bits_to_phase_ladders(padded, initial_phase))
	return WaveformFrame(
		samples=synthesize_waveform(render_unconstrained(fine, config)),
		role=FrameRole.BEACON1,
		built_in_delay_ns=0,
		evm=0.0,
		lead_phase=float(initial_phase),
		bit_count=int(padded.size),
		sample_rate_hz=config.sample_rate_hz,
	)
