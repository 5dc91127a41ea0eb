# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

import itertools
import math
import unittest

import numpy as np
from scipy import fft

from ctc_beacon.beacon_emulation.ble_link import bits_to_phase_ladders, canonical_packet, split_fine_grained
from ctc_beacon.beacon_emulation.emulation import (
	EmulationConfig,
	FrameRole,
	Variant,
	WaveformFrame,
	apply_cp_constraint,
	constrain_trajectory,
	emulate_bits,
	emulate_packet,
	emulate_unconstrained,
	frames_from_json,
	frames_to_json,
	make_supplementary,
	pad_bits,
	qam_quantize,
	synthesize_waveform,
)
from ctc_beacon.beacon_emulation.exceptions import ConfigurationError, LengthError, SchemaError, ShapeError
from ctc_beacon.beacon_emulation.utils import wrap_phase

ALL_SYMBOLS = list(itertools.product((0, 1), repeat=4))


def symbol_targets(bits, initial_phase=0.0):
	fine = split_fine_grained(bits_to_phase_ladders(bits, initial_phase))
	return fine.values, fine.end_phase


class TestEmulationConfig(unittest.TestCase):
	def test_geometry_at_20_mhz(self):
		config = EmulationConfig.cp_only(Variant.BASIC, sample_rate_hz=20e6)
		self.assertEqual(config.symbol_samples, 80)
		self.assertEqual(config.body_samples, 64)
		self.assertEqual(config.cp_samples, 16)
		self.assertEqual(config.slot_samples, 10)
		self.assertEqual(config.free_start, 60)
		self.assertIsNone(config.qam_order)

	def test_rejects_unsupported_values(self):
		with self.assertRaises(ConfigurationError):
			EmulationConfig(qam_order=8)
		with self.assertRaises(ConfigurationError):
			EmulationConfig(window_mode="narrow")
		with self.assertRaises(ConfigurationError):
			EmulationConfig(sample_rate_hz=15e6)
		with self.assertRaises(ConfigurationError):
			EmulationConfig(qam_order=64, window_mode="strict", sample_rate_hz=40e6)
		with self.assertRaises(ConfigurationError):
			EmulationConfig(constellation_scale=0)

	def test_strict_mode_uses_channel_offset(self):
		self.assertEqual(EmulationConfig(ble_channel=38).wifi_bin_offset, -3)
		self.assertEqual(EmulationConfig(ble_channel=39).wifi_bin_offset, 26)
		with self.assertRaises(ConfigurationError):
			EmulationConfig(ble_channel=37).wifi_bin_offset


class TestCpConstraint(unittest.TestCase):
	def setUp(self):
		self.config = EmulationConfig.cp_only(Variant.BASIC, sample_rate_hz=20e6)

	def test_cp_identity_for_every_symbol(self):
		for bits in ALL_SYMBOLS:
			targets, end = symbol_targets(bits)
			for variant in Variant:
				symbol = apply_cp_constraint(targets, variant, end_phase=end, config=self.config)
				np.testing.assert_allclose(symbol.phases[64:80], symbol.phases[0:16])
				self.assertEqual(symbol.bits, bits)

	def test_first_six_slots_follow_the_bits(self):
		for bits in ALL_SYMBOLS:
			targets, end = symbol_targets(bits)
			symbol = apply_cp_constraint(targets, Variant.BASIC, end_phase=end, config=self.config)
			x = symbol.constrained_ladders
			signs = [2 * b - 1 for b in bits]
			self.assertAlmostEqual(x[0] - symbol.opening, signs[0] * math.pi / 4)
			self.assertAlmostEqual(x[1] - x[0], signs[0] * math.pi / 4)
			self.assertAlmostEqual(x[3] - x[2], signs[1] * math.pi / 4)
			self.assertGreater(signs[2] * (x[5] - x[3]), 0)

	def test_basic_free_section_keeps_the_ladder(self):
		targets, end = symbol_targets((1, 0, 1, 0))
		symbol = apply_cp_constraint(targets, Variant.BASIC, end_phase=end, config=self.config)
		self.assertAlmostEqual(symbol.free_phase, symbol.constrained_ladders[5] - math.pi / 4)
		np.testing.assert_allclose(symbol.phases[60:64], symbol.free_phase)

	def test_adjusted_free_section_splits_the_margin(self):
		for bits in ALL_SYMBOLS:
			if bits[0] == bits[3]:
				continue
			targets, end = symbol_targets(bits)
			symbol = apply_cp_constraint(targets, Variant.ADJUSTED, end_phase=end, config=self.config)
			s2, s3 = 2 * bits[2] - 1, 2 * bits[3] - 1
			x = symbol.constrained_ladders
			self.assertTrue(symbol.needs_adjustment)

			before = s3 * float(wrap_phase(symbol.free_phase - x[5]))
			after = s3 * float(wrap_phase(x[0] - symbol.free_phase))
			self.assertAlmostEqual(before, after)
			margins = [
				before,
				s3 * float(wrap_phase(x[0] - x[5])),
				s2 * float(wrap_phase(x[4] - x[3])),
				s2 * float(wrap_phase(x[5] - x[4])),
			]
			self.assertGreaterEqual(min(margins), 3 * math.pi / 16 - 1e-9, bits)

	def test_adjusted_leaves_matching_symbols_alone(self):
		targets, end = symbol_targets((1, 1, 0, 1))
		basic = apply_cp_constraint(targets, Variant.BASIC, end_phase=end, config=self.config)
		adjusted = apply_cp_constraint(targets, Variant.ADJUSTED, end_phase=end, config=self.config)
		np.testing.assert_allclose(basic.phases, adjusted.phases)

	def test_symbol_junctions_clear_both_cp_values(self):
		bits = np.random.default_rng(24).integers(0, 2, 96)
		fine = split_fine_grained(bits_to_phase_ladders(bits))
		for variant in Variant:
			symbols = constrain_trajectory(fine, EmulationConfig.cp_only(variant, sample_rate_hz=20e6))
			for prev, nxt in zip(symbols, symbols[1:]):
				s0 = 2 * nxt.bits[0] - 1
				x0 = nxt.constrained_ladders[0]
				for held in prev.constrained_ladders[:2]:
					self.assertGreaterEqual(s0 * float(wrap_phase(x0 - held)), 3 * math.pi / 8 - 1e-9)

	def test_wrong_ladder_count(self):
		with self.assertRaises(ShapeError):
			apply_cp_constraint(np.zeros(6), Variant.BASIC, config=self.config)


class TestSupplementaryFrames(unittest.TestCase):
	def setUp(self):
		self.config = EmulationConfig.cp_only(Variant.ENHANCED, sample_rate_hz=20e6)

	def test_shift_and_prefix_repair(self):
		trajectory = np.arange(160, dtype=float)
		for delay, shift in ((200, 4), (300, 6)):
			out = make_supplementary(trajectory, delay, self.config)
			for start in (0, 80):
				row = trajectory[start : start + 80]
				expected = np.concatenate([row[64 - shift : 64], row[: 80 - shift]])
				np.testing.assert_array_equal(out[start : start + 80], expected)

	def test_cp_identity_survives_the_delay(self):
		bits = np.random.default_rng(21).integers(0, 2, 64)
		for frame in emulate_bits(bits, self.config):
			rows = frame.samples.reshape(-1, 80)
			np.testing.assert_allclose(rows[:, 64:80], rows[:, 0:16])

	def test_unsupported_delay(self):
		with self.assertRaises(ConfigurationError):
			make_supplementary(np.zeros(80), 250, self.config)
		with self.assertRaises(ShapeError):
			make_supplementary(np.zeros(70), 200, self.config)


class TestFrames(unittest.TestCase):
	def test_variant_frame_sets(self):
		bits = [1, 0, 1, 1, 0, 0, 1, 0]
		basic = emulate_bits(bits, EmulationConfig.cp_only(Variant.BASIC))
		enhanced = emulate_bits(bits, EmulationConfig.cp_only(Variant.ENHANCED))

		self.assertEqual([f.role for f in basic], [FrameRole.BEACON1])
		self.assertEqual([f.role for f in enhanced], [FrameRole.BEACON1, FrameRole.BEACON2, FrameRole.BEACON3])
		self.assertEqual([f.built_in_delay_ns for f in enhanced], [0, 200, 300])
		self.assertEqual(enhanced[0].samples.size, 2 * 80)
		np.testing.assert_allclose(np.abs(enhanced[1].samples), 1.0)

	def test_padding_repeats_last_bit(self):
		np.testing.assert_array_equal(pad_bits([1, 0, 1, 0, 0, 1]), [1, 0, 1, 0, 0, 1, 1, 1])
		frame = emulate_bits([1, 0, 1, 0, 0, 1], EmulationConfig.cp_only(Variant.BASIC))[0]
		self.assertEqual(frame.bit_count, 8)
		self.assertEqual(frame.symbol_count, 2)
		with self.assertRaises(LengthError):
			pad_bits([])

	def test_packet_cp_identity_over_random_packets(self):
		config = EmulationConfig.cp_only(Variant.ENHANCED)
		rng = np.random.default_rng(22)
		for _ in range(25):
			bits = rng.integers(0, 2, 368)
			for frame in emulate_bits(bits, config):
				rows = frame.samples.reshape(-1, 80)
				np.testing.assert_allclose(rows[:, 64:80], rows[:, 0:16])

	def test_unconstrained_reference(self):
		frame = emulate_unconstrained([1, 1, 1, 1], EmulationConfig.cp_only(Variant.BASIC))
		phases = np.angle(frame.samples[::10])
		np.testing.assert_allclose(np.cos(phases), np.cos(np.arange(1, 9) * math.pi / 4), atol=1e-12)

	def test_json_and_float32_export(self):
		frames = emulate_packet(canonical_packet(), EmulationConfig.cp_only(Variant.ENHANCED))
		restored = frames_from_json(frames_to_json(frames))
		self.assertEqual([f.role for f in restored], [f.role for f in frames])
		np.testing.assert_allclose(restored[2].samples, frames[2].samples)
		self.assertEqual(restored[2].built_in_delay_ns, 300)

		raw = np.frombuffer(frames[0].to_float32(), dtype="<f4")
		self.assertEqual(raw.size, 2 * frames[0].samples.size)
		np.testing.assert_allclose(raw[0::2], frames[0].samples.real, atol=1e-6)

		with self.assertRaises(SchemaError):
			frames_from_json('{"frames": [{"role": "beacon1"}]}')
		with self.assertRaises(SchemaError):
			WaveformFrame.from_json({"role": "beacon9"})


class TestQamQuantization(unittest.TestCase):
	def setUp(self):
		bits = np.random.default_rng(23).integers(0, 2, 4)
		targets, end = symbol_targets(bits)
		trajectory = apply_cp_constraint(targets, Variant.ADJUSTED, end_phase=end).phases
		self.symbol = synthesize_waveform(trajectory)

	def test_quantized_symbol_keeps_cp_identity(self):
		config = EmulationConfig(Variant.ADJUSTED, qam_order=64, window_mode="all")
		out, evm = qam_quantize(self.symbol, config)
		self.assertEqual(out.shape, (80,))
		np.testing.assert_allclose(out[64:80], out[0:16], atol=1e-12)
		self.assertGreater(evm, 0)

	def test_evm_does_not_grow_with_order(self):
		evms = [
			qam_quantize(self.symbol, EmulationConfig(Variant.ADJUSTED, qam_order=order, window_mode="all"))[1]
			for order in (4, 16, 64)
		]
		self.assertLessEqual(evms[1], evms[0] + 1e-12)
		self.assertLessEqual(evms[2], evms[1] + 1e-12)

	def test_fixed_scale(self):
		config = EmulationConfig(Variant.ADJUSTED, qam_order=4, window_mode="all", constellation_scale=1.0)
		out, _ = qam_quantize(self.symbol, config)
		spectrum = fft.fft(out[16:], norm="ortho")
		np.testing.assert_allclose(np.abs(spectrum.real), 1 / math.sqrt(2), atol=1e-9)
		np.testing.assert_allclose(np.abs(spectrum.imag), 1 / math.sqrt(2), atol=1e-9)

	def test_band_window_follows_the_channel_plan(self):
		for channel in (38, 39):
			config = EmulationConfig(qam_order=64, window_mode="band", ble_channel=channel)
			self.assertEqual(config.subcarrier_window, (61, 62, 63, 0, 1, 2, 3))
		self.assertEqual(len(EmulationConfig(qam_order=64, window_mode="all").subcarrier_window), 64)

	def test_band_mode_leaves_out_of_band_bins(self):
		config = EmulationConfig(Variant.ADJUSTED, qam_order=64, window_mode="band", ble_channel=38)
		out, evm = qam_quantize(self.symbol, config)
		np.testing.assert_allclose(out[64:80], out[0:16], atol=1e-12)

		before = fft.fft(self.symbol[16:], norm="ortho")
		after = fft.fft(out[16:], norm="ortho")
		outside = [b for b in range(64) if b not in config.subcarrier_window]
		np.testing.assert_allclose(after[outside], before[outside], atol=1e-12)

		# in-band bins sit on one square grid: odd multiples of a shared base level
		inside = after[list(config.subcarrier_window)]
		base = np.min(np.abs(np.concatenate([inside.real, inside.imag])))
		levels = np.concatenate([inside.real, inside.imag]) / base
		np.testing.assert_allclose(np.abs(levels - np.rint(levels)), 0, atol=1e-9)
		np.testing.assert_allclose(np.mod(np.rint(levels), 2), 1)
		self.assertGreater(evm, 0)
		full = qam_quantize(self.symbol, EmulationConfig(Variant.ADJUSTED, qam_order=64, window_mode="all"))[1]
		self.assertLess(evm, full)

	def test_strict_mode_writes_nulls_and_pilots(self):
		config = EmulationConfig(Variant.ADJUSTED, qam_order=16, window_mode="strict", ble_channel=38)
		out, _ = qam_quantize(self.symbol, config)
		spectrum = fft.fft(out[16:], norm="ortho")
		offset = config.wifi_bin_offset
		for wifi_bin in (0, 27, -32):
			self.assertAlmostEqual(abs(spectrum[(wifi_bin - offset) % 64]), 0.0, places=9)
		self.assertAlmostEqual(spectrum[(21 - offset) % 64], -1.0, places=9)
		self.assertAlmostEqual(spectrum[(7 - offset) % 64], 1.0, places=9)

	def test_quantization_off_or_wrong_length(self):
		with self.assertRaises(ConfigurationError):
			qam_quantize(self.symbol, EmulationConfig.cp_only(Variant.BASIC))
		with self.assertRaises(ShapeError):
			qam_quantize(self.symbol[:64], EmulationConfig(qam_order=4))

	def test_frame_evm_reported(self):
		frames = emulate_bits([1, 0, 0, 1, 1, 1, 0, 0], EmulationConfig(Variant.BASIC, qam_order=64, window_mode="all"))
		self.assertGreater(frames[0].evm, 0)
		cp_only = emulate_bits([1, 0, 0, 1, 1, 1, 0, 0], EmulationConfig.cp_only(Variant.BASIC))
		self.assertEqual(cp_only[0].evm, 0.0)


if __name__ == "__main__":
	unittest.main()
