# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
BLE link layer for iBeacon advertisements

Builds bit-exact advertising packets (preamble, access address, PDU, CRC-24,
whitening) and turns their on-air bits into the square-FSK phase ladders that
the WiFi emulator has to reproduce.

iBeacon advertising data (30 bytes):
    Offset  Length  Value       Description
    0-2     3       02 01 06    Flags AD (LE General Discoverable, BR/EDR not supported)
    3-4     2       1A FF       Manufacturer Specific AD header (length 26)
    5-6     2       4C 00       Apple Company ID (little-endian)
    7       1       0x02        iBeacon type
    8       1       0x15        Length (21 bytes following)
    9-24    16      [UUID]      Proximity UUID (big-endian)
    25-26   2       [Major]     Major value (big-endian)
    27-28   2       [Minor]     Minor value (big-endian)
    29      1       [TxPower]   Measured power at 1 m (signed int8)
"""

import math
import struct
import uuid as uuid_lib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ctc_beacon.beacon_emulation.exceptions import LengthError, SchemaError, ValidationError
from ctc_beacon.beacon_emulation.utils import get_settings, throw

APPLE_COMPANY_ID = 0x004C
IBEACON_TYPE = 0x02
IBEACON_DATA_LENGTH = 0x15
FLAGS_AD = bytes([0x02, 0x01, 0x06])
MANUFACTURER_AD_HEADER = bytes([0x1A, 0xFF])

ADVERTISING_ACCESS_ADDRESS = 0x8E89BED6
PREAMBLE = 0xAA
CRC_INIT = 0x555555
CRC_POLY = 0x00065B  # x^24 + x^10 + x^9 + x^6 + x^4 + x^3 + x + 1, shifted form
MAX_AD_PAYLOAD = 31
ADVERTISING_CHANNELS = (37, 38, 39)
CHANNEL_FREQUENCY_MHZ = {37: 2402, 38: 2426, 39: 2480}

DEFAULT_UUID = "E2C56DB5-DFFB-48D2-B060-D0F5A71096E0"
DEFAULT_ADV_ADDRESS = bytes.fromhex("0a0b0c0d0ec0")

HALF_PI = math.pi / 2
QUARTER_PI = math.pi / 4
COARSE_LADDER_S = 1e-6
FINE_LADDER_S = 0.5e-6


class AdvertisingPDUType(IntEnum):
	ADV_IND = 0x00
	ADV_DIRECT_IND = 0x01
	ADV_NONCONN_IND = 0x02
	SCAN_REQ = 0x03
	SCAN_RSP = 0x04
	CONNECT_IND = 0x05
	ADV_SCAN_IND = 0x06


# ==================== IDENTITY ====================


@dataclass(frozen=True)
class IBeaconIdentity:
	"""
	The identity an iBeacon advertises, which is also what an attacker harvests

	Attributes:
	    proximity_uuid: 16 raw bytes
	    major: Group identifier (0-65535)
	    minor: Device identifier within the group (0-65535)
	    tx_power_ref: Measured power at 1 m in dBm, -127..0
	"""

	proximity_uuid: bytes
	major: int
	minor: int
	tx_power_ref: int

	def __post_init__(self):
		if not isinstance(self.proximity_uuid, bytes | bytearray) or len(self.proximity_uuid) != 16:
			throw("Proximity UUID must be exactly 16 bytes", LengthError)
		if not 0 <= int(self.major) <= 0xFFFF:
			throw(f"Major must be 0-65535, got {self.major}")
		if not 0 <= int(self.minor) <= 0xFFFF:
			throw(f"Minor must be 0-65535, got {self.minor}")
		if not -127 <= int(self.tx_power_ref) <= 0:
			throw(f"TX power reference must be -127..0 dBm, got {self.tx_power_ref}")

	@property
	def uuid_text(self):
		return str(uuid_lib.UUID(bytes=bytes(self.proximity_uuid))).upper()

	@property
	def beacon_id(self):
		"""Key a receiver uses to tell iBeacons apart"""
		return f"{self.uuid_text}:{self.major}:{self.minor}"

	def with_power_ref(self, tx_power_ref):
		"""Same identity carrying a different (possibly forged) power byte"""
		return IBeaconIdentity(self.proximity_uuid, self.major, self.minor, int(tx_power_ref))

	def manufacturer_data(self):
		"""25-byte manufacturer-specific data (company id + iBeacon frame)"""
		return struct.pack("<H", APPLE_COMPANY_ID) + struct.pack(
			">BB16sHHb",
			IBEACON_TYPE,
			IBEACON_DATA_LENGTH,
			bytes(self.proximity_uuid),
			int(self.major),
			int(self.minor),
			int(self.tx_power_ref),
		)

	def to_json(self):
		return {
			"uuid": self.uuid_text,
			"major": int(self.major),
			"minor": int(self.minor),
			"tx_power_ref": int(self.tx_power_ref),
		}

	@classmethod
	def from_json(cls, data):
		"""
		Build an identity from {uuid, major, minor, tx_power_ref}

		Raises:
		    SchemaError: missing keys, wrong types or a UUID that is not 16 bytes
		    ValidationError: values outside their ranges
		"""
		if not isinstance(data, dict):
			raise SchemaError("iBeacon identity must be a JSON object")

		missing = [k for k in ("uuid", "major", "minor", "tx_power_ref") if k not in data]
		if missing:
			raise SchemaError(f"iBeacon identity is missing: {', '.join(missing)}")

		hex_str = str(data["uuid"]).replace("-", "")
		if len(hex_str) != 32:
			raise SchemaError(f"uuid must be 32 hex characters, got {len(hex_str)}")
		try:
			uuid_bytes = bytes.fromhex(hex_str)
		except ValueError as e:
			raise SchemaError(f"uuid has invalid hex characters: {e}")

		for key in ("major", "minor", "tx_power_ref"):
			if isinstance(data[key], bool) or not isinstance(data[key], int):
				raise SchemaError(f"{key} must be an integer")

		return cls(uuid_bytes, data["major"], data["minor"], data["tx_power_ref"])


def default_identity(major=1, minor=1, tx_power_ref=-64):
	return IBeaconIdentity(bytes.fromhex(DEFAULT_UUID.replace("-", "")), major, minor, tx_power_ref)


def build_ibeacon_payload(identity):
	"""
	Build the 30-byte advertising data of an iBeacon

	Args:
	    identity: IBeaconIdentity

	Returns:
	    bytes: flags AD followed by the manufacturer-specific AD
	"""
	return FLAGS_AD + MANUFACTURER_AD_HEADER + identity.manufacturer_data()


# ==================== BIT HELPERS ====================


def bytes_to_bits(data):
	"""Bytes to a uint8 bit array, least significant bit of each byte first (BLE order)"""
	return np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8), bitorder="little")


def bits_to_bytes(bits):
	bits = np.asarray(bits, dtype=np.uint8)
	if bits.size % 8:
		throw(f"Bit count {bits.size} is not a whole number of bytes", LengthError)
	return np.packbits(bits, bitorder="little").tobytes()


def crc24(pdu_bits, init=CRC_INIT):
	"""
	BLE CRC-24 over PDU bits

	Args:
	    pdu_bits: Header + payload bits in on-air order
	    init: Shift register preset (0x555555 on advertising channels)

	Returns:
	    np.ndarray: 24 CRC bits in transmission order
	"""
	state = init & 0xFFFFFF
	for bit in np.asarray(pdu_bits, dtype=np.uint8):
		feedback = ((state >> 23) & 1) ^ int(bit)
		state = (state << 1) & 0xFFFFFF
		if feedback:
			state ^= CRC_POLY
	return np.array([(state >> (23 - i)) & 1 for i in range(24)], dtype=np.uint8)


def whitening_sequence(channel_index, length):
	"""Output of the 7-bit whitening LFSR seeded with the channel index"""
	# positions 0..6: position 0 preset to 1, positions 1..6 take channel bits 5..0
	reg = [1] + [(int(channel_index) >> (5 - j)) & 1 for j in range(6)]
	out = np.empty(int(length), dtype=np.uint8)
	for i in range(int(length)):
		out[i] = reg[6]
		reg = [reg[6], reg[0], reg[1], reg[2], reg[3] ^ reg[6], reg[4], reg[5]]
	return out


def whiten(bits, channel_index):
	"""Whitening and de-whitening are the same XOR"""
	bits = np.asarray(bits, dtype=np.uint8)
	return bits ^ whitening_sequence(channel_index, bits.size)


# ==================== PACKETS ====================


@dataclass(frozen=True)
class AdvertisingPacket:
	channel_index: int
	preamble: int
	access_address: int
	pdu_header: bytes
	adv_address: bytes
	ad_payload: bytes
	crc: bytes
	whitened_bits: tuple

	@property
	def bits(self):
		"""On-air bits as a uint8 array"""
		return np.asarray(self.whitened_bits, dtype=np.uint8)

	@property
	def bit_count(self):
		return len(self.whitened_bits)

	@property
	def pdu_type(self):
		return AdvertisingPDUType(self.pdu_header[0] & 0x0F)


def _check_channel(channel_index):
	if channel_index not in ADVERTISING_CHANNELS:
		throw(f"Advertising channel must be one of {ADVERTISING_CHANNELS}, got {channel_index}")


def assemble_packet(payload, adv_address=DEFAULT_ADV_ADDRESS, channel_index=None, pdu_type=None, tx_add=1):
	"""
	Frame advertising data as an on-air BLE packet

	Args:
	    payload: Advertising data, at most 31 bytes
	    adv_address: 6-byte advertiser address in on-air (little-endian) order
	    channel_index: 37, 38 or 39 (settings default when omitted)
	    pdu_type: Header PDU type (settings default, ADV_NONCONN_IND)
	    tx_add: TxAdd header bit (1 = random address)

	Returns:
	    AdvertisingPacket
	"""
	settings = get_settings()
	channel_index = settings.ble_channel if channel_index is None else int(channel_index)
	pdu_type = settings.adv_pdu_type if pdu_type is None else int(pdu_type)
	payload = bytes(payload)
	adv_address = bytes(adv_address)

	_check_channel(channel_index)
	if len(payload) > MAX_AD_PAYLOAD:
		throw(f"Advertising payload is {len(payload)} bytes, limit is {MAX_AD_PAYLOAD}", LengthError)
	if len(adv_address) != 6:
		throw("Advertiser address must be 6 bytes", LengthError)

	header = bytes([(pdu_type & 0x0F) | ((tx_add & 1) << 6), len(adv_address) + len(payload)])
	pdu_bits = bytes_to_bits(header + adv_address + payload)
	crc_bits = crc24(pdu_bits)

	on_air = np.concatenate(
		[
			bytes_to_bits(bytes([PREAMBLE])),
			bytes_to_bits(struct.pack("<I", ADVERTISING_ACCESS_ADDRESS)),
			whiten(np.concatenate([pdu_bits, crc_bits]), channel_index),
		]
	)

	return AdvertisingPacket(
		channel_index=channel_index,
		preamble=PREAMBLE,
		access_address=ADVERTISING_ACCESS_ADDRESS,
		pdu_header=header,
		adv_address=adv_address,
		ad_payload=payload,
		crc=bits_to_bytes(crc_bits),
		whitened_bits=tuple(int(b) for b in on_air),
	)


def check_crc(on_air_bits, channel_index):
	"""True when de-whitened on-air bits carry a valid CRC"""
	bits = np.asarray(on_air_bits, dtype=np.uint8)
	if bits.size < 40 + 16 + 24:
		return False
	body = whiten(bits[40:], channel_index)
	return bool(np.array_equal(crc24(body[:-24]), body[-24:]))


def parse_packet(on_air_bits, channel_index, verify=True):
	"""
	Recover an AdvertisingPacket from its on-air bits

	Args:
	    on_air_bits: Whitened bits starting at the preamble
	    channel_index: Channel the bits were whitened for
	    verify: Raise on CRC mismatch

	Returns:
	    AdvertisingPacket
	"""
	_check_channel(channel_index)
	bits = np.asarray(on_air_bits, dtype=np.uint8)
	if bits.size < 40 + 16 + 24 or bits.size % 8:
		throw(f"{bits.size} bits cannot hold an advertising packet", LengthError)

	preamble = bits_to_bytes(bits[:8])[0]
	access_address = struct.unpack("<I", bits_to_bytes(bits[8:40]))[0]
	body = whiten(bits[40:], channel_index)
	header = bits_to_bytes(body[:16])
	length = header[1] & 0x3F

	if body.size != 16 + 8 * length + 24:
		throw(f"Header length {length} does not match {body.size} PDU+CRC bits", LengthError)
	if length < 6:
		throw(f"Header length {length} is shorter than the advertiser address", LengthError)

	pdu = bits_to_bytes(body[: 16 + 8 * length])
	crc_bits = body[-24:]
	if verify and not np.array_equal(crc24(body[:-24]), crc_bits):
		throw("CRC-24 mismatch", ValidationError)

	return AdvertisingPacket(
		channel_index=int(channel_index),
		preamble=int(preamble),
		access_address=int(access_address),
		pdu_header=pdu[:2],
		adv_address=pdu[2:8],
		ad_payload=pdu[8:],
		crc=bits_to_bytes(crc_bits),
		whitened_bits=tuple(int(b) for b in bits),
	)


def canonical_packet(identity=None, channel_index=None):
	"""The iBeacon packet used by PRR experiments"""
	identity = identity or default_identity()
	return assemble_packet(build_ibeacon_payload(identity), channel_index=channel_index)


def packet_to_json(packet):
	"""Hex-string view of a packet for golden files"""
	return {
		"channel_index": packet.channel_index,
		"preamble": f"{packet.preamble:02x}",
		"access_address": f"{packet.access_address:08x}",
		"pdu_header": packet.pdu_header.hex(),
		"adv_address": packet.adv_address.hex(),
		"ad_payload": packet.ad_payload.hex(),
		"crc": packet.crc.hex(),
		"on_air": bits_to_bytes(packet.bits).hex(),
		"bit_count": packet.bit_count,
	}


def packet_from_json(data):
	try:
		bits = bytes_to_bits(bytes.fromhex(data["on_air"]))
		return parse_packet(bits, int(data["channel_index"]))
	except (KeyError, TypeError, ValueError) as e:
		if isinstance(e, ValidationError):
			raise
		raise SchemaError(f"Packet JSON needs 'on_air' hex and 'channel_index': {e}")


# ==================== PHASE LADDERS ====================


@dataclass(frozen=True, eq=False)
class PhaseLadderSequence:
	"""
	Piecewise-constant FSK phase of a bit stream

	values[j] is the phase at the start of ladder j; end_phase is where the
	last ladder's ramp arrives.
	"""

	ladder_duration: float
	values: np.ndarray
	initial_phase: float
	end_phase: float

	def __len__(self):
		return int(self.values.size)

	@property
	def is_fine(self):
		return math.isclose(self.ladder_duration, FINE_LADDER_S)

	def boundaries(self):
		"""Phase at every ladder boundary, end phase included"""
		return np.append(self.values, self.end_phase)


def bits_to_phase_ladders(bits, initial_phase=0.0):
	"""
	Convert on-air bits to 1 µs phase ladders

	Bit 1 advances the phase by +pi/2 over its microsecond, bit 0 by -pi/2
	(modulation index 0.5, square FSK).

	Args:
	    bits: Nonempty 0/1 sequence
	    initial_phase: Phase before the first bit (radians)

	Returns:
	    PhaseLadderSequence with 1 µs ladders
	"""
	bits = np.asarray(bits, dtype=np.int64)
	if bits.size == 0:
		throw("Cannot build phase ladders from an empty bit sequence", LengthError)
	if np.any((bits != 0) & (bits != 1)):
		throw("Bits must be 0 or 1")

	steps = (2 * bits - 1) * HALF_PI
	phases = float(initial_phase) + np.concatenate(([0.0], np.cumsum(steps)))
	return PhaseLadderSequence(COARSE_LADDER_S, phases[:-1], float(initial_phase), float(phases[-1]))


def split_fine_grained(seq):
	"""
	Split every 1 µs ladder into two 0.5 µs ladders

	The inserted ladder sits halfway, so every fine step is +-pi/4.
	"""
	if not math.isclose(seq.ladder_duration, COARSE_LADDER_S):
		throw(f"Expected 1 µs ladders, got {seq.ladder_duration * 1e6:g} µs")

	starts = seq.values
	halfway = starts + np.diff(seq.boundaries()) / 2
	fine = np.empty(starts.size * 2)
	fine[0::2] = starts
	fine[1::2] = halfway
	return PhaseLadderSequence(FINE_LADDER_S, fine, seq.initial_phase, seq.end_phase)


def ladder_bits(seq):
	"""Bits encoded by a ladder sequence (sign of each bit's phase advance)"""
	per_bit = 2 if seq.is_fine else 1
	edges = seq.boundaries()[::per_bit]
	return (np.diff(edges) > 0).astype(np.uint8)
