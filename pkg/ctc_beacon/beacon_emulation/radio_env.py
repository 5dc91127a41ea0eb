# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
Radio environment: WiFi/BLE channel coordination and the log-distance RSS model
that turns source placements into per-packet observations.
"""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ctc_beacon.beacon_emulation.ble_link import CHANNEL_FREQUENCY_MHZ, IBeaconIdentity
from ctc_beacon.beacon_emulation.exceptions import ConfigurationError, SchemaError, ValidationError
from ctc_beacon.beacon_emulation.utils import get_settings, keyed_rng, logger, throw

WIFI_CHANNELS = tuple(range(1, 14))
WIFI_HALF_WIDTH_MHZ = 10.0
BLE_HALF_WIDTH_MHZ = 1.0
SUBCARRIER_SPACING_MHZ = 0.3125
BLE_HALF_BAND_BINS = 3


def wifi_center_mhz(channel):
	if channel not in WIFI_CHANNELS:
		throw(f"WiFi channel must be 1-13, got {channel}")
	return 2407 + 5 * channel


# ==================== CHANNEL PLAN ====================


@dataclass(frozen=True)
class ChannelPlan:
	"""BLE advertising channel -> WiFi channel whose band covers it (None when no channel does)"""

	mapping: dict = field(default_factory=lambda: {37: None, 38: 4, 39: 13})

	@classmethod
	def default(cls):
		return cls()

	@staticmethod
	def overlap_mhz(ble_channel, wifi_channel):
		"""Width of the spectrum shared by a 2 MHz BLE channel and a 20 MHz WiFi channel"""
		ble = CHANNEL_FREQUENCY_MHZ[ble_channel]
		wifi = wifi_center_mhz(wifi_channel)
		low = max(ble - BLE_HALF_WIDTH_MHZ, wifi - WIFI_HALF_WIDTH_MHZ)
		high = min(ble + BLE_HALF_WIDTH_MHZ, wifi + WIFI_HALF_WIDTH_MHZ)
		return max(0.0, high - low)

	@classmethod
	def derive(cls):
		"""
		Rebuild the plan from the band edges

		A WiFi channel qualifies when it covers the whole BLE band; among those the
		one whose center is closest to the BLE center wins.
		"""
		mapping = {}
		for ble_channel, ble_center in CHANNEL_FREQUENCY_MHZ.items():
			covering = [
				ch for ch in WIFI_CHANNELS if math.isclose(cls.overlap_mhz(ble_channel, ch), 2 * BLE_HALF_WIDTH_MHZ)
			]
			mapping[ble_channel] = (
				min(covering, key=lambda ch: (abs(wifi_center_mhz(ch) - ble_center), ch)) if covering else None
			)
		return cls(mapping)

	def wifi_channel(self, ble_channel):
		if ble_channel not in self.mapping:
			throw(f"Unknown BLE advertising channel {ble_channel}")
		return self.mapping[ble_channel]

	def coverage(self):
		"""Share of advertising channels a WiFi source can reach"""
		return sum(1 for ch in self.mapping.values() if ch is not None) / len(self.mapping)

	def subcarrier_offset(self, ble_channel):
		"""WiFi subcarrier index of the BLE center frequency"""
		wifi = self.wifi_channel(ble_channel)
		if wifi is None:
			raise ConfigurationError(f"No WiFi channel covers BLE channel {ble_channel}")
		return int(round((CHANNEL_FREQUENCY_MHZ[ble_channel] - wifi_center_mhz(wifi)) / SUBCARRIER_SPACING_MHZ))

	def subcarrier_window(self, ble_channel):
		"""WiFi subcarrier indices inside the BLE channel's +-1 MHz"""
		center = self.subcarrier_offset(ble_channel)
		return tuple(range(center - BLE_HALF_BAND_BINS, center + BLE_HALF_BAND_BINS + 1))


# ==================== PROPAGATION ====================


class SourceKind(str, Enum):
	IBEACON = "ibeacon"
	WIFI_AP = "wifi_ap"


@dataclass(frozen=True)
class PathLossModel:
	"""
	Log-distance path loss with per-class shadowing

	Attributes:
	    exponent: Propagation factor n (> 0)
	    sigma_beacon_db: Shadowing std-dev for iBeacon sources
	    sigma_ap_db: Shadowing std-dev for WiFi AP sources
	    min_distance_m: Distances below this are clamped
	"""

	exponent: float = None
	sigma_beacon_db: float = None
	sigma_ap_db: float = None
	min_distance_m: float = None

	def __post_init__(self):
		settings = get_settings()
		for name, default in (
			("exponent", settings.path_loss_exponent),
			("sigma_beacon_db", settings.sigma_beacon_db),
			("sigma_ap_db", settings.sigma_ap_db),
			("min_distance_m", settings.distance_clamp_m),
		):
			if getattr(self, name) is None:
				object.__setattr__(self, name, float(default))

		if self.exponent <= 0:
			throw(f"Path loss exponent must be > 0, got {self.exponent}")
		if self.sigma_beacon_db < 0 or self.sigma_ap_db < 0:
			throw("Shadowing sigma must be >= 0")
		if self.min_distance_m <= 0:
			throw("Distance clamp must be > 0")

	def sigma_for(self, kind):
		return self.sigma_ap_db if SourceKind(kind) is SourceKind.WIFI_AP else self.sigma_beacon_db

	def mean_rss(self, true_power, distance):
		return true_power - 10 * self.exponent * math.log10(distance)

	def with_sigma(self, sigma_beacon_db=None, sigma_ap_db=None):
		return PathLossModel(
			self.exponent,
			self.sigma_beacon_db if sigma_beacon_db is None else sigma_beacon_db,
			self.sigma_ap_db if sigma_ap_db is None else sigma_ap_db,
			self.min_distance_m,
		)

	@classmethod
	def from_json(cls, data):
		data = data or {}
		if not isinstance(data, dict):
			raise SchemaError("model must be an object")
		unknown = set(data) - {"n", "sigma_beacon", "sigma_ap", "min_distance"}
		if unknown:
			raise SchemaError(f"Unknown model keys: {', '.join(sorted(unknown))}")
		return cls(data.get("n"), data.get("sigma_beacon"), data.get("sigma_ap"), data.get("min_distance"))

	def to_json(self):
		return {
			"n": self.exponent,
			"sigma_beacon": self.sigma_beacon_db,
			"sigma_ap": self.sigma_ap_db,
			"min_distance": self.min_distance_m,
		}


@dataclass(frozen=True)
class Placement:
	"""
	A transmitter on the floor plan

	Attributes:
	    source_id: Handle used only for ground truth
	    position: (x, y) in meters
	    kind: ibeacon or wifi_ap
	    true_power: p_0, RSS at 1 m (dBm)
	    advertised_ref: p_f, power byte carried in the packets (dBm)
	    impersonated_ids: Identities broadcast by this source
	    interval_s: Advertising interval
	    prr: Packet reception ratio of the source's PHY
	    scan_coverage: Share of advertising channels the victim can hear it on
	"""

	source_id: str
	position: tuple
	kind: SourceKind
	true_power: float
	advertised_ref: float
	impersonated_ids: tuple = ()
	interval_s: float = None
	prr: float = None
	scan_coverage: float = None

	def __post_init__(self):
		settings = get_settings()
		object.__setattr__(self, "kind", SourceKind(self.kind))
		object.__setattr__(self, "position", tuple(float(v) for v in self.position))
		object.__setattr__(self, "impersonated_ids", tuple(self.impersonated_ids))
		is_ap = self.kind is SourceKind.WIFI_AP

		if self.interval_s is None:
			object.__setattr__(self, "interval_s", settings.advertising_interval_s)
		if self.prr is None:
			object.__setattr__(self, "prr", settings.fake_prr if is_ap else 1.0)
		if self.scan_coverage is None:
			object.__setattr__(self, "scan_coverage", settings.scan_coverage_ap if is_ap else settings.scan_coverage_beacon)

		if len(self.position) != 2:
			throw(f"Position of {self.source_id} must be (x, y)")
		if not is_ap and len(self.impersonated_ids) != 1:
			throw(f"iBeacon {self.source_id} must advertise exactly its own identity")
		if self.interval_s <= 0:
			throw("Advertising interval must be > 0")
		if not (0 <= self.prr <= 1 and 0 <= self.scan_coverage <= 1):
			throw(f"PRR and scan coverage of {self.source_id} must lie in [0, 1]")

	@property
	def survival_probability(self):
		return self.prr * self.scan_coverage

	def with_ids(self, identities, advertised_ref=None):
		return Placement(
			self.source_id,
			self.position,
			self.kind,
			self.true_power,
			self.advertised_ref if advertised_ref is None else advertised_ref,
			tuple(identities),
			self.interval_s,
			self.prr,
			self.scan_coverage,
		)


@dataclass(frozen=True)
class RssObservation:
	beacon_id: str
	rss: float
	embedded_ref: float
	timestamp: float
	# ground truth for reports; estimators never read it
	origin: str = field(compare=False, default="")


def distance_between(a, b):
	return math.hypot(a[0] - b[0], a[1] - b[1])


def _clamped_distance(source, receiver_pos, model):
	d = distance_between(source.position, receiver_pos)
	if d < model.min_distance_m:
		logger("radio_env").warning(
			f"Receiver at {tuple(receiver_pos)} is {d:.3f} m from {source.source_id}; "
			f"clamped to {model.min_distance_m} m"
		)
		d = model.min_distance_m
	return d


def rss_at(source, receiver_pos, model, rng=None):
	"""
	RSS of one packet from `source` at `receiver_pos`

	Args:
	    source: Placement
	    receiver_pos: (x, y) in meters
	    model: PathLossModel
	    rng: numpy Generator for shadowing; None gives the mean

	Returns:
	    float: dBm
	"""
	mean = model.mean_rss(source.true_power, _clamped_distance(source, receiver_pos, model))
	sigma = model.sigma_for(source.kind)
	if rng is None or sigma == 0:
		return float(mean)
	return float(mean + sigma * rng.standard_normal())


def packets_per_window(window_s, interval_s):
	return int(math.floor(window_s / interval_s + 1e-9))


def observe_window(sources, receiver_pos, model, window_s, seed, keys=(), start_time=0.0, scan_coverage=None):
	"""
	Packets a victim hears during one scan window

	Every source draws from its own generator keyed by (seed, keys, source index), so
	adding or removing one source never changes what the others produce.

	Args:
	    sources: Placements
	    receiver_pos: Victim position
	    model: PathLossModel
	    window_s: Window length, at least one interval of every source
	    seed: Root seed
	    keys: Extra integers keying the draw (evaluation point, trial)
	    start_time: Timestamp of the first packet
	    scan_coverage: Optional override of every source's coverage

	Returns:
	    list[RssObservation] sorted by timestamp, then source order
	"""
	observations = []
	for index, source in enumerate(sources):
		count = packets_per_window(window_s, source.interval_s)
		if count < 1:
			throw(f"Window of {window_s} s is shorter than the {source.interval_s} s interval of {source.source_id}")

		coverage = source.scan_coverage if scan_coverage is None else scan_coverage
		survival = source.prr * coverage
		ids = source.impersonated_ids
		rng = keyed_rng(seed, *keys, index)
		survived = rng.random((count, len(ids))) < survival
		shadowing = rng.standard_normal((count, len(ids))) * model.sigma_for(source.kind)
		mean = model.mean_rss(source.true_power, _clamped_distance(source, receiver_pos, model))

		for k in range(count):
			timestamp = start_time + k * source.interval_s
			for j, identity in enumerate(ids):
				if survived[k, j]:
					observations.append(
						(
							timestamp,
							index,
							j,
							RssObservation(
								identity.beacon_id,
								float(mean + shadowing[k, j]),
								float(source.advertised_ref),
								timestamp,
								source.source_id,
							),
						)
					)

	observations.sort(key=lambda item: item[:3])
	return [item[3] for item in observations]


@dataclass(frozen=True)
class RssiRangeReport:
	power_levels: tuple
	distances: tuple
	grid: np.ndarray

	@property
	def minimum(self):
		return float(self.grid.min())

	@property
	def maximum(self):
		return float(self.grid.max())

	def rows(self):
		for i, level in enumerate(self.power_levels):
			for j, distance in enumerate(self.distances):
				yield level, distance, float(self.grid[i, j])


def rssi_range_report(kind, distances, power_levels, model):
	"""
	Mean RSS over a (power level, distance) sweep

	Args:
	    kind: SourceKind of the transmitter
	    distances: Receiver distances in meters
	    power_levels: True powers p_0 in dBm
	    model: PathLossModel

	Returns:
	    RssiRangeReport with the mean-RSS grid and its overall min/max
	"""
	if len(distances) == 0 or len(power_levels) == 0:
		throw("RSSI range sweep needs at least one distance and one power level")

	SourceKind(kind)
	d = np.maximum(np.asarray(distances, dtype=float), model.min_distance_m)
	levels = np.asarray(power_levels, dtype=float)
	grid = levels[:, np.newaxis] - 10 * model.exponent * np.log10(d)[np.newaxis, :]
	return RssiRangeReport(tuple(levels.tolist()), tuple(np.asarray(distances, dtype=float).tolist()), grid)


# ==================== DEPLOYMENT JSON ====================


def _position(entry, name):
	try:
		return float(entry["x"]), float(entry["y"])
	except (KeyError, TypeError, ValueError):
		raise SchemaError(f"{name} needs numeric 'x' and 'y'")


def beacon_from_json(entry, index):
	"""iBeacon placement from {id, x, y, identity, true_power?}"""
	if not isinstance(entry, dict):
		raise SchemaError(f"beacons[{index}] must be an object")
	name = str(entry.get("id", f"beacon{index + 1}"))
	identity = IBeaconIdentity.from_json(entry.get("identity"))
	true_power = float(entry.get("true_power", identity.tx_power_ref))
	return Placement(
		name,
		_position(entry, name),
		SourceKind.IBEACON,
		true_power,
		float(identity.tx_power_ref),
		(identity,),
		entry.get("interval"),
	)


def ap_from_json(entry, index):
	"""WiFi AP site from {id, x, y, true_power, advertised_ref, prr?}; identities come from the attack plan"""
	if not isinstance(entry, dict):
		raise SchemaError(f"aps[{index}] must be an object")
	name = str(entry.get("id", f"ap{index + 1}"))
	for key in ("true_power", "advertised_ref"):
		if key not in entry:
			raise SchemaError(f"{name} is missing '{key}'")
	try:
		return Placement(
			name,
			_position(entry, name),
			SourceKind.WIFI_AP,
			float(entry["true_power"]),
			float(entry["advertised_ref"]),
			(),
			entry.get("interval"),
			entry.get("prr"),
			entry.get("scan_coverage"),
		)
	except (TypeError, ValueError) as e:
		if isinstance(e, ValidationError):
			raise
		raise SchemaError(f"{name} has a non-numeric field: {e}")
