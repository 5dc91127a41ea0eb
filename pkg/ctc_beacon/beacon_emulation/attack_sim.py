# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
Impersonation attack scenarios

Three victim deployments are attacked by WiFi APs broadcasting forged iBeacon packets:
    point           - a phone ranging one beacon (proximity)
    trilat          - a phone multilaterating from every beacon it hears
    fingerprint     - a phone matching its RSS vector against a surveyed database

Every scenario run is deterministic for a (scenario, seed) pair; beacons keep their
random draws whether or not APs are switched on, so attacked and baseline runs are
paired sample by sample.
"""

import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from ctc_beacon.beacon_emulation.ble_link import IBeaconIdentity
from ctc_beacon.beacon_emulation.exceptions import DegenerateGeometryError, SchemaError, ValidationError
from ctc_beacon.beacon_emulation.localization import (
	FingerprintDatabase,
	FingerprintSpot,
	aggregate_observations,
	classify_proximity,
	distance_error,
	estimate_distance,
	multilaterate,
	pooled_distances,
	pooled_rss_vector,
	wknn_locate,
)
from ctc_beacon.beacon_emulation.radio_env import (
	PathLossModel,
	ap_from_json,
	beacon_from_json,
	distance_between,
	observe_window,
	packets_per_window,
)
from ctc_beacon.beacon_emulation.tasks.trial_runner import run_blocks
from ctc_beacon.beacon_emulation.utils import (
	format_float,
	get_settings,
	logger,
	rows_to_csv,
	throw,
	write_text,
)

SCENARIO_SCHEMA = 1
REPORT_CSV_HEADER = ("scenario", "mode", "ap_count", "point_id", "x", "y", "error_m", "stddev_m")
SUMMARY_CSV_HEADER = (
	"scenario",
	"mode",
	"ap_count",
	"points",
	"mean_error_m",
	"median_error_m",
	"p90_error_m",
	"mean_stddev_m",
)
DETECTION_CSV_HEADER = ("scenario", "mode", "ap_count", "observations", "above_normal_fraction", "observed_rate")
MAX_RESCANS = 20
POINTS_PER_BLOCK = 16


class AssignmentStrategy(str, Enum):
	MANUAL = "manual"
	RANDOM = "random"
	FARTHEST = "farthest"


class ScenarioMode(str, Enum):
	POINT = "point"
	TRILAT = "trilat"
	FINGERPRINT = "fingerprint"


# ==================== PLANS ====================


@dataclass(frozen=True)
class AttackPlan:
	"""
	Which identities each AP impersonates

	Attributes:
	    assignments: ((ap_id, (beacon_id, ...)), ...) in AP order
	    strategy: How the assignments were made
	    enabled_ap_count: APs switched on, counted from the first
	"""

	assignments: tuple
	strategy: AssignmentStrategy
	enabled_ap_count: int = None

	def __post_init__(self):
		object.__setattr__(self, "strategy", AssignmentStrategy(self.strategy))
		if self.enabled_ap_count is None:
			object.__setattr__(self, "enabled_ap_count", len(self.assignments))
		if not 0 <= self.enabled_ap_count <= len(self.assignments):
			throw(f"Enabled AP count must lie in [0, {len(self.assignments)}], got {self.enabled_ap_count}")

	def ids_for(self, ap_id):
		return dict(self.assignments).get(ap_id, ())

	def covered_ids(self):
		return [bid for _, ids in self.assignments[: self.enabled_ap_count] for bid in ids]


def _beacon_id_map(beacons):
	return OrderedDict((b.source_id, b.impersonated_ids[0]) for b in beacons)


def assign_impersonations(aps, beacons, strategy, rng=None, ids_per_ap=1, manual=None, enabled_ap_count=None):
	"""
	Decide which beacon(s) every AP impersonates

	Args:
	    aps: AP placements
	    beacons: iBeacon placements
	    strategy: manual (pass-through), random (uniform without replacement) or
	        farthest (greedy, each AP takes the farthest beacons still free, ties by index)
	    rng: numpy Generator, required for random
	    ids_per_ap: Identities per AP for random/farthest
	    manual: dict ap_id -> [beacon source ids] for manual
	    enabled_ap_count: APs switched on (all when None)

	Returns:
	    AttackPlan
	"""
	strategy = AssignmentStrategy(strategy)
	if not aps or not beacons:
		throw("Impersonation needs at least one AP and one beacon")

	known = _beacon_id_map(beacons)
	names = list(known)

	if strategy is AssignmentStrategy.MANUAL:
		manual = manual or {}
		assignments = []
		for ap in aps:
			chosen = tuple(manual.get(ap.source_id, ()))
			unknown = [bid for bid in chosen if bid not in known]
			if unknown:
				throw(f"{ap.source_id} impersonates unknown beacons: {', '.join(unknown)}")
			assignments.append((ap.source_id, chosen))
		return AttackPlan(tuple(assignments), strategy, enabled_ap_count)

	needed = len(aps) * int(ids_per_ap)
	if needed > len(beacons):
		throw(f"{len(aps)} APs x {ids_per_ap} ids needs {needed} distinct beacons, only {len(beacons)} deployed")

	if strategy is AssignmentStrategy.RANDOM:
		if rng is None:
			throw("Random assignment needs a seeded generator")
		order = [names[i] for i in rng.permutation(len(names))]
		assignments = [
			(ap.source_id, tuple(order[i * ids_per_ap : (i + 1) * ids_per_ap])) for i, ap in enumerate(aps)
		]
		return AttackPlan(tuple(assignments), strategy, enabled_ap_count)

	free = list(range(len(beacons)))
	assignments = []
	for ap in aps:
		chosen = []
		for _ in range(ids_per_ap):
			best = max(free, key=lambda i: (distance_between(ap.position, beacons[i].position), -i))
			free.remove(best)
			chosen.append(names[best])
		assignments.append((ap.source_id, tuple(chosen)))
	return AttackPlan(tuple(assignments), strategy, enabled_ap_count)


def attack_sources(scenario, plan, advertised_ref=None):
	"""AP placements carrying their assigned identities, enabled ones only"""
	known = _beacon_id_map(scenario.beacons)
	sources = []
	for ap in scenario.aps[: plan.enabled_ap_count]:
		ids = [known[bid] for bid in plan.ids_for(ap.source_id)]
		if ids:
			sources.append(ap.with_ids(ids, advertised_ref))
	return sources


# ==================== SCENARIO ====================


@dataclass(frozen=True)
class PointSpec:
	beacon: str
	ap: str
	points: tuple
	sweep: tuple


@dataclass(frozen=True)
class TrilatSpec:
	ap_counts: tuple
	case_point: tuple | None
	case_levels: tuple
	case_ap_count: int


@dataclass(frozen=True)
class FingerprintSpec:
	ap_counts: tuple
	k: int | None
	multi_id_ap_count: int
	sigma_levels: tuple


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
	"""Deployment, victim positions and attack plan for one run"""

	name: str
	area: tuple
	beacons: tuple
	aps: tuple
	model: PathLossModel
	eval_points: tuple
	window_s: float
	trials: int
	seed: int
	strategy: AssignmentStrategy = AssignmentStrategy.FARTHEST
	ids_per_ap: int = 1
	manual: dict = field(default_factory=dict)
	enabled_ap_count: int | None = None
	aggregation: str | None = None
	min_distance: float | None = None
	point: PointSpec | None = None
	trilat: TrilatSpec | None = None
	fingerprint: FingerprintSpec | None = None

	def __post_init__(self):
		width, height = self.area
		if width <= 0 or height <= 0:
			throw("Area must have positive width and height")
		if int(self.trials) < 1:
			throw(f"Trials must be >= 1, got {self.trials}")
		for placement in (*self.beacons, *self.aps):
			x, y = placement.position
			if not (0 <= x <= width and 0 <= y <= height):
				throw(f"{placement.source_id} at {placement.position} lies outside the {width} x {height} m area")
		ids = [b.source_id for b in self.beacons] + [a.source_id for a in self.aps]
		if len(set(ids)) != len(ids):
			throw("Source ids must be unique")
		if len({b.impersonated_ids[0].beacon_id for b in self.beacons}) != len(self.beacons):
			throw("Two beacons advertise the same identity")

	def beacon(self, source_id):
		for b in self.beacons:
			if b.source_id == source_id:
				return b
		throw(f"Unknown beacon {source_id}")

	def ap(self, source_id):
		for a in self.aps:
			if a.source_id == source_id:
				return a
		throw(f"Unknown AP {source_id}")

	def plan(self, ids_per_ap=None, enabled_ap_count=None):
		return assign_impersonations(
			self.aps,
			self.beacons,
			self.strategy,
			rng=np.random.default_rng(self.seed),
			ids_per_ap=self.ids_per_ap if ids_per_ap is None else ids_per_ap,
			manual=self.manual,
			enabled_ap_count=self.enabled_ap_count if enabled_ap_count is None else enabled_ap_count,
		)

	def point_ids(self):
		return [f"p{i + 1:03d}" for i in range(len(self.eval_points))]

	def with_model(self, model):
		return replace(self, model=model)

	@classmethod
	def from_json(cls, data):
		"""
		Build a scenario from its JSON document

		Raises:
		    SchemaError: wrong schema version, missing sections or wrong types
		    ValidationError: values outside their ranges
		"""
		if not isinstance(data, dict):
			raise SchemaError("Scenario must be a JSON object")
		if data.get("schema") != SCENARIO_SCHEMA:
			raise SchemaError(f"Unsupported scenario schema {data.get('schema')!r}, expected {SCENARIO_SCHEMA}")
		for key in ("area", "beacons"):
			if key not in data:
				raise SchemaError(f"Scenario is missing '{key}'")

		try:
			area = (float(data["area"]["w"]), float(data["area"]["h"]))
		except (KeyError, TypeError, ValueError):
			raise SchemaError("area needs numeric 'w' and 'h'")

		beacons = tuple(beacon_from_json(entry, i) for i, entry in enumerate(data["beacons"]))
		aps = tuple(ap_from_json(entry, i) for i, entry in enumerate(data.get("aps", [])))
		eval_points = _parse_points(data.get("eval_points"), area)
		attack = data.get("attack") or {}
		names = [b.source_id for b in beacons]

		point = data.get("point") or {}
		beacon_name = point.get("beacon", names[0] if names else None)
		point_spec = None
		if beacon_name is not None and aps:
			anchor = next((b for b in beacons if b.source_id == beacon_name), None)
			if anchor is None:
				raise SchemaError(f"point.beacon {beacon_name!r} is not a deployed beacon")
			default_points = [(anchor.position[0] + d, anchor.position[1]) for d in range(1, 11)]
			point_spec = PointSpec(
				beacon_name,
				point.get("ap", aps[0].source_id),
				tuple(_parse_points(point.get("points"), area, default_points)),
				tuple(float(v) for v in point.get("sweep", [-55, -52, -49, -46, -43, -40])),
			)

		trilat = data.get("trilat") or {}
		case = trilat.get("case_study") or {}
		trilat_spec = TrilatSpec(
			tuple(int(v) for v in trilat.get("ap_counts", [0, 1, 2, 3])),
			tuple(float(v) for v in case["point"]) if "point" in case else None,
			tuple(float(v) for v in case.get("levels", [-64, -58, -52, -46, -40])),
			int(case.get("ap_count", 2)),
		)

		fingerprint = data.get("fingerprint") or {}
		fingerprint_spec = FingerprintSpec(
			tuple(int(v) for v in fingerprint.get("ap_counts", range(len(aps) + 1))),
			fingerprint.get("k"),
			int(fingerprint.get("multi_id_ap_count", 3)),
			tuple(float(v) for v in fingerprint.get("sigma_levels", [2.0, 5.0, 8.0])),
		)

		try:
			return cls(
				name=str(data.get("name", "scenario")),
				area=area,
				beacons=beacons,
				aps=aps,
				model=PathLossModel.from_json(data.get("model")),
				eval_points=tuple(eval_points),
				window_s=float(data.get("window", get_settings().aggregation_window_s)),
				trials=int(data.get("trials", 1)),
				seed=int(data.get("seed", 0)),
				strategy=AssignmentStrategy(attack.get("strategy", "farthest")),
				ids_per_ap=int(attack.get("ids_per_ap", 1)),
				manual=dict(attack.get("assignments", {})),
				enabled_ap_count=attack.get("enabled_ap_count"),
				aggregation=data.get("aggregation"),
				min_distance=data.get("min_distance"),
				point=point_spec,
				trilat=trilat_spec,
				fingerprint=fingerprint_spec,
			)
		except (TypeError, KeyError) as e:
			raise SchemaError(f"Scenario has a malformed field: {e}")
		except ValueError as e:
			if isinstance(e, ValidationError):
				raise
			raise SchemaError(f"Scenario has an invalid value: {e}")


def _grid(spec):
	start, stop, step = (float(v) for v in spec)
	if step <= 0:
		raise SchemaError("Grid step must be > 0")
	return np.arange(start, stop + step / 2, step)


def _parse_points(spec, area, default=None):
	if spec is None:
		if default is not None:
			return [tuple(p) for p in default]
		spec = {"grid": {"x": [area[0] / 10, area[0] * 0.9, area[0] / 10], "y": [area[1] / 4, area[1] * 0.75, area[1] / 4]}}
	if isinstance(spec, dict) and "grid" in spec:
		xs, ys = _grid(spec["grid"]["x"]), _grid(spec["grid"]["y"])
		return [(float(x), float(y)) for y in ys for x in xs]
	try:
		return [(float(p[0]), float(p[1])) for p in spec]
	except (TypeError, ValueError, IndexError, KeyError):
		raise SchemaError("Points must be a grid spec or a list of [x, y] pairs")


# ==================== REPORT ====================


@dataclass(frozen=True)
class ReportRow:
	mode: str
	ap_count: int
	point_id: str
	x: float
	y: float
	error_m: float
	stddev_m: float


@dataclass
class AttackReport:
	"""Per-point errors plus summaries, CDFs and side tables of one scenario run"""

	scenario: str
	rows: list = field(default_factory=list)
	detection: list = field(default_factory=list)
	sweep: list = field(default_factory=list)
	zones: list = field(default_factory=list)
	reachable: list = field(default_factory=list)
	notes: list = field(default_factory=list)

	def groups(self):
		grouped = OrderedDict()
		for row in self.rows:
			grouped.setdefault((row.mode, row.ap_count), []).append(row)
		return grouped

	def errors(self, mode, ap_count):
		return np.array([r.error_m for r in self.groups().get((mode, ap_count), [])], dtype=float)

	def summary(self):
		out = []
		for (mode, ap_count), rows in self.groups().items():
			errors = np.array([r.error_m for r in rows])
			stddevs = np.array([r.stddev_m for r in rows])
			out.append(
				{
					"mode": mode,
					"ap_count": ap_count,
					"points": len(rows),
					"mean_error_m": float(errors.mean()),
					"median_error_m": float(np.median(errors)),
					"p90_error_m": float(np.quantile(errors, 0.9)),
					"mean_stddev_m": float(stddevs.mean()),
				}
			)
		return out

	def cdf(self, mode, ap_count, samples=None):
		"""Error quantiles at evenly spaced levels 0..1 (nondecreasing)"""
		samples = samples or get_settings().cdf_quantiles
		levels = np.linspace(0, 1, samples)
		errors = self.errors(mode, ap_count)
		if errors.size == 0:
			return levels, np.zeros_like(levels)
		return levels, np.quantile(errors, levels)

	def to_csv(self):
		return rows_to_csv(
			REPORT_CSV_HEADER,
			(
				(
					self.scenario,
					r.mode,
					r.ap_count,
					r.point_id,
					format_float(r.x, 3),
					format_float(r.y, 3),
					format_float(r.error_m),
					format_float(r.stddev_m),
				)
				for r in self.rows
			),
		)

	def summary_csv(self):
		return rows_to_csv(
			SUMMARY_CSV_HEADER,
			(
				(
					self.scenario,
					s["mode"],
					s["ap_count"],
					s["points"],
					format_float(s["mean_error_m"]),
					format_float(s["median_error_m"]),
					format_float(s["p90_error_m"]),
					format_float(s["mean_stddev_m"]),
				)
				for s in self.summary()
			),
		)

	def cdf_text(self, mode, ap_count):
		levels, quantiles = self.cdf(mode, ap_count)
		lines = [f"# {self.scenario} {mode} ap_count={ap_count}", "# quantile error_m"]
		lines += [f"{q:.2f} {format_float(e)}" for q, e in zip(levels, quantiles, strict=True)]
		return "\n".join(lines) + "\n"

	def write(self, out_dir):
		"""
		Write report.csv, summary.csv, one CDF file per (mode, ap_count) and side tables

		Returns:
		    list[Path]: files written
		"""
		out_dir = Path(out_dir)
		written = [
			write_text(out_dir / "report.csv", self.to_csv()),
			write_text(out_dir / "summary.csv", self.summary_csv()),
		]
		for mode, ap_count in self.groups():
			written.append(write_text(out_dir / f"cdf_{mode}_ap{ap_count}.dat", self.cdf_text(mode, ap_count)))

		if self.detection:
			written.append(
				write_text(
					out_dir / "detection.csv",
					rows_to_csv(
						DETECTION_CSV_HEADER,
						(
							(self.scenario, d["mode"], d["ap_count"], d["observations"])
							+ (format_float(d["above_normal_fraction"]), format_float(d["observed_rate"]))
							for d in self.detection
						),
					),
				)
			)
		if self.sweep:
			written.append(
				write_text(
					out_dir / "sweep.csv",
					rows_to_csv(
						("advertised_ref_dbm", "mean_estimate_m", "mean_error_m"),
						((format_float(p, 1), format_float(e), format_float(err)) for p, e, err in self.sweep),
					),
				)
			)
		if self.zones:
			written.append(
				write_text(
					out_dir / "zones.csv",
					rows_to_csv(("mode", "point_id", "true_zone", "estimated_zone", "changed"), self.zones),
				)
			)
		if self.reachable:
			written.append(
				write_text(
					out_dir / "reachable.csv",
					rows_to_csv(
						("advertised_refs", "x", "y"),
						((refs, format_float(x, 3), format_float(y, 3)) for refs, x, y in self.reachable),
					),
				)
			)
		if self.notes:
			written.append(write_text(out_dir / "notes.txt", "\n".join(self.notes) + "\n"))
		return written


# ==================== METRICS ====================


@dataclass
class DetectionTally:
	observations: int = 0
	above_normal: int = 0
	transmitted: int = 0

	def add(self, other):
		self.observations += other.observations
		self.above_normal += other.above_normal
		self.transmitted += other.transmitted

	def as_row(self, mode, ap_count):
		return {
			"mode": mode,
			"ap_count": ap_count,
			"observations": self.observations,
			"above_normal_fraction": self.above_normal / self.observations if self.observations else 0.0,
			"observed_rate": self.observations / self.transmitted if self.transmitted else 0.0,
		}


def detection_metrics(observations, sources, window_s, windows=1):
	"""Share of packets above the normal iBeacon RSS ceiling and received/transmitted ratio"""
	ceiling = get_settings().normal_rss_ceiling_dbm
	transmitted = windows * sum(
		packets_per_window(window_s, s.interval_s) * len(s.impersonated_ids) for s in sources
	)
	return DetectionTally(len(observations), sum(1 for o in observations if o.rss > ceiling), transmitted)


@dataclass(frozen=True)
class HarvestedIdentity:
	identity: IBeaconIdentity
	rss: float
	count: int


def harvest_identities(observations):
	"""
	Distinct iBeacon identities heard during a scan, in order of first appearance

	The power byte of each harvested identity is the pooled embedded reference.
	"""
	harvested = []
	for beacon_id, reading in aggregate_observations(observations, "mean").items():
		uuid_text, major, minor = beacon_id.rsplit(":", 2)
		identity = IBeaconIdentity.from_json(
			{"uuid": uuid_text, "major": int(major), "minor": int(minor), "tx_power_ref": int(round(reading.embedded_ref))}
		)
		harvested.append(HarvestedIdentity(identity, reading.rss, reading.count))
	return harvested


def build_fingerprint_database(scenario, spots=None):
	"""Offline survey: mean RSS of every genuine beacon at every spot (no APs, long averaging)"""
	spots = scenario.eval_points if spots is None else spots
	entries = []
	for spot_id, position in zip(scenario.point_ids(), spots, strict=True):
		vector = {}
		for beacon in scenario.beacons:
			d = max(distance_between(beacon.position, position), scenario.model.min_distance_m)
			vector[beacon.impersonated_ids[0].beacon_id] = scenario.model.mean_rss(beacon.true_power, d)
		entries.append(FingerprintSpot(spot_id, position, vector))
	return FingerprintDatabase(tuple(entries))


# ==================== EVALUATION ====================


@dataclass
class PointResult:
	index: int
	error_m: float
	stddev_m: float
	estimate: float = float("nan")
	tally: DetectionTally = field(default_factory=DetectionTally)
	missed: int = 0
	clamped: int = 0


def _scan(scenario, sources, position, keys, heard_enough, model=None):
	"""Scan consecutive windows until `heard_enough(observations)` or the rescan cap"""
	model = model or scenario.model
	observations = []
	windows = 0
	for rescan in range(MAX_RESCANS):
		windows += 1
		observations += observe_window(
			sources, position, model, scenario.window_s, scenario.seed, (*keys, rescan), rescan * scenario.window_s
		)
		if heard_enough(observations):
			break
	return observations, windows


def _spread(estimates):
	estimates = np.asarray(estimates, dtype=float)
	if estimates.ndim == 1:
		return float(np.std(estimates))
	return float(np.sqrt(np.mean(np.sum((estimates - estimates.mean(axis=0)) ** 2, axis=1))))


def _evaluate_point(kind, scenario, sources, extra, index):
	position = scenario.eval_points[index] if kind != "point" else scenario.point.points[index]
	n = scenario.model.exponent
	tally = DetectionTally()
	errors, estimates = [], []
	missed = clamped = 0

	for trial in range(scenario.trials):
		keys = (index, trial)
		if kind == "point":
			target = extra["beacon_id"]
			obs, windows = _scan(scenario, sources, position, keys, lambda o: any(x.beacon_id == target for x in o))
			pooled = aggregate_observations(obs, scenario.aggregation)
			tally.add(detection_metrics(obs, sources, scenario.window_s, windows))
			if target not in pooled:
				missed += 1
				continue
			reading = pooled[target]
			raw = estimate_distance(reading.embedded_ref, reading.rss, n)
			estimate = estimate_distance(reading.embedded_ref, reading.rss, n, scenario.min_distance)
			clamped += int(estimate != raw)
			estimates.append(estimate)
			errors.append(abs(estimate - extra["true_distance"](position)))
			continue

		if kind == "trilat":
			anchors_by_id = extra["anchors"]
			obs, windows = _scan(
				scenario, sources, position, keys, lambda o: len({x.beacon_id for x in o} & set(anchors_by_id)) >= 3
			)
			tally.add(detection_metrics(obs, sources, scenario.window_s, windows))
			pooled = aggregate_observations(obs, scenario.aggregation)
			distances = pooled_distances(pooled, n, scenario.min_distance)
			raw = pooled_distances(pooled, n)
			heard = [bid for bid in distances if bid in anchors_by_id]
			if len(heard) < 3:
				missed += 1
				continue
			clamped += sum(1 for bid in heard if distances[bid] != raw[bid])
			try:
				fix = multilaterate([anchors_by_id[b] for b in heard], [distances[b] for b in heard])
			except DegenerateGeometryError:
				missed += 1
				continue
			estimates.append(fix.position)
			errors.append(distance_error(fix.position, position))
			continue

		db = extra["database"]
		obs, windows = _scan(scenario, sources, position, keys, lambda o: len(o) > 0, extra.get("model"))
		tally.add(detection_metrics(obs, sources, scenario.window_s, windows))
		located = wknn_locate(db, pooled_rss_vector(aggregate_observations(obs, scenario.aggregation)), extra["k"])
		estimates.append(located)
		errors.append(distance_error(located, position))

	if not errors:
		return PointResult(index, float("nan"), float("nan"), float("nan"), tally, missed, clamped)

	mean_estimate = float(np.mean(estimates)) if kind == "point" else float("nan")
	return PointResult(index, float(np.mean(errors)), _spread(estimates), mean_estimate, tally, missed, clamped)


def _evaluate_block(payload):
	kind, scenario, sources, extra, indices = payload
	return [_evaluate_point(kind, scenario, sources, extra, i) for i in indices]


def _run_points(kind, scenario, sources, extra, count, jobs):
	indices = list(range(count))
	blocks = [indices[i : i + POINTS_PER_BLOCK] for i in range(0, count, POINTS_PER_BLOCK)]
	results = run_blocks(_evaluate_block, [(kind, scenario, sources, extra, b) for b in blocks], jobs)
	flat = sorted((r for block in results for r in block), key=lambda r: r.index)
	missed = sum(r.missed for r in flat)
	if missed:
		logger("attack_sim").warning(f"{kind}: {missed} trial(s) heard too few beacons and were skipped")
	return flat


def _append(report, mode, ap_count, results, points):
	tally = DetectionTally()
	ids = [f"p{i + 1:03d}" for i in range(len(points))]
	for r in results:
		tally.add(r.tally)
		if not math.isfinite(r.error_m):
			continue
		x, y = points[r.index]
		report.rows.append(ReportRow(mode, ap_count, ids[r.index], x, y, r.error_m, r.stddev_m))
	report.detection.append(tally.as_row(mode, ap_count))
	clamped = sum(r.clamped for r in results)
	if clamped:
		note = f"{mode} ap_count={ap_count}: minimum-distance clamp engaged {clamped} time(s)"
		report.notes.append(note)


def _note_clamp(report, scenario):
	if scenario.min_distance is not None:
		message = (
			f"Victim distance estimates are clamped below {scenario.min_distance} m; "
			"close-range positions are not reachable"
		)
		logger("attack_sim").warning(message)
		report.notes.append(message)


def run_point_attack(scenario, jobs=1):
	"""
	Proximity attack on one beacon

	Modes per evaluation point: baseline (genuine only), attack (genuine + fake pooled)
	and fake_only (the victim hears only the AP). The sweep varies the AP's advertised
	reference in fake_only mode.

	Returns:
	    AttackReport
	"""
	spec = scenario.point
	if spec is None:
		throw("Point attack needs at least one beacon and one AP")
	beacon = scenario.beacon(spec.beacon)
	ap = scenario.ap(spec.ap)
	identity = beacon.impersonated_ids[0]
	fake = ap.with_ids((identity,))
	extra = {
		"beacon_id": identity.beacon_id,
		"true_distance": _TrueDistance(beacon.position),
	}

	report = AttackReport(scenario.name)
	_note_clamp(report, scenario)
	points = list(spec.points)
	runs = (("point_baseline", 0, [beacon]), ("point_attack", 1, [beacon, fake]), ("point_fake_only", 1, [fake]))
	for mode, ap_count, sources in runs:
		results = _run_points("point", scenario, sources, extra, len(points), jobs)
		_append(report, mode, ap_count, results, points)
		for r in results:
			x, y = points[r.index]
			true_zone = classify_proximity(distance_between(beacon.position, (x, y)))
			seen_zone = classify_proximity(r.estimate) if math.isfinite(r.estimate) else true_zone
			report.zones.append(
				(mode, f"p{r.index + 1:03d}", true_zone.value, seen_zone.value, str(seen_zone != true_zone).lower())
			)

	for level in spec.sweep:
		results = _run_points("point", scenario, [ap.with_ids((identity,), level)], extra, len(points), jobs)
		finite = [r for r in results if math.isfinite(r.estimate)]
		report.sweep.append(
			(
				level,
				float(np.mean([r.estimate for r in finite])) if finite else 0.0,
				float(np.mean([r.error_m for r in finite])) if finite else 0.0,
			)
		)

	logger("attack_sim").info(f"Point attack on {spec.beacon} by {spec.ap}: {len(points)} points, {scenario.trials} trials")
	return report


@dataclass(frozen=True)
class _TrueDistance:
	origin: tuple

	def __call__(self, position):
		return distance_between(self.origin, position)


def _anchor_map(scenario):
	return {b.impersonated_ids[0].beacon_id: b.position for b in scenario.beacons}


def reachable_positions(scenario, point, levels, ap_count):
	"""
	Positions a victim at `point` can be pushed to by sweeping each AP's advertised reference

	The victim hears only the AP for every impersonated identity (noise-free, mean RSS).

	Returns:
	    list of (levels per AP, (x, y))
	"""
	plan = scenario.plan(enabled_ap_count=ap_count)
	anchors = _anchor_map(scenario)
	model = scenario.model
	n = model.exponent
	known = _beacon_id_map(scenario.beacons)
	enabled = scenario.aps[:ap_count]

	genuine = OrderedDict()
	for beacon in scenario.beacons:
		d = max(distance_between(beacon.position, point), model.min_distance_m)
		rss = model.mean_rss(beacon.true_power, d)
		genuine[beacon.impersonated_ids[0].beacon_id] = estimate_distance(
			beacon.advertised_ref, rss, n, scenario.min_distance
		)

	outcomes = []
	for combo in itertools.product(levels, repeat=len(enabled)):
		distances = OrderedDict(genuine)
		for ap, level in zip(enabled, combo, strict=True):
			d = max(distance_between(ap.position, point), model.min_distance_m)
			rss = model.mean_rss(ap.true_power, d)
			for name in plan.ids_for(ap.source_id):
				distances[known[name].beacon_id] = estimate_distance(level, rss, n, scenario.min_distance)
		ids = list(distances)
		fix = multilaterate([anchors[b] for b in ids], [distances[b] for b in ids])
		outcomes.append((combo, fix.position))
	return outcomes


def run_multilateration_attack(scenario, jobs=1):
	"""
	Multilateration under 0..N impersonating APs, plus the reachable-position case study

	Returns:
	    AttackReport (mode "trilat", one group per AP count)
	"""
	if len(scenario.beacons) < 3:
		throw("Multilateration needs at least 3 genuine beacons")

	spec = scenario.trilat
	report = AttackReport(scenario.name)
	_note_clamp(report, scenario)
	extra = {"anchors": _anchor_map(scenario)}
	points = list(scenario.eval_points)

	for ap_count in spec.ap_counts:
		plan = scenario.plan(enabled_ap_count=ap_count)
		sources = list(scenario.beacons) + attack_sources(scenario, plan)
		results = _run_points("trilat", scenario, sources, extra, len(points), jobs)
		_append(report, "trilat", ap_count, results, points)

	if spec.case_point is not None and scenario.aps:
		case_count = min(spec.case_ap_count, len(scenario.aps))
		for combo, (x, y) in reachable_positions(scenario, spec.case_point, spec.case_levels, case_count):
			refs = ";".join(f"{ap.source_id}={level:g}" for ap, level in zip(scenario.aps, combo, strict=False))
			report.reachable.append((refs, x, y))

	logger("attack_sim").info(f"Multilateration attack: AP counts {list(spec.ap_counts)}, {len(points)} points")
	return report


def run_fingerprint_attack(scenario, jobs=1):
	"""
	Fingerprinting under impersonation

	Groups written:
	    fingerprint            mean error per enabled AP count
	    fingerprint_multi_id   the multi-ID variant (each AP carries two identities)
	    fingerprint_sigma_<s>  all APs on, AP shadowing sigma swept (stddev_m is the spread)

	Returns:
	    AttackReport
	"""
	spec = scenario.fingerprint
	database = build_fingerprint_database(scenario)
	k = spec.k if spec.k is not None else min(get_settings().wknn_k, len(database))
	extra = {"database": database, "k": k}
	report = AttackReport(scenario.name)
	points = list(scenario.eval_points)

	for ap_count in spec.ap_counts:
		plan = scenario.plan(enabled_ap_count=ap_count)
		sources = list(scenario.beacons) + attack_sources(scenario, plan)
		results = _run_points("fingerprint", scenario, sources, extra, len(points), jobs)
		_append(report, "fingerprint", ap_count, results, points)

	multi_count = min(spec.multi_id_ap_count, len(scenario.aps))
	if multi_count and multi_count * 2 <= len(scenario.beacons):
		multi_scenario = replace(scenario, aps=scenario.aps[:multi_count])
		plan = multi_scenario.plan(ids_per_ap=2, enabled_ap_count=multi_count)
		sources = list(scenario.beacons) + attack_sources(multi_scenario, plan)
		results = _run_points("fingerprint", scenario, sources, extra, len(points), jobs)
		_append(report, "fingerprint_multi_id", multi_count, results, points)

	plan = scenario.plan(enabled_ap_count=len(scenario.aps))
	sources = list(scenario.beacons) + attack_sources(scenario, plan)
	for sigma in spec.sigma_levels:
		model = scenario.model.with_sigma(sigma_ap_db=sigma)
		results = _run_points("fingerprint", scenario, sources, {**extra, "model": model}, len(points), jobs)
		_append(report, f"fingerprint_sigma_{sigma:g}", len(scenario.aps), results, points)

	logger("attack_sim").info(f"Fingerprint attack: {len(database)} spots, AP counts {list(spec.ap_counts)}")
	return report


SCENARIO_RUNNERS = {
	ScenarioMode.POINT: run_point_attack,
	ScenarioMode.TRILAT: run_multilateration_attack,
	ScenarioMode.FINGERPRINT: run_fingerprint_attack,
}


def run_scenario(scenario, mode, jobs=1):
	return SCENARIO_RUNNERS[ScenarioMode(mode)](scenario, jobs)


__all__ = [
	"AssignmentStrategy",
	"AttackPlan",
	"AttackReport",
	"ScenarioConfig",
	"ScenarioMode",
	"assign_impersonations",
	"build_fingerprint_database",
	"detection_metrics",
	"harvest_identities",
	"reachable_positions",
	"run_fingerprint_attack",
	"run_multilateration_attack",
	"run_point_attack",
	"run_scenario",
]
