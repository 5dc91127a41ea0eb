# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
Victim-side estimators: RSS ranging, multilateration and weighted-kNN fingerprinting
"""

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import optimize
from scipy.spatial.distance import cdist

from ctc_beacon.beacon_emulation.exceptions import (
	DegenerateGeometryError,
	EmptyDatabaseError,
	InsufficientAnchorsError,
	SchemaError,
	ValidationError,
)
from ctc_beacon.beacon_emulation.utils import format_float, get_settings, logger, rows_to_csv, throw

IMMEDIATE_LIMIT_M = 0.5
NEAR_LIMIT_M = 3.0
FINGERPRINT_CSV_HEADER = ("spot_id", "x", "y", "beacon_id", "rss")
FALLBACK_GRID = 41
AGGREGATION_POLICIES = ("mean", "median", "latest")


def _exponent(n):
	n = get_settings().path_loss_exponent if n is None else float(n)
	if n <= 0:
		throw(f"Path loss exponent must be > 0, got {n}")
	return n


def estimate_distance(p, s, n=None, min_distance=None):
	"""
	Distance implied by a measured RSS

	Args:
	    p: TX power reference carried in the packet (dBm)
	    s: Measured RSS (dBm)
	    n: Path loss exponent (settings default)
	    min_distance: Optional floor on the returned distance

	Returns:
	    float: 10^((p - s) / (10 n)) meters
	"""
	d = 10 ** ((p - s) / (10 * _exponent(n)))
	if min_distance is not None and d < min_distance:
		return float(min_distance)
	return float(d)


def fake_distance(d_0, p_0, p_f, n=None):
	"""Distance a victim believes at true distance d_0 when a source of true power p_0 advertises p_f"""
	if d_0 <= 0:
		throw(f"True distance must be > 0, got {d_0}")
	return float(d_0 * 10 ** ((p_f - p_0) / (10 * _exponent(n))))


class ProximityZone(str, Enum):
	IMMEDIATE = "immediate"
	NEAR = "near"
	FAR = "far"


def classify_proximity(distance):
	if distance < IMMEDIATE_LIMIT_M:
		return ProximityZone.IMMEDIATE
	if distance < NEAR_LIMIT_M:
		return ProximityZone.NEAR
	return ProximityZone.FAR


# ==================== MULTILATERATION ====================


@dataclass(frozen=True)
class PositionEstimate:
	position: tuple
	residual: float
	iterations: int
	converged: bool


def _residuals(x, anchors, distances):
	return np.linalg.norm(anchors - x, axis=1) - distances


def _cost(x, anchors, distances):
	return float(np.sum(_residuals(x, anchors, distances) ** 2))


def _jacobian(x, anchors):
	diff = x - anchors
	norms = np.linalg.norm(diff, axis=1)
	safe = np.where(norms > 0, norms, 1.0)
	return np.where(norms[:, np.newaxis] > 0, diff / safe[:, np.newaxis], 0.0)


def linearized_fix(anchors, distances):
	"""Closed-form start point from differencing every range equation against the first"""
	a0, d0 = anchors[0], distances[0]
	A = 2 * (anchors[1:] - a0)
	b = np.sum(anchors[1:] ** 2, axis=1) - np.sum(a0**2) - distances[1:] ** 2 + d0**2
	solution, *_ = np.linalg.lstsq(A, b, rcond=None)
	return solution


def _fallback(anchors, distances, start):
	"""Coarse grid over the anchors' extent, refined by scipy least squares"""
	reach = float(np.max(distances)) if distances.size else 0.0
	low = anchors.min(axis=0) - reach
	high = anchors.max(axis=0) + reach
	xs = np.linspace(low[0], high[0], FALLBACK_GRID)
	ys = np.linspace(low[1], high[1], FALLBACK_GRID)
	grid = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
	costs = np.sum((cdist(grid, anchors) - distances) ** 2, axis=1)
	best = grid[int(np.argmin(costs))]
	if _cost(start, anchors, distances) < _cost(best, anchors, distances):
		best = start

	fit = optimize.least_squares(_residuals, best, args=(anchors, distances), xtol=1e-12, ftol=1e-12)
	return fit.x, int(fit.nfev)


def multilaterate(anchors, distances, init=None, tolerance=None, max_iterations=None, damping=None):
	"""
	Position minimizing sum_i (|x - a_i| - d_i)^2

	Damped Gauss-Newton from the linearized fix (or `init`); falls back to a grid search
	plus scipy refinement when the Jacobian loses rank.

	Args:
	    anchors: (m, 2) anchor positions, m >= 3, not collinear
	    distances: m estimated distances
	    init: Optional start point
	    tolerance: Gradient norm (and step length) for convergence
	    max_iterations: Gauss-Newton iteration cap
	    damping: Step shrink factor on cost increase

	Returns:
	    PositionEstimate
	"""
	settings = get_settings()
	tolerance = settings.solver_tolerance_m if tolerance is None else tolerance
	max_iterations = settings.solver_max_iterations if max_iterations is None else max_iterations
	damping = settings.solver_damping if damping is None else damping

	anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
	distances = np.asarray(distances, dtype=float).reshape(-1)
	if anchors.shape[0] < 3:
		raise InsufficientAnchorsError(f"Multilateration needs at least 3 anchors, got {anchors.shape[0]}")
	if anchors.shape[0] != distances.size:
		throw(f"{anchors.shape[0]} anchors but {distances.size} distances")
	if not np.all(np.isfinite(distances)):
		throw("Distances must be finite")

	centered = anchors - anchors.mean(axis=0)
	scale = max(float(np.abs(centered).max()), 1.0)
	if np.linalg.matrix_rank(centered, tol=1e-9 * scale) < 2:
		raise DegenerateGeometryError("Anchors are collinear; no unique 2-D fix")

	start = linearized_fix(anchors, distances) if init is None else np.asarray(init, dtype=float)
	x = start.copy()
	cost = _cost(x, anchors, distances)
	converged = False
	iterations = 0

	for iterations in range(1, max_iterations + 1):
		r = _residuals(x, anchors, distances)
		J = _jacobian(x, anchors)
		if np.linalg.norm(J.T @ r) < tolerance:
			converged = True
			break
		if np.linalg.matrix_rank(J) < 2:
			logger("localization").debug("Jacobian lost rank; switching to grid fallback")
			x, evaluations = _fallback(anchors, distances, x)
			iterations += evaluations
			converged = np.linalg.norm(_jacobian(x, anchors).T @ _residuals(x, anchors, distances)) < tolerance
			break

		step, *_ = np.linalg.lstsq(J, -r, rcond=None)
		improved = False
		while np.linalg.norm(step) >= tolerance * 1e-3:
			candidate = x + step
			candidate_cost = _cost(candidate, anchors, distances)
			if candidate_cost <= cost:
				x, cost, improved = candidate, candidate_cost, True
				break
			step = step * damping

		if not improved or np.linalg.norm(step) < tolerance:
			grad = _jacobian(x, anchors).T @ _residuals(x, anchors, distances)
			converged = bool(np.linalg.norm(grad) < tolerance)
			break

	if _cost(x, anchors, distances) > _cost(start, anchors, distances):
		x = start

	residual = float(np.sqrt(np.mean(_residuals(x, anchors, distances) ** 2)))
	return PositionEstimate((float(x[0]), float(x[1])), residual, iterations, bool(converged))


# ==================== FINGERPRINTING ====================


@dataclass(frozen=True)
class FingerprintSpot:
	spot_id: str
	position: tuple
	vector: dict


@dataclass(frozen=True, eq=False)
class FingerprintDatabase:
	"""Surveyed RSS vectors; every spot covers the same id set once missing values are filled"""

	spots: tuple
	missing_value: float = None

	def __post_init__(self):
		if self.missing_value is None:
			object.__setattr__(self, "missing_value", get_settings().missing_rss_dbm)
		object.__setattr__(self, "spots", tuple(self.spots))

	def __len__(self):
		return len(self.spots)

	@property
	def beacon_ids(self):
		return tuple(sorted({bid for spot in self.spots for bid in spot.vector}))

	@property
	def positions(self):
		return np.array([spot.position for spot in self.spots], dtype=float).reshape(-1, 2)

	def vectorize(self, readings, ids=None):
		ids = ids or self.beacon_ids
		return np.array([readings.get(bid, self.missing_value) for bid in ids], dtype=float)

	@property
	def matrix(self):
		ids = self.beacon_ids
		return np.array([self.vectorize(spot.vector, ids) for spot in self.spots], dtype=float)

	def to_csv(self):
		rows = []
		for spot in self.spots:
			for bid in sorted(spot.vector):
				rows.append(
					(
						spot.spot_id,
						format_float(spot.position[0]),
						format_float(spot.position[1]),
						bid,
						format_float(spot.vector[bid]),
					)
				)
		return rows_to_csv(FINGERPRINT_CSV_HEADER, rows)

	@classmethod
	def from_csv(cls, text, missing_value=None):
		reader = csv.reader(io.StringIO(text))
		header = tuple(next(reader, ()))
		if header != FINGERPRINT_CSV_HEADER:
			raise SchemaError(f"Fingerprint CSV header must be {','.join(FINGERPRINT_CSV_HEADER)}")

		spots = OrderedDict()
		for line_no, row in enumerate(reader, start=2):
			if not row:
				continue
			try:
				spot_id, x, y, bid, rss = row
				position = (float(x), float(y))
				value = float(rss)
			except ValueError as e:
				raise SchemaError(f"Fingerprint CSV line {line_no}: {e}")
			position_seen, vector = spots.setdefault(spot_id, (position, {}))
			if position_seen != position:
				raise SchemaError(f"Spot {spot_id} has two positions")
			vector[bid] = value

		return cls(
			tuple(FingerprintSpot(sid, pos, vec) for sid, (pos, vec) in spots.items()),
			missing_value,
		)


def wknn_locate(db, observation, k=None, epsilon=None):
	"""
	Weighted k-nearest-neighbour position from an RSS vector

	Args:
	    db: FingerprintDatabase
	    observation: dict beacon_id -> RSS; absent ids take the database's missing value
	    k: Neighbours (settings default)
	    epsilon: Weight regularizer, weights are 1 / (epsilon + distance)

	Returns:
	    tuple: (x, y)
	"""
	settings = get_settings()
	k = settings.wknn_k if k is None else int(k)
	epsilon = settings.wknn_epsilon if epsilon is None else float(epsilon)

	if len(db) == 0:
		raise EmptyDatabaseError("Fingerprint database has no spots")
	if not 1 <= k <= len(db):
		throw(f"k must lie in [1, {len(db)}], got {k}")

	ids = db.beacon_ids
	query = db.vectorize(observation, ids)
	distances = cdist(query[np.newaxis, :], db.matrix)[0]
	nearest = np.argsort(distances, kind="stable")[:k]
	weights = 1.0 / (epsilon + distances[nearest])
	position = weights @ db.positions[nearest] / weights.sum()
	return float(position[0]), float(position[1])


# ==================== AGGREGATION ====================


@dataclass(frozen=True)
class PooledReading:
	rss: float
	embedded_ref: float
	count: int


def aggregate_observations(observations, policy=None):
	"""
	Pool every received packet per beacon id

	Genuine and impersonated packets carrying the same id are indistinguishable, so
	they are pooled together.

	Args:
	    observations: RssObservation sequence from one window
	    policy: mean, median or latest (settings default)

	Returns:
	    OrderedDict beacon_id -> PooledReading, in order of first appearance
	"""
	policy = policy or get_settings().aggregation_policy
	if policy not in AGGREGATION_POLICIES:
		raise ValidationError(f"Aggregation policy must be one of {AGGREGATION_POLICIES}, got {policy!r}")

	grouped = OrderedDict()
	for obs in observations:
		grouped.setdefault(obs.beacon_id, []).append(obs)

	pooled = OrderedDict()
	for bid, group in grouped.items():
		if policy == "latest":
			latest = max(enumerate(group), key=lambda item: (item[1].timestamp, item[0]))[1]
			pooled[bid] = PooledReading(latest.rss, latest.embedded_ref, len(group))
			continue
		reduce = np.mean if policy == "mean" else np.median
		pooled[bid] = PooledReading(
			float(reduce([o.rss for o in group])),
			float(reduce([o.embedded_ref for o in group])),
			len(group),
		)
	return pooled


def pooled_rss_vector(pooled):
	return {bid: reading.rss for bid, reading in pooled.items()}


def pooled_distances(pooled, n=None, min_distance=None):
	"""Per-id distance estimate from pooled RSS and pooled reference"""
	return OrderedDict(
		(bid, estimate_distance(r.embedded_ref, r.rss, n, min_distance)) for bid, r in pooled.items()
	)


def distance_error(estimate, truth):
	return math.hypot(estimate[0] - truth[0], estimate[1] - truth[1])
