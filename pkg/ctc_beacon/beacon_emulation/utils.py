"""
Core utility functions for the beacon emulation engine
Handles settings, logging, error helpers, phase math, seeding and report writing
"""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from ctc_beacon.beacon_emulation.exceptions import ConfigurationError, ValidationError
from ctc_beacon.config import SETTINGS_FILE

LOGGER_NAME = "ctc_beacon"
SETTINGS_ENV = "CTC_BEACON_SETTINGS"


# ============================================================================
# SETTINGS HELPERS
# ============================================================================


@dataclass(frozen=True)
class SimulationSettings:
	sample_rate_hz: float
	qam_order: int | None
	qam_window_mode: str
	constellation_scale: float | None
	adv_pdu_type: int
	ble_channel: int
	trial_block_size: int
	advertising_interval_s: float
	path_loss_exponent: float
	sigma_beacon_db: float
	sigma_ap_db: float
	scan_coverage_beacon: float
	scan_coverage_ap: float
	fake_prr: float
	distance_clamp_m: float
	wknn_k: int
	wknn_epsilon: float
	missing_rss_dbm: float
	solver_tolerance_m: float
	solver_max_iterations: int
	solver_damping: float
	aggregation_policy: str
	aggregation_window_s: float
	cdf_quantiles: int
	normal_rss_ceiling_dbm: float


def _cast_setting(field_def, raw):
	"""
	Convert a stored default to its Python value

	Args:
	    field_def: Field definition from simulation_settings.json
	    raw: Stored value (defaults are kept as strings, overrides may be native JSON)

	Returns:
	    Value typed by the field's fieldtype; blank Float means None
	"""
	fieldtype = field_def["fieldtype"]
	name = field_def["fieldname"]

	if raw is None or raw == "":
		return None

	try:
		if fieldtype == "Float":
			return float(raw)
		if fieldtype == "Int":
			return int(raw)
		if fieldtype == "Select":
			options = field_def.get("options", "").split("\n")
			value = str(raw)
			if value not in options:
				raise ConfigurationError(f"Setting '{name}' must be one of {options}, got {value!r}")
			if name == "qam_order":
				return None if value == "off" else int(value)
			return value
	except (TypeError, ValueError) as e:
		raise ConfigurationError(f"Setting '{name}' has invalid value {raw!r}: {e}")

	return raw


def _load_settings_fields(path=SETTINGS_FILE):
	with open(path, encoding="utf-8") as f:
		definition = json.load(f)
	return [d for d in definition["fields"] if d["fieldtype"] != "Section Break"]


@lru_cache(maxsize=1)
def get_settings():
	"""Get the Simulation Settings singleton (defaults plus optional override file)"""
	field_defs = _load_settings_fields()
	values = {d["fieldname"]: _cast_setting(d, d.get("default")) for d in field_defs}

	override_path = os.environ.get(SETTINGS_ENV)
	if override_path:
		try:
			with open(override_path, encoding="utf-8") as f:
				overrides = json.load(f)
		except (OSError, json.JSONDecodeError) as e:
			raise ConfigurationError(f"Cannot read settings override {override_path}: {e}")

		known = {d["fieldname"]: d for d in field_defs}
		unknown = sorted(set(overrides) - set(known))
		if unknown:
			raise ConfigurationError(f"Unknown settings in {override_path}: {', '.join(unknown)}")

		for name, raw in overrides.items():
			values[name] = _cast_setting(known[name], raw)

		logger().info(f"Loaded settings overrides from {override_path}: {sorted(overrides)}")

	expected = {f.name for f in fields(SimulationSettings)}
	return SimulationSettings(**{k: v for k, v in values.items() if k in expected})


def reset_settings_cache():
	"""Forget the cached settings (tests and CLI overrides)"""
	get_settings.cache_clear()


# ============================================================================
# LOGGING AND ERROR HELPERS
# ============================================================================


def logger(name=None):
	"""
	Get the package logger

	Args:
	    name: Optional child name ("receiver", "attack_sim", ...)

	Usage:
	    logger().info("message")
	    logger("receiver").warning("message")
	"""
	return logging.getLogger(f"{LOGGER_NAME}.{name}" if name else LOGGER_NAME)


def log_error(message, title="Beacon Emulation"):
	"""Record an error under a title and return the formatted record"""
	record = f"[{title}] {message}"
	logger().error(record)
	return record


def throw(message, exc=ValidationError, title=None):
	"""Log and raise an engine error"""
	if title:
		logger().debug(f"[{title}] {message}")
	raise exc(message)


def configure_logging(level=logging.INFO, stream=None):
	"""Attach a single stderr handler to the package logger"""
	root = logger()
	root.setLevel(level)
	for handler in list(root.handlers):
		root.removeHandler(handler)

	handler = logging.StreamHandler(stream)
	handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
	root.addHandler(handler)
	root.propagate = False
	return root


# ============================================================================
# PHASE AND SEED HELPERS
# ============================================================================


def wrap_phase(phase):
	"""Wrap radians to (-pi, pi]"""
	return np.angle(np.exp(1j * np.asarray(phase, dtype=float)))


def child_seeds(seed, count):
	"""Split a root seed into `count` independent SeedSequences"""
	return np.random.SeedSequence(int(seed)).spawn(int(count))


def keyed_rng(seed, *keys):
	"""Generator whose stream depends only on (seed, keys), never on draw order elsewhere"""
	return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def split_trials(trials, block_size):
	"""Fixed block sizes for a trial count; the split never depends on the worker count"""
	block_size = max(1, int(block_size))
	full, rest = divmod(int(trials), block_size)
	return [block_size] * full + ([rest] if rest else [])


# ============================================================================
# REPORT WRITERS
# ============================================================================


def format_float(value, digits=6):
	if value is None:
		return "none"
	return f"{float(value):.{digits}f}"


def rows_to_csv(header, rows):
	"""
	Render rows as CSV text with '\\n' line endings

	Args:
	    header: Column names
	    rows: Iterable of sequences (already formatted or plain values)

	Returns:
	    str: CSV document
	"""
	buffer = io.StringIO()
	writer = csv.writer(buffer, lineterminator="\n")
	writer.writerow(header)
	for row in rows:
		writer.writerow(row)
	return buffer.getvalue()


def write_text(path, text):
	path = Path(path)
	path.parent.mkdir(parents=True, exist_ok=True)
	with open(path, "w", encoding="utf-8", newline="\n") as f:
		f.write(text)
	return path


def read_json(path):
	"""Read a JSON document, raising ValidationError on malformed content"""
	try:
		with open(path, encoding="utf-8") as f:
			return json.load(f)
	except json.JSONDecodeError as e:
		raise ValidationError(f"Malformed JSON in {path}: {e}")
