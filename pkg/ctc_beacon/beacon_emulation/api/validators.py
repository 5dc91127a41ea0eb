# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
Input validators
Check identity and scenario documents before the CLI hands them to the engine:
- iBeacon identity JSON
- Scenario JSON (deployment, attack plan, evaluation points)
- PRR run options
"""

from ctc_beacon.beacon_emulation.attack_sim import SCENARIO_SCHEMA, ScenarioConfig, ScenarioMode
from ctc_beacon.beacon_emulation.ble_link import IBeaconIdentity
from ctc_beacon.beacon_emulation.emulation import QAM_ORDERS, Variant
from ctc_beacon.beacon_emulation.exceptions import BeaconEmulationError
from ctc_beacon.beacon_emulation.utils import logger

# ==================== IDENTITY VALIDATION ====================


def validate_identity(data):
	"""
	Validate an iBeacon identity document

	Returns:
	    dict: {"valid": bool, "errors": [...], "warnings": [...], "identity": IBeaconIdentity | None}
	"""
	errors = []
	warnings = []
	identity = None

	try:
		identity = IBeaconIdentity.from_json(data)
	except BeaconEmulationError as e:
		errors.append(str(e))

	if identity is not None and not -100 <= identity.tx_power_ref <= -20:
		warnings.append(f"tx_power_ref {identity.tx_power_ref} dBm is outside the usual iBeacon range")

	return {
		"valid": len(errors) == 0,
		"errors": errors,
		"warnings": warnings,
		"identity": identity,
	}


# ==================== SCENARIO VALIDATION ====================


def _scenario_warnings(scenario, mode):
	warnings = []
	if not scenario.aps:
		warnings.append("No WiFi APs deployed; every mode reduces to its baseline")
	for ap in scenario.aps:
		if ap.advertised_ref == ap.true_power:
			warnings.append(f"{ap.source_id} advertises its true power; ranging is not biased")
	if mode == ScenarioMode.TRILAT and len(scenario.beacons) < 3:
		warnings.append("Fewer than 3 beacons; multilateration cannot run")
	if scenario.min_distance is not None:
		warnings.append(f"Victim distance clamp of {scenario.min_distance} m is active")
	return warnings


def validate_scenario(data, mode=None):
	"""
	Validate a scenario document

	Args:
	    data: Parsed JSON
	    mode: Optional scenario mode the document will run in

	Returns:
	    dict: {"valid": bool, "errors": [...], "warnings": [...], "scenario": ScenarioConfig | None}
	"""
	errors = []
	warnings = []
	scenario = None

	if isinstance(data, dict) and data.get("schema") != SCENARIO_SCHEMA:
		errors.append(f"Scenario schema must be {SCENARIO_SCHEMA}, got {data.get('schema')!r}")
	else:
		try:
			scenario = ScenarioConfig.from_json(data)
			if scenario.aps:
				scenario.plan()
		except BeaconEmulationError as e:
			errors.append(str(e))
			scenario = None

	if mode is not None:
		try:
			mode = ScenarioMode(mode)
		except ValueError:
			errors.append(f"Unknown scenario mode {mode!r}")
			mode = None

	if scenario is not None:
		warnings.extend(_scenario_warnings(scenario, mode))
		if mode == ScenarioMode.POINT and scenario.point is None:
			errors.append("Point mode needs at least one beacon and one AP")

	for warning in warnings:
		logger("validators").warning(warning)

	return {
		"valid": len(errors) == 0,
		"errors": errors,
		"warnings": warnings,
		"scenario": scenario if not errors else None,
	}


# ==================== RUN OPTIONS ====================


def validate_prr_options(variant, qam, trials, snr_db=None):
	"""
	Validate the options of a PRR run

	Returns:
	    dict: {"valid": bool, "errors": [...], "warnings": [...]}
	"""
	errors = []
	warnings = []

	if variant not in {v.value for v in Variant}:
		errors.append(f"Unknown variant {variant!r}")
	if qam not in {"off", *[str(q) for q in QAM_ORDERS]}:
		errors.append(f"QAM order must be off or one of {list(QAM_ORDERS)}, got {qam!r}")
	if trials is None or trials < 1:
		errors.append(f"Trials must be >= 1, got {trials}")
	elif trials < 1000:
		warnings.append(f"{trials} trials give a wide confidence interval")
	if snr_db is not None and snr_db < 0:
		warnings.append(f"SNR of {snr_db} dB is below the noise floor")

	return {
		"valid": len(errors) == 0,
		"errors": errors,
		"warnings": warnings,
	}
