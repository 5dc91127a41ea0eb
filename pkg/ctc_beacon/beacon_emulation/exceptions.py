# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
Exception types raised by the beacon emulation engine.

Library code raises these; the CLI maps them to exit codes
(usage/config errors -> 2, everything else -> 1).
"""


class BeaconEmulationError(Exception):
	"""Base class for every error raised by ctc_beacon"""


class ValidationError(BeaconEmulationError, ValueError):
	"""A field value is outside its declared range"""


class LengthError(ValidationError):
	"""A byte or bit sequence has an unsupported length"""


class ShapeError(BeaconEmulationError, ValueError):
	"""An array does not have the sample count an operation needs"""


class ConfigurationError(BeaconEmulationError):
	"""Settings, roles or delays outside the supported set"""


class SchemaError(ValidationError):
	"""A JSON document does not follow the expected schema"""


class InsufficientAnchorsError(BeaconEmulationError):
	pass


class DegenerateGeometryError(BeaconEmulationError):
	pass


class EmptyDatabaseError(BeaconEmulationError):
	pass


# Errors the CLI reports as usage/config problems
USAGE_ERRORS = (ValidationError, ConfigurationError, SchemaError)
