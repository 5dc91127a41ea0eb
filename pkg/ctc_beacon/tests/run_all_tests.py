#!/usr/bin/env python3
# =============================================================================
# Master Test Runner - Runs all tests
# =============================================================================

import sys
import unittest

SUITES = [
	("BLE Link Layer", "ctc_beacon.tests.test_ble_link"),
	("OFDM Emulation", "ctc_beacon.tests.test_emulation"),
	("Downsampling Receiver", "ctc_beacon.tests.test_receiver"),
	("Radio Environment", "ctc_beacon.tests.test_radio_env"),
	("Localization", "ctc_beacon.tests.test_localization"),
	("Attack Simulation", "ctc_beacon.tests.test_attack_sim"),
	("Validators", "ctc_beacon.tests.test_validators"),
	("Command Line", "ctc_beacon.tests.test_cli"),
	("Utilities", "ctc_beacon.tests.test_utils"),
]


def run_all_tests():
	"""Run all test suites"""

	print("\n" + "=" * 80)
	print("🧪 CTC BEACON - MASTER TEST RUNNER")
	print("=" * 80 + "\n")

	all_passed = True
	loader = unittest.TestLoader()
	runner = unittest.TextTestRunner(verbosity=1)

	for number, (title, module) in enumerate(SUITES, start=1):
		print("\n" + "=" * 80)
		print(f"Running Test Suite {number}: {title}...")
		try:
			result = runner.run(loader.loadTestsFromName(module))
			if not result.wasSuccessful():
				all_passed = False
		except Exception as e:
			print(f"❌ Test Suite {number} Failed: {str(e)}")
			all_passed = False

	print("\n" + "=" * 80)
	if all_passed:
		print("✅ ALL TEST SUITES PASSED")
	else:
		print("❌ SOME TESTS FAILED - CHECK LOGS")
	print("=" * 80 + "\n")

	return all_passed


if __name__ == "__main__":
	result = run_all_tests()
	sys.exit(0 if result else 1)
