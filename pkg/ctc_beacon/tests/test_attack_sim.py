# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

import copy
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from ctc_beacon.beacon_emulation.attack_sim import (
	REPORT_CSV_HEADER,
	AssignmentStrategy,
	AttackPlan,
	AttackReport,
	ReportRow,
	ScenarioConfig,
	assign_impersonations,
	attack_sources,
	build_fingerprint_database,
	detection_metrics,
	harvest_identities,
	reachable_positions,
	run_fingerprint_attack,
	run_multilateration_attack,
	run_point_attack,
	run_scenario,
)
from ctc_beacon.beacon_emulation.ble_link import default_identity
from ctc_beacon.beacon_emulation.exceptions import SchemaError, ValidationError
from ctc_beacon.beacon_emulation.radio_env import observe_window
from ctc_beacon.beacon_emulation.utils import read_json
from ctc_beacon.config import DEFAULT_SCENARIO


def identity_json(minor, power=-64):
	return default_identity(minor=minor, tx_power_ref=power).to_json()


BASE_DOC = {
	"schema": 1,
	"name": "unit",
	"area": {"w": 20, "h": 20},
	"seed": 7,
	"window": 1.0,
	"trials": 2,
	"model": {"n": 2, "sigma_beacon": 0, "sigma_ap": 0},
	"beacons": [
		{"id": "b1", "x": 2, "y": 2, "identity": identity_json(1)},
		{"id": "b2", "x": 18, "y": 2, "identity": identity_json(2)},
		{"id": "b3", "x": 10, "y": 18, "identity": identity_json(3)},
		{"id": "b4", "x": 2, "y": 18, "identity": identity_json(4)},
	],
	"aps": [
		{"id": "ap1", "x": 10, "y": 10, "true_power": -64, "advertised_ref": -40, "prr": 1, "scan_coverage": 1},
		{"id": "ap2", "x": 4, "y": 10, "true_power": -64, "advertised_ref": -40, "prr": 1, "scan_coverage": 1},
	],
	"eval_points": [[6, 6], [12, 8], [8, 14]],
	"attack": {"strategy": "farthest", "ids_per_ap": 1},
	"point": {"beacon": "b1", "ap": "ap1", "points": [[4, 2]], "sweep": [-46, -40]},
	"trilat": {"ap_counts": [0, 1], "case_study": {"point": [8, 8], "levels": [-64, -40], "ap_count": 1}},
	"fingerprint": {"ap_counts": [0, 1, 2], "k": 1, "multi_id_ap_count": 1, "sigma_levels": [0, 8]},
}


def make_scenario(**overrides):
	doc = copy.deepcopy(BASE_DOC)
	doc.update(overrides)
	return ScenarioConfig.from_json(doc)


class TestScenarioConfig(unittest.TestCase):
	def test_parse(self):
		scenario = make_scenario()
		self.assertEqual(len(scenario.beacons), 4)
		self.assertEqual(scenario.ap("ap2").position, (4.0, 10.0))
		self.assertEqual(scenario.point_ids(), ["p001", "p002", "p003"])
		self.assertEqual(scenario.point.sweep, (-46.0, -40.0))
		self.assertEqual(scenario.trilat.case_point, (8.0, 8.0))
		self.assertEqual(scenario.fingerprint.k, 1)
		self.assertIs(scenario.strategy, AssignmentStrategy.FARTHEST)

	def test_bundled_scenario(self):
		scenario = ScenarioConfig.from_json(read_json(DEFAULT_SCENARIO))
		self.assertEqual(len(scenario.beacons), 7)
		self.assertEqual(len(scenario.aps), 6)
		self.assertEqual(len(scenario.eval_points), 120)
		plan = scenario.plan()
		self.assertEqual(len(set(plan.covered_ids())), 6)

	def test_defaults(self):
		doc = copy.deepcopy(BASE_DOC)
		for key in ("point", "trilat", "fingerprint", "eval_points"):
			doc.pop(key)
		scenario = ScenarioConfig.from_json(doc)
		self.assertEqual(scenario.point.beacon, "b1")
		self.assertEqual(scenario.point.ap, "ap1")
		self.assertEqual(scenario.point.points[0], (3.0, 2.0))
		self.assertEqual(len(scenario.point.points), 10)
		self.assertEqual(scenario.trilat.ap_counts, (0, 1, 2, 3))
		self.assertEqual(scenario.fingerprint.ap_counts, (0, 1, 2))
		self.assertTrue(scenario.eval_points)

	def test_grid_points(self):
		scenario = make_scenario(eval_points={"grid": {"x": [2, 6, 2], "y": [4, 8, 4]}})
		self.assertEqual(
			list(scenario.eval_points), [(2.0, 4.0), (4.0, 4.0), (6.0, 4.0), (2.0, 8.0), (4.0, 8.0), (6.0, 8.0)]
		)
		with self.assertRaises(SchemaError):
			make_scenario(eval_points={"grid": {"x": [2, 6, 0], "y": [4, 8, 4]}})

	def test_rejects_bad_documents(self):
		with self.assertRaises(SchemaError):
			make_scenario(schema=2)
		with self.assertRaises(SchemaError):
			ScenarioConfig.from_json({"schema": 1, "beacons": []})
		with self.assertRaises(SchemaError):
			make_scenario(point={"beacon": "b9"})
		with self.assertRaises(ValidationError):
			make_scenario(area={"w": 5, "h": 5})
		with self.assertRaises(ValidationError):
			make_scenario(trials=0)

		doc = copy.deepcopy(BASE_DOC)
		doc["beacons"][1]["identity"] = identity_json(1)
		with self.assertRaises(ValidationError):
			ScenarioConfig.from_json(doc)
		doc = copy.deepcopy(BASE_DOC)
		doc["aps"][1]["id"] = "b1"
		with self.assertRaises(ValidationError):
			ScenarioConfig.from_json(doc)


class TestAssignment(unittest.TestCase):
	def setUp(self):
		self.scenario = make_scenario()

	def test_farthest_is_exclusive(self):
		plan = assign_impersonations(self.scenario.aps, self.scenario.beacons, "farthest")
		self.assertEqual(plan.ids_for("ap1"), ("b1",))
		self.assertEqual(plan.ids_for("ap2"), ("b2",))
		self.assertEqual(plan.enabled_ap_count, 2)

	def test_multiple_ids_per_ap(self):
		plan = assign_impersonations(self.scenario.aps, self.scenario.beacons, "farthest", ids_per_ap=2)
		covered = plan.covered_ids()
		self.assertEqual(len(covered), 4)
		self.assertEqual(len(set(covered)), 4)
		with self.assertRaises(ValidationError):
			assign_impersonations(self.scenario.aps, self.scenario.beacons, "farthest", ids_per_ap=3)

	def test_random_is_seeded(self):
		aps, beacons = self.scenario.aps, self.scenario.beacons
		first = assign_impersonations(aps, beacons, "random", rng=np.random.default_rng(3))
		second = assign_impersonations(aps, beacons, "random", rng=np.random.default_rng(3))
		self.assertEqual(first, second)
		self.assertEqual(len(set(first.covered_ids())), 2)
		with self.assertRaises(ValidationError):
			assign_impersonations(aps, beacons, "random")

	def test_manual(self):
		aps, beacons = self.scenario.aps, self.scenario.beacons
		plan = assign_impersonations(aps, beacons, "manual", manual={"ap1": ["b3", "b4"]})
		self.assertEqual(plan.ids_for("ap1"), ("b3", "b4"))
		self.assertEqual(plan.ids_for("ap2"), ())
		with self.assertRaises(ValidationError):
			assign_impersonations(aps, beacons, "manual", manual={"ap1": ["b9"]})

	def test_enabled_count(self):
		plan = self.scenario.plan(enabled_ap_count=1)
		self.assertEqual(plan.covered_ids(), ["b1"])
		sources = attack_sources(self.scenario, plan)
		self.assertEqual([s.source_id for s in sources], ["ap1"])
		self.assertEqual(sources[0].impersonated_ids, (self.scenario.beacon("b1").impersonated_ids[0],))
		self.assertEqual(attack_sources(self.scenario, self.scenario.plan(enabled_ap_count=0)), [])
		with self.assertRaises(ValidationError):
			AttackPlan((("ap1", ("b1",)),), "farthest", 2)

	def test_needs_aps_and_beacons(self):
		with self.assertRaises(ValidationError):
			assign_impersonations((), self.scenario.beacons, "farthest")


class TestHarvestAndDetection(unittest.TestCase):
	def setUp(self):
		self.scenario = make_scenario()

	def test_harvest_identities(self):
		obs = observe_window(self.scenario.beacons, (6, 6), self.scenario.model, 1.0, seed=1)
		harvested = harvest_identities(obs)
		self.assertEqual(
			[h.identity for h in harvested], [b.impersonated_ids[0] for b in self.scenario.beacons]
		)
		self.assertTrue(all(h.count == 10 for h in harvested))

	def test_detection_metrics(self):
		plan = self.scenario.plan()
		sources = attack_sources(self.scenario, plan)
		obs = observe_window(sources, (10, 11), self.scenario.model, 1.0, seed=2)
		tally = detection_metrics(obs, sources, 1.0)
		row = tally.as_row("trilat", 2)
		self.assertEqual(row["observations"], 20)
		self.assertEqual(row["observed_rate"], 1.0)
		self.assertEqual(row["above_normal_fraction"], 0.5)

	def test_fingerprint_database(self):
		db = build_fingerprint_database(self.scenario)
		self.assertEqual(len(db), 3)
		self.assertEqual(len(db.beacon_ids), 4)
		expected = -64 - 20 * math.log10(math.hypot(4, 4))
		b1 = self.scenario.beacon("b1").impersonated_ids[0].beacon_id
		self.assertAlmostEqual(db.spots[0].vector[b1], expected)


class TestPointAttack(unittest.TestCase):
	@classmethod
	def setUpClass(cls):
		cls.report = run_point_attack(make_scenario())

	def test_baseline_is_exact(self):
		errors = self.report.errors("point_baseline", 0)
		self.assertEqual(errors.size, 1)
		self.assertAlmostEqual(errors[0], 0.0, places=9)

	def test_fake_only_distance(self):
		# victim 2 m from b1 and 10 m from ap1, which advertises -40 over a true -64
		errors = self.report.errors("point_fake_only", 1)
		self.assertAlmostEqual(errors[0], 10 * 10**1.2 - 2, places=6)
		self.assertGreater(self.report.errors("point_attack", 1)[0], 1.0)

	def test_advertised_boost_at_two_metres(self):
		# victim 2 m from the AP, which advertises -40 over a true -64
		aps = copy.deepcopy(BASE_DOC["aps"])
		aps[0].update(x=4, y=4)
		report = run_point_attack(make_scenario(aps=aps))
		estimates = {level: estimate for level, estimate, _ in report.sweep}
		self.assertAlmostEqual(estimates[-40.0], 31.70, delta=0.317)
		self.assertAlmostEqual(report.errors("point_fake_only", 1)[0], 31.70 - 2, delta=0.317)

	def test_sweep(self):
		levels = [level for level, _, _ in self.report.sweep]
		estimates = {level: estimate for level, estimate, _ in self.report.sweep}
		self.assertEqual(levels, [-46.0, -40.0])
		self.assertAlmostEqual(estimates[-40.0], 10 * 10**1.2, places=6)
		self.assertAlmostEqual(estimates[-40.0] / estimates[-46.0], 10**0.3, places=9)

	def test_zones(self):
		zones = {row[0]: row for row in self.report.zones}
		self.assertEqual(zones["point_baseline"][2:], ("near", "near", "false"))
		self.assertEqual(zones["point_fake_only"][2:], ("near", "far", "true"))

	def test_detection_rows(self):
		rows = {d["mode"]: d for d in self.report.detection}
		self.assertEqual(rows["point_baseline"]["observed_rate"], 1.0)
		self.assertEqual(rows["point_baseline"]["observations"], 20)

	def test_clamp_note(self):
		with self.assertLogs("ctc_beacon.attack_sim", level="WARNING"):
			report = run_point_attack(make_scenario(min_distance=5.0))
		self.assertTrue(report.notes)
		self.assertAlmostEqual(report.errors("point_baseline", 0)[0], 3.0)


class TestMultilaterationAttack(unittest.TestCase):
	@classmethod
	def setUpClass(cls):
		cls.scenario = make_scenario()
		cls.report = run_multilateration_attack(cls.scenario)

	def test_attack_degrades_the_fix(self):
		baseline = self.report.errors("trilat", 0)
		attacked = self.report.errors("trilat", 1)
		self.assertEqual(baseline.size, 3)
		self.assertLess(baseline.max(), 1e-4)
		self.assertGreater(np.median(attacked), np.median(baseline) + 0.1)

	def test_reachable_positions(self):
		self.assertEqual(len(self.report.reachable), 2)
		outcomes = reachable_positions(self.scenario, (8, 8), [-64, -40], 1)
		self.assertEqual([combo for combo, _ in outcomes], [(-64,), (-40,)])
		self.assertGreater(math.dist(outcomes[0][1], outcomes[1][1]), 0.5)
		self.assertTrue(self.report.reachable[0][0].startswith("ap1=-64"))

	def test_same_result_for_any_job_count(self):
		pooled = run_scenario(self.scenario, "trilat", jobs=2)
		np.testing.assert_allclose(pooled.errors("trilat", 1), self.report.errors("trilat", 1))

	def test_needs_three_beacons(self):
		doc = copy.deepcopy(BASE_DOC)
		doc["beacons"] = doc["beacons"][:2]
		doc["fingerprint"]["multi_id_ap_count"] = 0
		with self.assertRaises(ValidationError):
			run_multilateration_attack(ScenarioConfig.from_json(doc))


class TestFingerprintAttack(unittest.TestCase):
	@classmethod
	def setUpClass(cls):
		cls.report = run_fingerprint_attack(make_scenario())

	def test_groups(self):
		groups = list(self.report.groups())
		self.assertEqual(
			groups,
			[
				("fingerprint", 0),
				("fingerprint", 1),
				("fingerprint", 2),
				("fingerprint_multi_id", 1),
				("fingerprint_sigma_0", 2),
				("fingerprint_sigma_8", 2),
			],
		)

	def test_baseline_is_exact(self):
		self.assertLess(self.report.errors("fingerprint", 0).max(), 1e-6)

	def test_noise_free_trials_agree(self):
		rows = [r for r in self.report.rows if r.mode == "fingerprint_sigma_0"]
		self.assertTrue(all(r.stddev_m == 0.0 for r in rows))


class TestBundledScenario(unittest.TestCase):
	@classmethod
	def setUpClass(cls):
		cls.scenario = ScenarioConfig.from_json(read_json(DEFAULT_SCENARIO))
		cls.trilat = run_multilateration_attack(cls.scenario)
		cls.fingerprint = run_fingerprint_attack(cls.scenario)

	def test_trilateration_error_grows_with_ap_count(self):
		medians = [float(np.median(self.trilat.errors("trilat", n))) for n in (0, 1, 2, 3)]
		self.assertGreaterEqual(medians[1], 5 * medians[0])
		self.assertTrue(all(a <= b for a, b in zip(medians, medians[1:])), medians)

	def test_fingerprint_error_with_every_ap(self):
		baseline = self.fingerprint.errors("fingerprint", 0).mean()
		self.assertGreaterEqual(self.fingerprint.errors("fingerprint", 6).mean(), 4 * baseline)

	def test_second_identity_per_ap_adds_error(self):
		single = self.fingerprint.errors("fingerprint", 3).mean()
		self.assertGreater(self.fingerprint.errors("fingerprint_multi_id", 3).mean(), single)

	def test_spread_grows_with_ap_shadowing(self):
		spreads = [
			np.mean([r.stddev_m for r in self.fingerprint.rows if r.mode == f"fingerprint_sigma_{sigma}"])
			for sigma in (2, 5, 8)
		]
		self.assertTrue(spreads[0] < spreads[1] < spreads[2], spreads)

	def test_report_bytes_do_not_depend_on_job_count(self):
		pooled = run_scenario(self.scenario, "trilat", jobs=2)
		with tempfile.TemporaryDirectory() as serial_dir, tempfile.TemporaryDirectory() as pooled_dir:
			self.trilat.write(serial_dir)
			pooled.write(pooled_dir)
			self.assertEqual(
				(Path(serial_dir) / "report.csv").read_bytes(), (Path(pooled_dir) / "report.csv").read_bytes()
			)


class TestAttackReport(unittest.TestCase):
	def setUp(self):
		self.report = AttackReport("unit")
		for i, error in enumerate([0.5, 2.0, 1.0, 4.0]):
			self.report.rows.append(ReportRow("trilat", 1, f"p{i + 1:03d}", i, 0.0, error, 0.1))
		self.report.notes.append("clamp active")

	def test_summary_and_cdf(self):
		summary = self.report.summary()[0]
		self.assertEqual(summary["points"], 4)
		self.assertAlmostEqual(summary["mean_error_m"], 1.875)
		self.assertAlmostEqual(summary["median_error_m"], 1.5)

		levels, quantiles = self.report.cdf("trilat", 1)
		self.assertEqual(len(levels), 101)
		self.assertTrue(np.all(np.diff(quantiles) >= 0))
		self.assertEqual(quantiles[0], 0.5)
		self.assertEqual(quantiles[-1], 4.0)

	def test_write(self):
		with tempfile.TemporaryDirectory() as tmp:
			written = self.report.write(tmp)
			names = sorted(p.name for p in written)
			self.assertEqual(names, ["cdf_trilat_ap1.dat", "notes.txt", "report.csv", "summary.csv"])
			report_csv = (Path(tmp) / "report.csv").read_text(encoding="utf-8").splitlines()
			self.assertEqual(report_csv[0], ",".join(REPORT_CSV_HEADER))
			self.assertEqual(len(report_csv), 5)
			cdf = (Path(tmp) / "cdf_trilat_ap1.dat").read_text(encoding="utf-8").splitlines()
			self.assertEqual(cdf[1], "# quantile error_m")
			self.assertEqual(len(cdf), 103)


if __name__ == "__main__":
	unittest.main()
