# Copyright (c) 2025, Kunal Verma and contributors
# For license information, please see license.txt

"""
Worker pool for independent trial blocks.
Block sizes and seeds are fixed before dispatch, so results never depend on the worker count.
"""

from joblib import Parallel, delayed

from ctc_beacon.beacon_emulation.utils import log_error, logger


def run_blocks(fn, payloads, jobs=1):
	"""
	Run `fn` over every payload and return results in payload order

	Args:
	    fn: Module-level callable (must be picklable for jobs > 1)
	    payloads: List of arguments, one per block
	    jobs: Worker processes; 1 runs inline

	Returns:
	    list: fn(payload) for each payload, in order
	"""
	payloads = list(payloads)
	jobs = max(1, int(jobs or 1))

	if jobs == 1 or len(payloads) <= 1:
		return [fn(p) for p in payloads]

	workers = min(jobs, len(payloads))
	logger("tasks").info(f"Running {len(payloads)} blocks on {workers} workers")

	try:
		return Parallel(n_jobs=workers)(delayed(fn)(p) for p in payloads)
	except Exception as e:
		log_error(f"Trial block failed: {e}", "Trial Runner")
		raise
