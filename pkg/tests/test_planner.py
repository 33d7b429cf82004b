#!/usr/bin/env python3

"""Unit tests for planner module."""

import sys
import os
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import unittest
import numpy as np
import scipy.sparse as sp
from matrices import DimensionError, SparseMatrix, partition_rows
from generators import band, laplace1d
from planner import (CommModel, PlanError, RedundancyPlan, backup_destination, compute_redundancy_plan,
                     compute_send_sets, estimate_overhead, multiplicity, verify_plan, zero_latency_condition)

def dense_spd(n):
    return SparseMatrix.from_dense(np.ones((n, n)) + n * np.eye(n))

def random_spd_pattern(rng, n, density):
    """Symmetric random pattern with a dominant diagonal."""
    coupling = sp.random(n, n, density=density, random_state=rng, format="csr")
    return SparseMatrix.from_scipy(coupling + coupling.T + sp.identity(n) * (n + 1.0))

def random_instance(rng, max_n=48):
    node_count = int(rng.integers(2, 17))
    n = int(rng.integers(node_count, max(node_count + 1, max_n)))
    matrix = random_spd_pattern(rng, n, float(rng.uniform(0.0, 0.3)))
    redundancy = int(rng.integers(0, node_count))
    pattern = compute_send_sets(matrix, partition_rows(n, node_count))
    return pattern, redundancy

def without_element(plan, owner, round_index, element):
    extra_sets = dict(plan.extra_sets)
    extra_sets[(owner, round_index)] = np.setdiff1d(plan.extra_set(owner, round_index), [element])
    return RedundancyPlan(plan.redundancy, plan.node_count, plan.destinations, extra_sets, plan.pattern)

class TestSendSets(unittest.TestCase):
    def setUp(self):
        self.pattern = compute_send_sets(laplace1d(8), partition_rows(8, 4))

    def test_tridiagonal(self):
        """Test send sets of tridiag(-1, 2, -1) on 4 nodes."""
        self.assertEqual(self.pattern.send_set(0, 1).tolist(), [1])
        self.assertEqual(self.pattern.send_set(1, 0).tolist(), [2])
        self.assertEqual(self.pattern.send_set(1, 2).tolist(), [3])
        self.assertEqual(self.pattern.send_set(0, 2).tolist(), [])
        self.assertEqual(self.pattern.send_set(3, 0).tolist(), [])
        self.assertEqual(self.pattern.receivers(1), [0, 2])

    def test_diagonal_has_no_sends(self):
        """Test a diagonal matrix needs no communication."""
        pattern = compute_send_sets(SparseMatrix.from_dense(np.eye(8)), partition_rows(8, 4))
        self.assertEqual(pattern.send_sets, {})
        self.assertTrue(all(multiplicity(pattern, 0, s) == 0 for s in range(2)))

    def test_dense_sends_everything(self):
        """Test a dense matrix sends every owned element to every other node."""
        pattern = compute_send_sets(dense_spd(8), partition_rows(8, 4))
        for owner in range(4):
            for receiver in range(4):
                if receiver != owner:
                    self.assertEqual(pattern.send_set(owner, receiver).tolist(),
                                     pattern.owned_set(owner).tolist())
            self.assertEqual(pattern.multiplicities(owner).tolist(), [3, 3])

    def test_multiplicity(self):
        """Test multiplicities on the tridiagonal pattern."""
        self.assertEqual(multiplicity(self.pattern, 0, 0), 0)
        self.assertEqual(multiplicity(self.pattern, 0, 1), 1)
        self.assertEqual(multiplicity(self.pattern, 1, 2), 1)
        with self.assertRaises(ValueError):
            multiplicity(self.pattern, 0, 2)

    def test_dimension_mismatch(self):
        """Test a partition of the wrong size is rejected."""
        with self.assertRaises(DimensionError):
            compute_send_sets(laplace1d(8), partition_rows(6, 3))

class TestBackupDestination(unittest.TestCase):
    def test_rounds(self):
        """Test odd rounds step forward and even rounds step backward."""
        self.assertEqual(backup_destination(0, 1, 8), 1)
        self.assertEqual(backup_destination(0, 2, 8), 7)
        self.assertEqual(backup_destination(5, 3, 8), 7)
        self.assertEqual(backup_destination(7, 1, 8), 0)

    def test_destinations_distinct(self):
        """Test the first N-1 rounds reach every other node exactly once."""
        for node_count in (2, 5, 8):
            for owner in range(node_count):
                dests = [backup_destination(owner, k, node_count) for k in range(1, node_count)]
                self.assertEqual(sorted(dests), sorted(set(range(node_count)) - {owner}))

    def test_round_out_of_range(self):
        """Test invalid rounds raise PlanError."""
        with self.assertRaises(PlanError):
            backup_destination(0, 0, 4)
        with self.assertRaises(PlanError):
            backup_destination(0, 4, 4)

class TestRedundancyPlan(unittest.TestCase):
    def setUp(self):
        self.pattern = compute_send_sets(laplace1d(8), partition_rows(8, 4))

    def test_tridiagonal_single_redundancy(self):
        """Test the planned extra set and destination of node 0."""
        plan = compute_redundancy_plan(self.pattern, 1)
        self.assertEqual(plan.destination(0, 1), 1)
        self.assertEqual(plan.extra_set(0, 1).tolist(), [0])
        self.assertEqual(plan.extra_set(3, 1).tolist(), [7])
        self.assertEqual(plan.extra_set(1, 1).tolist(), [])
        self.assertEqual(plan.round_for(0, 1), 1)
        self.assertIsNone(plan.round_for(0, 2))

    def test_extra_sets_can_grow(self):
        """Test a later round may need more extras than an earlier one."""
        plan = compute_redundancy_plan(self.pattern, 2)
        self.assertEqual(plan.extra_set(0, 1).tolist(), [0])
        self.assertEqual(plan.extra_set(0, 2).tolist(), [0, 1])
        self.assertFalse(plan.is_monotone())
        self.assertTrue(verify_plan(plan, self.pattern).passed)
        self.assertTrue(compute_redundancy_plan(self.pattern, 1).is_monotone())

    def test_zero_redundancy(self):
        """Test no extras are planned without redundancy."""
        plan = compute_redundancy_plan(self.pattern, 0)
        self.assertEqual(plan.total_extra(), 0)
        self.assertEqual(plan.destinations, {})
        self.assertTrue(verify_plan(plan, self.pattern).passed)

    def test_dense_needs_no_extras(self):
        """Test dense coupling already provides every copy."""
        pattern = compute_send_sets(dense_spd(8), partition_rows(8, 4))
        plan = compute_redundancy_plan(pattern, 3)
        self.assertEqual(plan.total_extra(), 0)
        self.assertTrue(verify_plan(plan, pattern).passed)

    def test_redundancy_out_of_range(self):
        """Test redundancy of N or more is rejected."""
        with self.assertRaises(PlanError):
            compute_redundancy_plan(self.pattern, 4)
        with self.assertRaises(PlanError):
            compute_redundancy_plan(self.pattern, -1)
        with self.assertRaises(PlanError):
            compute_redundancy_plan(self.pattern, 1, node_count=5)

    def test_json_dict(self):
        """Test the JSON form lists every destination."""
        document = compute_redundancy_plan(self.pattern, 2).to_json_dict()
        self.assertEqual(document["rho"], 2)
        self.assertEqual(len(document["destinations"]), 8)
        self.assertIn([0, 1, [0]], document["extra_sets"])

    def test_single_redundancy_matches_neighbor_scheme(self):
        """Test that for one failure the extras are the unsent elements, sent to the next node."""
        rng = np.random.default_rng(11)
        for _ in range(50):
            node_count = int(rng.integers(2, 12))
            n = int(rng.integers(node_count, 40))
            matrix = random_spd_pattern(rng, n, float(rng.uniform(0.0, 0.2)))
            pattern = compute_send_sets(matrix, partition_rows(n, node_count))
            plan = compute_redundancy_plan(pattern, 1)
            for owner in range(node_count):
                self.assertEqual(plan.destination(owner, 1), (owner + 1) % node_count)
                unsent = pattern.owned_set(owner)[pattern.multiplicities(owner) == 0]
                self.assertEqual(plan.extra_set(owner, 1).tolist(), unsent.tolist())

class TestVerifyPlan(unittest.TestCase):
    def test_tridiagonal_passes(self):
        """Test the computed plan passes the brute-force check."""
        pattern = compute_send_sets(laplace1d(8), partition_rows(8, 4))
        self.assertTrue(verify_plan(compute_redundancy_plan(pattern, 1), pattern).passed)

    def test_emptied_extra_set_fails(self):
        """Test removing element 0 from node 0's extras breaks coverage."""
        pattern = compute_send_sets(laplace1d(8), partition_rows(8, 4))
        plan = without_element(compute_redundancy_plan(pattern, 1), 0, 1, 0)
        report = verify_plan(plan, pattern)
        self.assertFalse(report.passed)
        self.assertEqual(report.violations, [(0, 0, 0)])

    def test_coverage_random(self):
        """Test coverage on random patterns, node counts and redundancy degrees."""
        rng = np.random.default_rng(2024)
        for _ in range(200):
            pattern, redundancy = random_instance(rng)
            plan = compute_redundancy_plan(pattern, redundancy)
            report = verify_plan(plan, pattern)
            self.assertTrue(report.passed, report.to_dict())

    def test_minimality_random(self):
        """Test removing any planned extra element breaks coverage on small instances."""
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(15):
            pattern, redundancy = random_instance(rng, max_n=32)
            plan = compute_redundancy_plan(pattern, redundancy)
            for (owner, k), extras in plan.extra_sets.items():
                for element in extras:
                    self.assertFalse(verify_plan(without_element(plan, owner, k, element), pattern).passed)
                    checked += 1
        self.assertGreater(checked, 0)

class TestOverhead(unittest.TestCase):
    def setUp(self):
        self.pattern = compute_send_sets(laplace1d(8), partition_rows(8, 4))

    def test_cap(self):
        """Test the closed-form cap."""
        plan = compute_redundancy_plan(self.pattern, 2)
        estimate = estimate_overhead(plan, self.pattern, latency=1.0, bandwidth_cost=0.5)
        self.assertEqual(estimate.cap_time, 4.0)
        self.assertLessEqual(estimate.lower_time, estimate.upper_time)
        self.assertLessEqual(estimate.upper_time, estimate.cap_time)

    def test_tridiagonal_zero_latency(self):
        """Test the lower bound with unit element cost and zero latency."""
        plan = compute_redundancy_plan(self.pattern, 1)
        estimate = estimate_overhead(plan, self.pattern, latency=0.0, bandwidth_cost=1.0)
        self.assertEqual(estimate.lower_time, 1.0)
        self.assertEqual(estimate.upper_time, 1.0)
        self.assertEqual(estimate.lower_elements, 1)
        self.assertEqual(estimate.upper_elements, 2)

    def test_extra_edge_latency(self):
        """Test the wraparound edge from node 3 to node 0 pays one latency."""
        plan = compute_redundancy_plan(self.pattern, 1)
        estimate = estimate_overhead(plan, self.pattern, latency=1.0, bandwidth_cost=1.0)
        self.assertEqual(estimate.upper_time, 2.0)
        per_pair = estimate_overhead(plan, self.pattern, latency={(3, 0): 5.0}, bandwidth_cost=1.0)
        self.assertEqual(per_pair.upper_time, 6.0)

    def test_no_extras(self):
        """Test the lower bound is zero when nothing extra is sent."""
        pattern = compute_send_sets(dense_spd(8), partition_rows(8, 4))
        estimate = estimate_overhead(compute_redundancy_plan(pattern, 3), pattern)
        self.assertEqual(estimate.lower_time, 0.0)
        self.assertEqual(estimate.upper_time, 0.0)

    def test_bounds_random(self):
        """Test lower <= upper <= cap on random instances."""
        rng = np.random.default_rng(5)
        for _ in range(50):
            pattern, redundancy = random_instance(rng)
            estimate = estimate_overhead(compute_redundancy_plan(pattern, redundancy), pattern,
                                         latency=float(rng.uniform(0, 2)), bandwidth_cost=0.1)
            self.assertLessEqual(estimate.lower_time, estimate.upper_time + 1e-12)
            self.assertLessEqual(estimate.upper_time, estimate.cap_time + 1e-12)

    def test_negative_costs(self):
        """Test negative latency and non-positive element cost are rejected."""
        plan = compute_redundancy_plan(self.pattern, 1)
        with self.assertRaises(ValueError):
            estimate_overhead(plan, self.pattern, latency=-1.0)
        with self.assertRaises(ValueError):
            estimate_overhead(plan, self.pattern, bandwidth_cost=0.0)

    def test_allreduce_time(self):
        """Test the tree allreduce cost."""
        model = CommModel(latency=1.0, bandwidth_cost=0.5)
        self.assertEqual(model.allreduce_time(1), 0.0)
        self.assertEqual(model.allreduce_time(4), 2 * 1.5)
        self.assertEqual(model.allreduce_time(5, width=2), 3 * 2.0)

class TestZeroLatencyCondition(unittest.TestCase):
    def test_tridiagonal(self):
        """Test forward neighbors are always coupled except at the wraparound."""
        result = zero_latency_condition(laplace1d(8), partition_rows(8, 4), 1)
        self.assertEqual([result[(i, 1)] for i in range(4)], [True, True, True, False])

    def test_diagonal(self):
        """Test a diagonal matrix never satisfies the condition."""
        result = zero_latency_condition(SparseMatrix.from_dense(np.eye(8)), partition_rows(8, 4), 2)
        self.assertFalse(any(result.values()))

    def test_wide_band(self):
        """Test a cyclic band of bandwidth at least ceil(rho n / 2N) satisfies it everywhere."""
        n, node_count, redundancy = 64, 8, 3
        half_bandwidth = int(np.ceil(redundancy * n / (2 * node_count)))
        result = zero_latency_condition(band(n, half_bandwidth, 0.1), partition_rows(n, node_count),
                                        redundancy)
        self.assertTrue(all(result.values()))

if __name__ == '__main__':
    unittest.main()
