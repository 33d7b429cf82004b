#!/usr/bin/env python3

"""Unit tests for parameters module."""

import sys
import os
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import unittest
import parameters

class TestParameters(unittest.TestCase):
    def test_solver_limits(self):
        """Test solver tolerance and cap constants."""
        self.assertEqual(parameters.DEFAULT_REL_TOLERANCE, 1e-8)
        self.assertEqual(parameters.DEFAULT_INNER_TOLERANCE, 1e-14)
        self.assertEqual(parameters.DIRECT_SOLVE_THRESHOLD, 4096)
        self.assertGreater(parameters.MAX_ITERATIONS, 0)
        self.assertGreater(parameters.INNER_MAX_ITERATIONS, 0)

    def test_runtime_configuration(self):
        """Test runtime configuration defaults."""
        self.assertFalse(parameters.DYNAMIC_MODE)

    def test_cost_model_defaults(self):
        """Test latency-bandwidth defaults."""
        self.assertEqual(parameters.DEFAULT_LATENCY, 1.0)
        self.assertEqual(parameters.DEFAULT_BANDWIDTH_COST, 0.01)

    def test_protocol_defaults(self):
        """Test experiment protocol defaults."""
        self.assertEqual(parameters.DEFAULT_PROGRESS_FRACTIONS, (0.2, 0.5, 0.8))
        self.assertEqual(parameters.FAILURE_LOCATIONS, ("start", "center"))
        self.assertIn("block-jacobi", parameters.PRECONDITIONERS)
        self.assertIn("identity", parameters.PRECONDITIONERS)
        self.assertEqual(parameters.REPORT_FORMATS, ("json", "csv"))

    def test_recovery_stages(self):
        """Test recovery stage ordering."""
        self.assertEqual(parameters.RECOVERY_STAGES[0], "gather")
        self.assertEqual(parameters.RECOVERY_STAGES[-1], "finalize")
        self.assertIn(parameters.DEFAULT_OVERLAP_STAGE, parameters.RECOVERY_STAGES)

    def test_exit_codes(self):
        """Test exit codes."""
        self.assertEqual((parameters.EXIT_SUCCESS, parameters.EXIT_SOLVER_FAILURE,
                          parameters.EXIT_UNRECOVERABLE, parameters.EXIT_USAGE), (0, 1, 2, 3))

    def test_validate_parameters_tolerance(self):
        """Test validation raises error for a tolerance outside (0, 1)."""
        original = parameters.DEFAULT_REL_TOLERANCE
        parameters.DEFAULT_REL_TOLERANCE = 1.5
        try:
            with self.assertRaisesRegex(ValueError, "DEFAULT_REL_TOLERANCE must lie in"):
                parameters.validate_parameters()
        finally:
            parameters.DEFAULT_REL_TOLERANCE = original

    def test_validate_parameters_bandwidth(self):
        """Test validation raises error for a non-positive per-element cost."""
        original = parameters.DEFAULT_BANDWIDTH_COST
        parameters.DEFAULT_BANDWIDTH_COST = 0.0
        try:
            with self.assertRaisesRegex(ValueError, "DEFAULT_BANDWIDTH_COST must be positive"):
                parameters.validate_parameters()
        finally:
            parameters.DEFAULT_BANDWIDTH_COST = original

    def test_validate_parameters_overlap_stage(self):
        """Test validation raises error for an unknown overlap stage."""
        original = parameters.DEFAULT_OVERLAP_STAGE
        parameters.DEFAULT_OVERLAP_STAGE = "midway"
        try:
            with self.assertRaisesRegex(ValueError, "not in RECOVERY_STAGES"):
                parameters.validate_parameters()
        finally:
            parameters.DEFAULT_OVERLAP_STAGE = original

    def test_validate_parameters_fraction(self):
        """Test validation raises error for a progress fraction of 1."""
        original = parameters.DEFAULT_PROGRESS_FRACTIONS
        parameters.DEFAULT_PROGRESS_FRACTIONS = (0.5, 1.0)
        try:
            with self.assertRaisesRegex(ValueError, "Progress fraction"):
                parameters.validate_parameters()
        finally:
            parameters.DEFAULT_PROGRESS_FRACTIONS = original

if __name__ == '__main__':
    unittest.main()
