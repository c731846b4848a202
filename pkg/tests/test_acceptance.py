"""Acceptance suite: one test per criterion, one printed line per criterion.

Tolerances and budgets are pinned here; the check implementations live in
molkv.verify so the CLI ``verify`` subcommand runs the identical suite.
Budgets (30 s / 60 s / 15 min) are generous on any desktop CPU; the slow
training smoke runs last and carries its own marker.
"""

import pytest

from molkv import verify


def _report(num, result, budget=None):
    print(f"\ncriterion {num} {result.line()}")
    assert result.passed, result.detail
    if budget is not None:
        assert result.seconds < budget, f"criterion {num} took {result.seconds:.1f}s, budget {budget}s"


def test_criterion_01_reparameterization_equivalence():
    _report(1, verify.check_reparam_equivalence(n_configs=20, tol=1e-6), budget=30)


def test_criterion_02_incremental_batched_equivalence():
    _report(2, verify.check_incremental_equivalence(tol=1e-6), budget=60)


def test_criterion_03_block_gradient_check():
    _report(3, verify.check_block_gradients(tol=1e-4))


def test_criterion_04_cost_counter_exactness():
    _report(4, verify.check_cost_counters())


def test_criterion_05_parameter_counting():
    _report(5, verify.check_param_counting())


def test_criterion_06_store_roundtrip():
    _report(6, verify.check_store_roundtrip())


def test_criterion_07_rope_relative_invariance():
    _report(7, verify.check_rope_relative(tol=1e-10))


def test_criterion_08_empty_short_window():
    _report(8, verify.check_window_edges())


@pytest.mark.slow
def test_criterion_09_training_smoke():
    _report(9, verify.check_training_smoke(steps=300, corpus_bytes=2_000_000), budget=900)


def test_criterion_10_determinism_and_resume():
    _report(10, verify.check_determinism())
