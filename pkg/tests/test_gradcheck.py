"""The gradient-checking harness itself: error metric, suites, report."""

import numpy as np
import pytest

from metacontrast.gradcheck import (CheckCase, check_losses, check_meta, check_ops,
                                    format_report, relative_error, run_suites)


def test_relative_error_basic_properties():
    a = np.array([1.0, 2.0, 3.0])
    assert relative_error(a, a) == 0.0
    b = np.array([1.0, 2.0, 3.003])
    assert relative_error(a, b) == pytest.approx(0.003 / 3.003, rel=1e-9)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_relative_error_floor_suppresses_roundoff_noise():
    tiny_a = np.array([0.0])
    tiny_b = np.array([1e-12])
    assert relative_error(tiny_a, tiny_b, floor=1e-8) == pytest.approx(1e-4)
    assert relative_error(tiny_a, tiny_b, floor=1e-14) == pytest.approx(1.0)


def test_op_suite_small_sample_passes():
    cases = check_ops(cases_per_op=2, base_seed=0)
    assert cases, "op suite produced no cases"
    failed = [case.name for case in cases if not case.passed]
    assert failed == []
    assert all(case.metric == "max_rel_err" for case in cases)


def test_op_suite_covers_the_catalogue():
    cases = check_ops(cases_per_op=1, base_seed=0)
    ops = {case.name.split("/")[1] for case in cases}
    for expected in ("matmul", "normalize", "logsumexp", "relu", "sigmoid", "concat"):
        assert expected in ops


def test_loss_suite_small_sample_passes():
    cases = check_losses(cases_per_loss=2, base_seed=0)
    failed = [case.name for case in cases if not case.passed]
    assert failed == []
    names = {case.name.rsplit("/", 1)[0] for case in cases}
    assert {"losses/contrastive", "losses/pairing", "losses/mixed"} <= names


def test_meta_suite_reports_cosine_and_monotonicity():
    cases = check_meta(base_seed=0)
    by_metric = {case.metric for case in cases}
    assert "cosine" in by_metric
    assert any("monotone" in case.metric or "gap" in case.metric for case in cases)
    failed = [case.name for case in cases if not case.passed]
    assert failed == []


def test_run_suites_scope_selection_and_validation():
    cases = run_suites(scopes=("ops",), cases_per_op=1)
    assert all(case.name.startswith("ops/") for case in cases)
    with pytest.raises(ValueError):
        run_suites(scopes=("ops", "spectral"))


def test_format_report_lines_and_summary():
    cases = [
        CheckCase(name="ops/add/case0", metric="max_rel_err", value=1.5e-9,
                  requirement="< 0.0001", passed=True),
        CheckCase(name="ops/log/case1", metric="max_rel_err", value=2.0e-3,
                  requirement="< 0.0001", passed=False),
    ]
    report = format_report(cases)
    lines = report.strip().split("\n")
    assert len(lines) == 3
    assert lines[0].endswith("PASS")
    assert lines[1].endswith("FAIL")
    assert lines[2] == "gradcheck: 2 cases, 1 failed"
