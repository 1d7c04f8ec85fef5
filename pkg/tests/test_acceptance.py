"""One test per acceptance criterion; each prints its PASS/FAIL line."""

import pytest

from tipservo import acceptance as acc


@pytest.fixture
def show(capsys):
    def _show(check):
        with capsys.disabled():
            print("\n" + check.line())
        return check
    return _show


def test_criterion_01_squared_chamfer_bound(show):
    assert show(acc.check_squared_chamfer()).passed


def test_criterion_02_calibration_ordering(show):
    assert show(acc.check_calibration_ordering()).passed


def test_criterion_03_asynchrony(show):
    assert show(acc.check_asynchrony()).passed


def test_criterion_04_kf_equivalence(show):
    assert show(acc.check_kf_equivalence()).passed


def test_criterion_05_conformal_coverage(show):
    assert show(acc.check_coverage()).passed


def test_criterion_06_covariance_bound(show):
    assert show(acc.check_covariance_bound()).passed


def test_criterion_07_attenuation(show):
    assert show(acc.check_attenuation()).passed


def test_criterion_08_reach(show):
    assert show(acc.check_reach()).passed


def test_criterion_09_circle(show):
    assert show(acc.check_circle()).passed


def test_criterion_10_depth_band(show):
    assert show(acc.check_depth_band()).passed


def test_criterion_11_depth_regulation(show):
    assert show(acc.check_depth_regulation()).passed


def test_criterion_12_lyapunov(show):
    assert show(acc.check_lyapunov()).passed


def test_criterion_13_labeling(show):
    assert show(acc.check_labeling()).passed


def test_criterion_14_dare(show):
    assert show(acc.check_dare()).passed
