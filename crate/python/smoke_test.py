"""Smoke test for the pyrselayer extension.

Build and install first:  pip install ./crates/py  (or `maturin develop -m crates/py/Cargo.toml`)
Run:  python python/smoke_test.py   or   pytest python/
"""

import json

import pytest

import pyrselayer


def small_dataset(n=6, seed=3):
    cfg = json.loads(pyrselayer.default_config())
    cfg["dataset"].update(n=n, seed=seed)
    return pyrselayer.generate_dataset(json.dumps(cfg), workers=1)


def test_dataset_is_deterministic():
    a, b = small_dataset(), small_dataset()
    assert a == b
    ds = json.loads(a)
    assert ds["case_id"] == "case9"
    assert len(ds["samples"]) == 6


def test_compare_reports_both_estimators():
    rep = json.loads(pyrselayer.compare(small_dataset(), ["wlav_direct", "wls_direct"], workers=1))
    names = [e["estimator"] for e in rep["estimators"]]
    assert names == ["wlav_direct", "wls_direct"]
    for e in rep["estimators"]:
        assert e["v_stats"]["median"] < 0.05


def test_wlav_estimate_is_rank_one():
    v, theta, ratio = pyrselayer.estimate_wlav(small_dataset(), 0)
    assert len(v) == len(theta) == 9
    assert all(0.8 < x < 1.2 for x in v)
    assert ratio < 1e-3


def test_gradient_check_passes():
    assert pyrselayer.gradient_check(seed=0) < 1e-3


def test_huber_loss_branches():
    # quadratic below delta, linear above
    assert pyrselayer.huber_loss([0.5], [1.0], 1.0) == pytest.approx(0.125)
    assert pyrselayer.huber_loss([3.0], [2.0], 1.0) == pytest.approx(2.0 * 2.5)


def test_errors_map_to_python_exceptions():
    with pytest.raises(ValueError):
        pyrselayer.compare(small_dataset(), ["opt_layer"])
    with pytest.raises(ValueError):
        pyrselayer.compare("{}", ["wlav_direct"])
    with pytest.raises(ValueError):
        pyrselayer.generate_dataset('{"bogus": 1}')
    with pytest.raises(ValueError):
        pyrselayer.huber_loss([1.0], [], 1.0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
