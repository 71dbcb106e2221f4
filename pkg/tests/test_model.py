import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackelberg_po.errors import SpecParseError, SpecValidationError
from stackelberg_po.model import (CoefficientFn, Dims, TimeGrid, load_spec, make_spec,
                                  save_spec, spec_from_dict, spec_to_dict, specs_equal,
                                  validate)

from conftest import scalar_game


def test_benchmark_spec_is_valid(scalar_spec):
    assert validate(scalar_spec) == []


def test_grid_locate_and_dt():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25
    k, w = g.locate(0.6)
    assert k == 2 and w == pytest.approx(0.4)
    assert g.locate(2.0) == (7, 1.0)


@pytest.mark.parametrize("bad", [dict(n=0, m=1, N=1, l1=1, l2=1),
                                 dict(n=1, m=1, N=1.5, l1=1, l2=1)])
def test_dims_reject_nonpositive(bad):
    with pytest.raises(ValueError):
        Dims(**bad)


def test_singular_K2_named():
    problems = validate(scalar_game(K2=0.0))
    assert any("K2 singular" in p for p in problems)


def test_indefinite_follower_R_flagged():
    spec = scalar_game(followers=[dict(Q=1.0, R=-1.0)])
    assert any("R11 not positive definite" in p for p in validate(spec))


def test_leader_definiteness_checked_against_flag():
    spec = scalar_game(leader=dict(Q=1.0, R=-1.0), leader_definiteness="definite")
    assert any("R2 not positive definite" in p for p in validate(spec))
    spec = scalar_game(leader=dict(Q=1.0, R=-1.0), leader_definiteness="indefinite")
    assert validate(spec) == []


def test_asymmetric_Q_flagged():
    spec = make_spec(Dims(2, 1, 1, 1, 1), TimeGrid(1.0, 4),
                     followers=[dict(Q=[[1.0, 0.5], [0.0, 1.0]], R=[[1.0]])])
    assert any("Q11 not symmetric" in p for p in validate(spec))


def test_time_varying_coefficient_interpolates():
    g = TimeGrid(1.0, 4)
    cf = CoefficientFn(np.arange(5.0).reshape(5, 1, 1), g)
    assert cf(0.375)[0, 0] == pytest.approx(1.5)
    assert not cf.is_constant


def test_json_round_trip(tmp_path, scalar_spec):
    path = tmp_path / "spec.json"
    save_spec(scalar_spec, path)
    again = load_spec(path)
    assert specs_equal(scalar_spec, again)


def test_load_rejects_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(SpecParseError):
        load_spec(path)


def test_load_rejects_unknown_keys(scalar_spec):
    raw = spec_to_dict(scalar_spec)
    raw["dynamics"]["Z"] = 1.0
    with pytest.raises(SpecParseError):
        spec_from_dict(raw)


def test_load_reports_all_violations(tmp_path, scalar_spec):
    raw = spec_to_dict(scalar_spec)
    raw["observations"]["K2"] = [[0.0]]
    raw["follower_costs"][0]["R"] = [[-1.0]]
    path = tmp_path / "two.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(SpecValidationError) as info:
        load_spec(path)
    assert len(info.value.violations) == 2


def test_regrid_keeps_constants(scalar_spec):
    fine = scalar_spec.regrid(400)
    assert fine.grid.steps == 400
    assert fine.A(0.37)[0, 0] == pytest.approx(0.3)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 3), m=st.integers(1, 2), N=st.integers(1, 3),
       seed=st.integers(0, 2 ** 16))
def test_round_trip_property(n, m, N, seed):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(1.0, 5)

    def psd(k):
        M = rng.normal(size=(k, k))
        return M @ M.T

    spec = make_spec(Dims(n, m, N, 1, 1), grid, x0=rng.normal(size=n),
                     A=rng.normal(size=(n, n)), B1=[rng.normal(size=(n, m)) for _ in range(N)],
                     followers=[dict(Q=psd(n), R=psd(m) + np.eye(m)) for _ in range(N)],
                     leader=dict(R=np.eye(m), G=psd(n)))
    assert validate(spec) == []
    assert specs_equal(spec, spec_from_dict(json.loads(json.dumps(spec_to_dict(spec)))))
