import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mipdcl.models import (PRESETS, PatientCovariates, PdParams, PkParams, Structure, covariate_vm_el,
                           dose_to_umol, get_preset, initial_state, load_preset, pd_arrays, pd_rhs, pk_rhs,
                           pk_vector)


@pytest.mark.parametrize("cov, expected", [
    (PatientCovariates(bsa=1.8, sex=0, age=56, bili=7), 35.9),
    (PatientCovariates(bsa=1.8, sex=1, age=56, bili=7), 38.413),
    (PatientCovariates(bsa=2.0, sex=0, age=56, bili=7), 35.9 * (2.0 / 1.8) ** 1.14),
])
def test_covariate_vm_el_examples(cov, expected):
    assert covariate_vm_el(cov) == pytest.approx(expected, rel=1e-12)


def test_covariate_bsa_example_value():
    # the quoted hand value 40.46 is rounded; the power law gives 40.481
    assert covariate_vm_el(PatientCovariates(bsa=2.0, sex=0)) == pytest.approx(40.46, abs=0.05)


def test_covariate_validation():
    with pytest.raises(ValueError):
        PatientCovariates(bsa=0)
    with pytest.raises(ValueError):
        PatientCovariates(sex=2)


def test_pk_rhs_zero_state_is_fixed_point():
    np.testing.assert_array_equal(pk_rhs(0, np.zeros(3), pk_vector(PkParams(), PatientCovariates())), 0.0)


def test_pk_rhs_linear_limit():
    pkv = pk_vector(PkParams(), PatientCovariates())
    v1, km_el, vm_el, km_tr, vm_tr, k21, k13, k31 = pkv
    c1 = min(km_el, km_tr) / 1000.0
    x = np.array([c1 * v1, 0.3 * c1 * v1, 2.0 * c1 * v1])
    A = np.array([[-(vm_el / km_el + vm_tr / km_tr) / v1 - k13, k21, k31],
                  [vm_tr / km_tr / v1, -k21, 0.0],
                  [k13, 0.0, -k31]])
    lin = A @ x
    np.testing.assert_allclose(pk_rhs(0, x, pkv), lin, rtol=0.01)


def test_pk_mass_balance_without_elimination():
    pkv = pk_vector(PkParams(vm_el=1e-300), PatientCovariates())
    d = pk_rhs(0, np.array([5.0, 1.0, 3.0]), pkv)
    assert abs(d.sum()) < 1e-12


@pytest.mark.parametrize("structure", ["gold-standard", "bme"])
def test_pd_homeostasis_fixed_point(structure):
    pd = get_preset(structure).pd()
    np.testing.assert_allclose(pd_rhs(0, np.full(6, pd.circ0), pd, 0.0), 0.0, atol=1e-14)


def test_pd_full_drug_effect_stops_proliferation():
    pd = get_preset("gold-standard").pd()
    x = np.full(6, pd.circ0)
    d = pd_rhs(0, x, pd, 1.0 / pd.slope)
    # prol only loses cells into the first transit compartment
    assert d[1] == pytest.approx(-pd.ktr * x[1])


@pytest.mark.parametrize("structure", ["gold-standard", "bme"])
@given(frac=st.floats(0.05, 0.99))
def test_feedback_sign(structure, frac):
    pd = get_preset(structure).pd()
    x = np.full(6, pd.circ0)
    x[5] = frac * pd.circ0
    assert pd_rhs(0, x, pd, 0.0)[1] > 0


def test_pd_rhs_rejects_nonpositive_circ():
    pd = get_preset("gold-standard").pd()
    x = np.full(6, pd.circ0)
    x[5] = 0.0
    with pytest.raises(FloatingPointError):
        pd_rhs(0, x, pd, 0.0)


def test_preset_values():
    gs, r, b = PRESETS["gold-standard"], PRESETS["gold-standard-R"], PRESETS["bme"]
    assert (gs.mtt, gs.slope, gs.gamma) == (141.0, 2.6, 0.2)
    assert (r.mtt, r.slope, r.gamma) == (128.0, 4.48, 0.231)
    assert (b.mtt, b.slope, b.gamma, b.ftr) == (145.0, 13.1, 0.257, 0.787)
    assert b.structure is Structure.BME
    np.testing.assert_allclose(np.diag(gs.omega), [0.0729, 0.2016], rtol=1e-4)


def test_preset_roundtrip(tmp_path):
    p = tmp_path / "bme.json"
    import json
    p.write_text(json.dumps(PRESETS["bme"].to_dict()))
    assert load_preset(p) == PRESETS["bme"]


def test_pd_params_validation():
    with pytest.raises(ValueError):
        PdParams(mtt=100, slope=1, gamma=0.2, circ0=5, ftr=1.0, structure=Structure.BME)
    with pytest.raises(ValueError):
        PdParams(mtt=-1, slope=1, gamma=0.2, circ0=5)


def test_pd_arrays_layout():
    rows = pd_arrays(PRESETS["bme"], np.log([100.0, 200.0]), np.log([2.0, 3.0]), np.log([5.0, 6.0]))
    np.testing.assert_allclose(rows[:, 0], [0.04, 0.02])
    np.testing.assert_allclose(rows[:, 1], [2.0, 3.0])
    np.testing.assert_allclose(rows[:, 2], 0.257)
    np.testing.assert_allclose(rows[:, 3], [5.0, 6.0])
    np.testing.assert_allclose(rows[:, 4], 0.787)
    gs = pd_arrays(PRESETS["gold-standard"], [np.log(141)], [0.0], [0.0], log_gamma=[np.log(0.5)])
    assert gs[0, 4] == 1.0 and gs[0, 2] == pytest.approx(0.5)


def test_dose_conversion_and_initial_state():
    assert dose_to_umol(853.906) == pytest.approx(1000.0)
    y = initial_state(4.2)
    assert np.all(y[:3] == 0) and np.all(y[3:] == 4.2)


def test_pk_vector_iiv():
    base = pk_vector(PkParams(), PatientCovariates())
    shifted = pk_vector(PkParams(), PatientCovariates(), eta={"v1": math.log(2)})
    assert shifted[0] == pytest.approx(2 * base[0])
    assert shifted[6] == pytest.approx(base[6] / 2)  # k13 = Q/V1
