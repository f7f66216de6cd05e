import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mipdcl.dosing import (DoseGrid, DosePolicyWeights, GradeThresholds, SimulationFailure, StandardDosing,
                           grade_of, grade_probabilities, grade_probabilities_from_nadirs, nadir_matrix,
                           optimize_dose, select_dose, standard_dose)
from mipdcl.engine import CYCLE_HOURS
from mipdcl.filtering import FilterModel, init_ensemble
from mipdcl.models import PatientCovariates, PkParams, get_preset, pk_vector
from mipdcl.population import HyperPrior

COV = PatientCovariates()
WINDOW = (0.0, CYCLE_HOURS)


@pytest.fixture(scope="module")
def setup():
    gs = get_preset("gold-standard")
    model = FilterModel(gs)
    ens = init_ensemble(HyperPrior.default(), 6.48, 120, np.random.default_rng(0), 0.1)
    return ens, model, pk_vector(PkParams(), COV)


@pytest.mark.parametrize("nadir,grade", [(0.4, 4), (2.5, 0), (1.0, 2), (2.0, 0), (1.5, 1), (0.5, 3),
                                         (0.4999, 4), (1.9999, 1)])
def test_grade_boundaries(nadir, grade):
    assert grade_of(nadir) == grade


def test_grade_vector_and_errors():
    np.testing.assert_array_equal(grade_of([3.0, 1.7, 1.2, 0.7, 0.1]), [0, 1, 2, 3, 4])
    with pytest.raises(ValueError):
        grade_of(0.0)
    with pytest.raises(ValueError):
        GradeThresholds((2.0, 1.5, 1.5, 0.5))


@given(st.floats(1e-3, 50.0), st.floats(1e-3, 50.0))
def test_grade_monotone_in_nadir(a, b):
    lo, hi = min(a, b), max(a, b)
    assert grade_of(lo) >= grade_of(hi)


def test_two_particle_grade_probabilities():
    p = grade_probabilities_from_nadirs([0.3, 3.0], [0.5, 0.5])
    np.testing.assert_allclose(p, [0.5, 0, 0, 0, 0.5])
    p = grade_probabilities_from_nadirs([0.3, 3.0, 1.2], [0.2, 0.5, 0.3])
    np.testing.assert_allclose(p, [0.5, 0, 0.3, 0, 0.2])


def test_failed_nadirs_excluded_then_fatal():
    p = grade_probabilities_from_nadirs([0.3, np.nan, 3.0], [0.475, 0.05, 0.475])
    np.testing.assert_allclose(p, [0.5, 0, 0, 0, 0.5])
    with pytest.raises(SimulationFailure):
        grade_probabilities_from_nadirs([0.3, np.nan], [0.8, 0.2])


def test_zero_dose_gives_grade_zero(setup):
    ens, model, pkv = setup
    p = grade_probabilities(ens, 0.0, WINDOW, model, pkv)
    assert p[0] == pytest.approx(1.0)


def test_probabilities_monotone_in_dose(setup):
    ens, model, pkv = setup
    d = optimize_dose(ens, DoseGrid(), DosePolicyWeights(), WINDOW, model, pkv, COV.bsa)
    assert np.all(np.diff(d.p4) >= -1e-12) and np.all(np.diff(d.p0) <= 1e-12)
    np.testing.assert_allclose(d.p_grades.sum(1), 1.0)
    assert d.dose_mg == d.doses_mg[d.index]
    np.testing.assert_allclose(d.objective, 2 / 3 * d.p4 + 1 / 3 * d.p0)
    rec = d.record(3, 2)
    assert rec["chosen_dose_mg"] == d.dose_mg and len(rec["p4"]) == 21


def test_nadirs_decrease_with_dose(setup):
    ens, model, pkv = setup
    nad = nadir_matrix(ens, [100.0, 300.0, 500.0], WINDOW, model, pkv)
    assert np.all(np.diff(nad, axis=0) < 0)


def test_bisection_matches_exhaustive(setup):
    ens, model, pkv = setup
    a = optimize_dose(ens, DoseGrid(), DosePolicyWeights(), WINDOW, model, pkv, COV.bsa, search="exhaustive")
    b = optimize_dose(ens, DoseGrid(), DosePolicyWeights(), WINDOW, model, pkv, COV.bsa, search="bisection")
    np.testing.assert_allclose(a.p4, b.p4, atol=1e-12)
    np.testing.assert_allclose(a.p0, b.p0, atol=1e-12)
    assert a.index == b.index
    with pytest.raises(ValueError):
        optimize_dose(ens, DoseGrid(), DosePolicyWeights(), WINDOW, model, pkv, COV.bsa, search="grid")


def test_asymmetric_weights_favor_lower_dose(setup):
    ens, model, pkv = setup
    safe = optimize_dose(ens, DoseGrid(), DosePolicyWeights(2 / 3, 1 / 3), WINDOW, model, pkv, COV.bsa)
    bold = optimize_dose(ens, DoseGrid(), DosePolicyWeights(1 / 3, 2 / 3), WINDOW, model, pkv, COV.bsa)
    assert safe.dose_mg <= bold.dose_mg


def test_ensemble_window_mismatch(setup):
    ens, model, pkv = setup
    with pytest.raises(ValueError):
        nadir_matrix(ens, [100.0], (CYCLE_HOURS, 2 * CYCLE_HOURS), model, pkv)


def test_select_dose_ties_prefer_larger():
    assert select_dose([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 2 / 3, 1 / 3) == 2
    assert select_dose([0.0, 0.1, 0.3], [0.6, 0.1, 0.0], 2 / 3, 1 / 3) == 1
    assert select_dose([0.0, 0.3, 0.5], [0.3, 0.0, 0.0], 2 / 3, 1 / 3) == 0


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=25), st.floats(0.01, 100))
def test_select_dose_scale_invariant(ps, c):
    p4 = np.array([p[0] for p in ps])
    p0 = np.array([p[1] for p in ps])
    k = select_dose(p4, p0, 2 / 3, 1 / 3)
    obj = 2 / 3 * p4 + 1 / 3 * p0
    assert obj[k] <= obj.min() + 1e-12
    assert select_dose(p4, p0, c * 2 / 3, c * 1 / 3) == k or abs(obj[select_dose(p4, p0, c * 2 / 3, c / 3)]
                                                                  - obj[k]) < 1e-9


def test_policy_validation():
    with pytest.raises(ValueError):
        DosePolicyWeights(0.5, 0.6)
    with pytest.raises(ValueError):
        DoseGrid(())
    with pytest.raises(ValueError):
        DoseGrid((100.0, 90.0))
    assert DoseGrid().absolute(2.0)[0] == 100.0 and len(DoseGrid().per_m2) == 21


def test_standard_dosing():
    assert standard_dose(COV, None, None) == pytest.approx(360.0)
    assert standard_dose(COV, 0.4, 360.0) == pytest.approx(288.0)
    assert standard_dose(COV, 0.4, 288.0) == pytest.approx(230.4)
    assert standard_dose(COV, 0.6, 288.0) == pytest.approx(288.0)
    assert standard_dose(COV, 0.5, 360.0) == pytest.approx(360.0)
    assert standard_dose(COV, None, None, StandardDosing(per_m2=175.0)) == pytest.approx(315.0)
