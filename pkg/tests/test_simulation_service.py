import dataclasses

import numpy as np
import pandas as pd
import pytest

from envelope_em.errors import DimensionTooSmallForMechanism, InvalidConfig
from envelope_em.services.em_service import EM_ENVELOPE, EM_STANDARD, ESTIMATORS, FULL_MLE
from envelope_em.services.simulation_service import (
    PRESETS,
    MseSummary,
    ScenarioSpec,
    calibrate_plan,
    default_plan,
    gen_full_data,
    gen_missingness,
    gen_parameters,
    get_preset,
    mse,
    run_replicate,
    run_scenario,
    simulate_dataset,
)


def test_parameters_follow_envelope_structure(small_spec):
    params = gen_parameters(small_spec)
    r, u = small_spec.r, small_spec.u
    np.testing.assert_allclose(params.gamma0.T @ params.beta, 0.0, atol=1e-10)
    values = np.sort(np.linalg.eigvalsh(params.sigma_eps))
    expected = np.sort([small_spec.omega_scale] * u + [small_spec.omega0_scale] * (r - u))
    np.testing.assert_allclose(values, expected, rtol=1e-10)
    assert np.linalg.eigvalsh(params.sigmax).min() >= -1e-8
    assert params.mux.shape == (small_spec.p,)


def test_parameters_depend_on_seed(small_spec):
    first = gen_parameters(small_spec)
    np.testing.assert_array_equal(first.beta, gen_parameters(small_spec).beta)
    assert not np.array_equal(first.beta, gen_parameters(small_spec, seed=12).beta)


def test_two_point_parameters():
    spec = ScenarioSpec(r=4, p=1, u=1, predictor_family="two-point", bernoulli_scale=25.0)
    params = gen_parameters(spec)
    assert params.pi == 0.5
    assert params.sigmax is None
    np.testing.assert_allclose(params.mux, [12.5])
    x, _ = gen_full_data(params, spec, 1, n=200)
    assert set(np.unique(x)) <= {0.0, 25.0}


def test_noiseless_data_is_exact(small_spec, small_params):
    x, y = gen_full_data(small_params, small_spec, 3, n=50, noise=False)
    np.testing.assert_allclose(y, x @ small_params.beta.T)


@pytest.mark.parametrize("family", ["normal", "t", "uniform", "laplace"])
def test_error_families_draw_finite_data(small_spec, family):
    spec = dataclasses.replace(small_spec, error_family=family, predictor_family="t")
    x, y = gen_full_data(gen_parameters(spec), spec, 4, n=30)
    assert x.shape == (30, spec.p) and y.shape == (30, spec.r)
    assert np.all(np.isfinite(y))


def test_spec_validation():
    with pytest.raises(InvalidConfig):
        ScenarioSpec(p=2, predictor_family="two-point")
    with pytest.raises(InvalidConfig):
        ScenarioSpec(r=3, u=4)
    with pytest.raises(InvalidConfig):
        ScenarioSpec(error_family="cauchy")
    with pytest.raises(InvalidConfig):
        ScenarioSpec(x_missing_rate=1.0)


def test_presets():
    assert get_preset("t-bernoulli").p == 1
    assert get_preset("normal-omega0-10", reps=3).reps == 3
    assert PRESETS["normal-omega0-1000"].omega0_scale == 1000.0
    with pytest.raises(InvalidConfig):
        get_preset("nope")


def test_remapped_plan_stays_in_range():
    plan = default_plan(2, 4)
    assert plan.remapped
    for mech, dims in [(m, {"x": 2, "y": 4}) for m in plan.x_mechanisms + plan.y_mechanisms]:
        for block, j in mech.targets + mech.conditioning:
            assert 0 <= j < dims[block]
        assert not set(mech.targets) & set(mech.conditioning)
    with pytest.raises(DimensionTooSmallForMechanism):
        default_plan(2, 4, remap=False)
    assert not default_plan(5, 10).remapped


def test_masks_are_deterministic(small_sample, small_spec):
    again = simulate_dataset(small_spec, replicate=0)
    np.testing.assert_array_equal(again.dataset.joint_observed, small_sample.dataset.joint_observed)
    other = simulate_dataset(small_spec, replicate=1)
    assert not np.array_equal(other.x_full, small_sample.x_full)


def test_every_row_keeps_a_cell(small_sample):
    assert small_sample.dataset.joint_observed.any(axis=1).all()
    assert not small_sample.dataset.is_complete


def test_zero_rate_gives_complete_data(small_spec):
    spec = dataclasses.replace(small_spec, x_missing_rate=0.0, y_missing_rate=0.0)
    sample = simulate_dataset(spec)
    assert sample.dataset.is_complete
    np.testing.assert_array_equal(sample.dataset.y, sample.y_full)


def test_without_missingness_plan(small_spec, small_params):
    x, y = gen_full_data(small_params, small_spec, 5, n=100)
    plan = default_plan(small_spec.p, small_spec.r).without_missingness()
    x_observed, y_observed = gen_missingness(x, y, small_spec, 6, plan=plan)
    assert x_observed.all() and y_observed.all()
    assert plan.to_dict()["y_mechanisms"][0]["offset"] is None


def test_calibration_hits_target_rates():
    spec = ScenarioSpec(n=3000, r=10, p=5, u=2, seed=21, pilot_n=5000, omega0_scale=10.0)
    rates = simulate_dataset(spec).dataset.missing_rates()
    assert rates["x1"] == 0.0 and rates["x2"] == 0.0
    for name in ("x3", "x4", "x5"):
        assert rates[name] == pytest.approx(0.12, abs=0.03)
    for j in range(1, 11):
        assert rates[f"y{j}"] == pytest.approx(0.07, abs=0.03)


def test_calibrate_plan_with_zero_rate(small_spec, small_params):
    x, y = gen_full_data(small_params, small_spec, 8, n=500)
    plan = calibrate_plan(default_plan(small_spec.p, small_spec.r), x, y, 0.0, 0.1)
    assert all(m.offset == -np.inf for m in plan.x_mechanisms)
    assert all(np.isfinite(m.offset) for m in plan.y_mechanisms)


def test_mse():
    assert mse(np.ones((2, 3)), np.zeros((2, 3))) == 1.0
    assert mse(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0


def test_mse_summary_columns():
    frame = pd.DataFrame({"a": [1.0, 2.0, 3.0, np.nan], "b": [np.nan] * 4})
    summary = MseSummary.from_mse(frame)
    assert summary.median("a") == 2.0
    assert summary.to_dict()["b"]["mean"] is None
    assert summary.to_text().splitlines()[0].split("\t") == ["estimator", "min", "Q1", "median", "mean", "Q3", "max"]


def test_replicate_without_missingness_matches_full_fit(small_spec, small_params):
    spec = dataclasses.replace(small_spec, x_missing_rate=0.0, y_missing_rate=0.0, tol=1e-9)
    plan = default_plan(spec.p, spec.r).without_missingness()
    outcome = run_replicate(spec, small_params, plan, 0)
    assert set(outcome.mse) == set(ESTIMATORS)
    assert outcome.mse[EM_STANDARD] == pytest.approx(outcome.mse[FULL_MLE], rel=1e-6)
    assert outcome.selected_u[EM_ENVELOPE] == spec.u
    assert not outcome.failures


def test_run_scenario(small_spec):
    result = run_scenario(small_spec)
    assert result.mse.shape == (small_spec.reps, len(ESTIMATORS))
    assert list(result.summary.table.index) == ESTIMATORS
    assert result.selection_accuracy()[EM_ENVELOPE] == 1.0
    payload = result.to_dict()
    assert payload["scenario"]["name"] == "small"
    assert payload["missingness"]["remapped"] is True
    assert set(payload["failures"]) == set(ESTIMATORS)


def test_run_scenario_is_reproducible_across_threads(small_spec):
    spec = dataclasses.replace(small_spec, reps=2)
    serial = run_scenario(spec, n_jobs=1)
    threaded = run_scenario(spec, n_jobs=2)
    pd.testing.assert_frame_equal(serial.mse, threaded.mse)


def test_envelope_beats_standard_em_in_a_short_run():
    spec = get_preset("normal-omega0-1000", n=300, r=10, p=3, u=3, reps=3, selection="fixed", pilot_n=2000)
    summary = run_scenario(spec).summary
    assert summary.median(EM_ENVELOPE) < summary.median(EM_STANDARD) / 3.0
