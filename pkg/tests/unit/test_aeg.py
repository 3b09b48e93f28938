# =============================================================================
# Unit Tests for aeg.py
# =============================================================================

# Covers the decay-rate fit, the precondition gate, the experiment
# pipeline and the figure tables

import logging

import numpy as np
import pandas as pd
import pytest

import aeg as mod
from config import ExperimentConfig
from errors import FitError, PreconditionError
from spaces import StateVector, norm
from spectral import perron_eigenpair, spectral_gap


# =============================================================================
# Helpers
# =============================================================================


# Small fig1 run: a = 2n, g = n, monomer shatter
def make_config(**overrides):
    data = {
        "label": "small",
        "N": 40,
        "t_end": 5.0,
        "sample_dt": 0.1,
        "rtol": 1e-10,
        "atol": 1e-14,
    }
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


def make_ends_only_config(**overrides):
    return make_config(kernel={"type": "ends_only"}, **overrides)


# =============================================================================
# Tests for fit_decay_rate()
# =============================================================================


class TestFitDecayRate:

    # Test 1: Exact exponential gives its rate and prefactor
    def test_exact_exponential(self):
        t = np.linspace(0.0, 10.0, 101)
        fit = mod.fit_decay_rate(t, 3.0 * np.exp(-0.7 * t))
        assert fit.rate == pytest.approx(0.7, rel=1e-10)
        assert fit.prefactor == pytest.approx(3.0, rel=1e-10)
        assert fit.rms_residual == pytest.approx(0.0, abs=1e-10)

    # Test 2: Small periodic perturbations barely move the rate
    def test_perturbed_exponential(self):
        t = np.linspace(0.0, 10.0, 101)
        fit = mod.fit_decay_rate(t, 3.0 * np.exp(-0.7 * t) * (1.0 + 0.01 * np.sin(t)))
        assert fit.rate == pytest.approx(0.7, abs=0.01)

    # Test 3: The window excludes early samples
    def test_window(self):
        t = np.linspace(0.0, 10.0, 101)
        errors = np.where(t < 2.0, 1.0, np.exp(-0.5 * t))
        fit = mod.fit_decay_rate(t, errors, t_min=2.0)
        assert fit.rate == pytest.approx(0.5, rel=1e-10)
        assert fit.samples == 81

    # Test 4: Samples at the floor are dropped
    def test_floor(self):
        t = np.linspace(0.0, 10.0, 101)
        errors = np.maximum(np.exp(-2.0 * t), 1e-6)
        fit = mod.fit_decay_rate(t, errors, floor=1e-6)
        assert fit.rate == pytest.approx(2.0, rel=1e-10)
        assert fit.t_max == 10.0

    # Test 5: Everything at the floor means already converged
    def test_converged(self):
        t = np.linspace(0.0, 5.0, 51)
        fit = mod.fit_decay_rate(t, np.full(51, 1e-16))
        assert fit.converged
        assert fit.rate == np.inf

    # Test 6: A window too short to reach the floor is an error
    def test_too_few_samples(self):
        t = np.linspace(0.0, 1.5, 16)
        with pytest.raises(FitError):
            mod.fit_decay_rate(t, np.exp(-t), t_min=1.0)

    # Test 7: Reaching the floor early gives a converged fit on the samples before it
    def test_floor_reached_early(self):
        t = np.linspace(0.0, 3.0, 31)
        errors = np.maximum(np.exp(-15.0 * t), 1e-9)
        fit = mod.fit_decay_rate(t, errors, t_min=1.0, floor=1e-8)
        assert fit.converged
        assert fit.samples == 3
        assert fit.rate == pytest.approx(15.0, rel=1e-8)

    # Test 8: Samples after the first floor crossing are ignored
    def test_cut_at_first_crossing(self):
        t = np.linspace(0.0, 10.0, 101)
        errors = np.exp(-t)
        errors[t > 5.0] = np.where(np.arange((t > 5.0).sum()) % 2 == 0, 1e-12, 1e-3)
        fit = mod.fit_decay_rate(t, errors, floor=1e-10)
        assert fit.rate == pytest.approx(1.0, rel=1e-8)
        assert fit.samples == 41


# =============================================================================
# Tests for plateau_floor()
# =============================================================================


class TestPlateauFloor:

    # Test 1: A flat tail sets the floor at 10x its median
    def test_flat_tail(self):
        errors = np.concatenate([np.exp(-np.linspace(0.0, 10.0, 50)), np.full(50, 2e-9)])
        assert mod.plateau_floor(errors) == pytest.approx(2e-8)

    # Test 2: A tail still decaying keeps the absolute floor
    def test_decaying_tail(self):
        assert mod.plateau_floor(np.exp(-np.linspace(0.0, 20.0, 100))) == mod.ABSOLUTE_FLOOR

    # Test 3: Never below the absolute floor
    def test_exact_zero_tail(self):
        assert mod.plateau_floor(np.concatenate([np.ones(10), np.zeros(10)])) == mod.ABSOLUTE_FLOOR


# =============================================================================
# Tests for check_preconditions()
# =============================================================================


class TestPreconditions:

    # Test 1: Fig1 passes both required conditions
    def test_fig1_passes(self):
        config = make_config()
        verdicts = mod.check_preconditions(config, config.build_model())
        assert set(verdicts) == set(mod.REQUIRED_CONDITIONS)
        assert all(v.verdict == "holds" for v in verdicts.values())

    # Test 2: Ends-only fails crucrit and is refused
    def test_ends_only_refused(self):
        config = make_ends_only_config()
        with pytest.raises(PreconditionError) as excinfo:
            mod.check_preconditions(config, config.build_model())
        assert excinfo.value.verdicts["crucrit"].verdict == "fails"

    # Test 3: force=True runs anyway and logs it
    def test_forced(self, caplog):
        config = make_ends_only_config(force=True)
        with caplog.at_level(logging.WARNING):
            mod.check_preconditions(config, config.build_model())
        assert "forced" in caplog.text


# =============================================================================
# Tests for run_experiment()
# =============================================================================


class TestRunExperiment:

    # Test 1: Fig1 converges to <h, f_in> e at a positive rate
    def test_fig1_decay(self):
        result = mod.run_experiment(make_config())
        assert result.spectral.lambda0 == pytest.approx(1.0, abs=1e-8)
        # h_n = n: <h, f_in> is the initial mass 100 up to the scaling of h
        assert result.projection_constant > 0
        assert result.fit.rate > 0
        assert result.error_curve[-1] < result.error_curve[10]

    # Test 2: The shifted mass settles at a constant
    def test_shifted_mass_constant(self):
        result = mod.run_experiment(make_config())
        mass = result.trace.mass
        assert mass[-1] == pytest.approx(mass[0], rel=1e-6)

    # Test 3: Explicit initial states override the config
    def test_explicit_initial_state(self):
        config = make_config()
        f_in = StateVector.delta(3, config.N, 1.0)
        result = mod.run_experiment(config, f_in)
        assert result.trace.states[0].tolist() == f_in.entries.tolist()

    # Test 4: Star norm can replace the [m]-norm
    def test_star_norm(self):
        result = mod.run_experiment(make_config(star_norm=True, t_end=3.0))
        assert result.error_curve[0] > 0

    # Test 5: Failing preconditions stop the run
    def test_refused(self):
        with pytest.raises(PreconditionError):
            mod.run_experiment(make_ends_only_config())

    # Test 6: Summary carries the diagnostics and the config
    def test_summary(self):
        summary = mod.run_experiment(make_config()).summary()
        for key in ("lambda0", "projection_constant", "fitted_rate", "fit_window", "verdicts", "config", "version"):
            assert key in summary
        assert summary["config"]["label"] == "small"

    # Test 7: Starting on the eigenvector leaves nothing to decay
    def test_eigenvector_start(self):
        config = make_config(t_end=3.0)
        triple = perron_eigenpair(config.build_model(), config.N, config.eig_tol, config.m, config.policy)
        result = mod.run_experiment(config, triple.e)
        assert result.projection_constant == pytest.approx(1.0, rel=1e-10)
        assert np.max(result.error_curve) <= 1e-8 * norm(triple.e, config.m)

    # Test 8: Scaling f_in scales the error curve and keeps the rate
    def test_rescaled_initial_state(self):
        config = make_config(t_end=3.0)
        f0 = config.initial_state()
        base = mod.run_experiment(config, f0)
        scaled = mod.run_experiment(config, f0 * 3.0)
        assert scaled.projection_constant == pytest.approx(3.0 * base.projection_constant, rel=1e-12)

        resolved = base.error_curve > 1e-6 * base.error_curve[0]
        assert resolved.sum() >= mod.MIN_FIT_SAMPLES
        assert np.allclose(scaled.error_curve[resolved], 3.0 * base.error_curve[resolved], rtol=1e-4)
        assert scaled.fit.rate == pytest.approx(base.fit.rate, rel=1e-2)

    # Test 9: The curve starts at ||f_in - <h, f_in> e||
    def test_initial_error(self):
        config = make_config(t_end=2.0)
        result = mod.run_experiment(config)
        expected = norm(config.initial_state() - result.asymptote, config.m)
        assert result.error_curve[0] == pytest.approx(expected, rel=1e-12)

    # Test 10: The fitted rate does not outrun the spectral gap
    def test_rate_within_gap(self):
        config = make_config()
        result = mod.run_experiment(config)
        gap = spectral_gap(config.build_model(), config.N).gap
        assert 0 < result.fit.rate <= 1.25 * gap


# =============================================================================
# Tests for the output tables
# =============================================================================


class TestResultTables:

    # Test 1: Four tables with the documented columns
    def test_tables(self):
        tables = mod.result_tables(mod.run_experiment(make_config(t_end=2.0)))
        assert set(tables) == {"solution", "error_vector", "asymptotic", "error_norm"}
        assert "err_10" in tables["error_vector"].columns
        assert list(tables["asymptotic"].columns) == ["n", "asymptotic_f", "e", "h", "asymptotic_mass"]
        assert tables["asymptotic"]["n"].iloc[-1] == 40

    # Test 2: Snapshot sizes beyond N are skipped
    def test_snapshots_clipped(self):
        tables = mod.result_tables(mod.run_experiment(make_config(t_end=2.0)))
        assert "f_50" not in tables["solution"].columns
        assert "err_50" not in tables["error_vector"].columns

    # Test 3: write_result() writes four CSVs and the summary
    def test_write_result(self, tmp_path):
        paths = mod.write_result(mod.run_experiment(make_config(t_end=2.0)), tmp_path)
        assert sorted(paths) == ["asymptotic", "error_norm", "error_vector", "solution", "summary"]
        assert all(p.exists() for p in paths.values())
        assert paths["solution"].name == "small_solution.csv"
        df = pd.read_csv(paths["error_norm"], comment="#")
        assert list(df.columns) == ["t", "error_norm", "log_error", "above_floor"]
