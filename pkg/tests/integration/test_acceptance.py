# =============================================================================
# Acceptance Tests at full figure scale
# =============================================================================

# Large-N checks of the mass laws, the resolvent bound, the growth
# diagnostic, AEG on fig1, splitting order and the example1 root.
# Deselect with: pytest -m "not slow"

import numpy as np
import pytest

from aeg import run_experiment
from config import CONFIG_DIR, ExperimentConfig, figure_config
from dynamics import SolverOptions, integrate, mass_balance_residual, trotter_evolve
from model import CoefficientModel, delta_sequence, make_kernel, rate_family
from operators import assemble, growth_resolvent_diagnostic, resolvent_bound_probe
from spaces import StateVector, norm
from spectral import example1_solve, perron_eigenpair, spectral_gap

pytestmark = pytest.mark.slow

MASS_LAW_OPTS = SolverOptions(rtol=1e-8, atol=1e-12)


# =============================================================================
# Helpers
# =============================================================================


def make_model(frag, growth, death=None, kernel=None):
    kernel_obj, induced = make_kernel(kernel)
    return CoefficientModel(
        fragmentation_rate=rate_family(frag, induced),
        growth_rate=rate_family(growth),
        death_rate=rate_family(death or {"family": "zero"}),
        kernel=kernel_obj,
    )


BUILTIN_KERNELS = [
    {"type": "monomer_shatter"},
    {"type": "uniform_binary"},
    {"type": "ends_only"},
    {"type": "homogeneous", "profile": "beta_symmetric", "beta": 0.1},
    {"type": "binary_psi", "psi": "sum_power", "beta": 0.1},
    {"type": "binary_psi", "psi": "product_power", "beta": 0.1},
]


# =============================================================================
# Mass laws
# =============================================================================


class TestMassLaws:

    # Acceptance Test 1: Pure fragmentation keeps its mass at N = 500
    @pytest.mark.parametrize("kernel", BUILTIN_KERNELS, ids=lambda k: k.get("psi", k["type"]))
    def test_pure_fragmentation(self, kernel):
        model = make_model({"family": "linear", "coeff": 1.0}, {"family": "zero"}, kernel=kernel)
        f0 = StateVector.delta(500, 500, 1.0)
        trace = integrate(model, f0, (0.0, 2.0), MASS_LAW_OPTS, n_samples=40)
        assert np.allclose(trace.mass, 500.0, rtol=1e-8)

    # Acceptance Test 2: Fig1 mass is 100 e^t up to t = 5 at N = 2000
    def test_fig1_exponential_mass(self):
        config = figure_config("fig1", N=2000)
        trace = integrate(config.build_model(), config.initial_state(), (0.0, 5.0), MASS_LAW_OPTS, sample_dt=0.5)
        assert np.allclose(trace.mass, 100.0 * np.exp(trace.times), rtol=1e-6)

    # Acceptance Test 3: Fig2 and fig3 close the mass balance
    @pytest.mark.parametrize("fig_id", ["fig2", "fig3"])
    def test_fig2_fig3_balance(self, fig_id):
        config = figure_config(fig_id)
        model = config.build_model()
        trace = integrate(model, config.initial_state(), (0.0, 5.0), MASS_LAW_OPTS, sample_dt=0.01)
        assert mass_balance_residual(trace, model) <= 1e-3 * float(np.max(trace.mass))


# =============================================================================
# Kernel identities and resolvents
# =============================================================================


class TestKernelIdentities:

    # Acceptance Test 1: Delta^(1) vanishes for every built-in kernel up to 10^4
    @pytest.mark.parametrize("kernel", BUILTIN_KERNELS, ids=lambda k: k.get("psi", k["type"]))
    def test_delta_one_vanishes(self, kernel):
        kernel_obj, _ = make_kernel(kernel)
        delta = delta_sequence(kernel_obj, 1.0, range(2, 10_001, 97))
        assert np.all(np.abs(delta) <= 1e-10 * np.arange(2, 10_001, 97))

    # Acceptance Test 2: Homogeneous beta = 0.1 reaches its second-moment limit
    def test_homogeneous_second_moment(self):
        kernel_obj, _ = make_kernel({"type": "homogeneous", "profile": "beta_symmetric", "beta": 0.1})
        n = 10_000
        assert delta_sequence(kernel_obj, 2.0, [n])[0] / n ** 2 == pytest.approx(0.34375, rel=0.01)

    # Acceptance Test 3: Ends-only is degenerate in the second moment
    def test_ends_only_degenerate(self):
        kernel_obj, _ = make_kernel({"type": "ends_only"})
        n = 1000
        assert delta_sequence(kernel_obj, 2.0, [n])[0] / n ** 2 <= 0.01


class TestResolvent:

    # Acceptance Test 1: Fig1 probe at N = 500 with 100 samples stays under 3
    @pytest.mark.parametrize("lam", [1.0, 10.0])
    def test_fig1_bound(self, lam):
        model = figure_config("fig1").build_model()
        probe = resolvent_bound_probe(model, 2.0, 3.0, lam, samples=100, N=500)
        assert probe.bound == pytest.approx(3.0)
        assert probe.within_bound

    # Acceptance Test 2: Superlinear growth makes the m = 1 resolvent grow with N
    def test_growth_diagnostic(self):
        model = make_model({"family": "zero"}, {"family": "power", "coeff": 1.0, "exponent": 1.1})
        diag = growth_resolvent_diagnostic(model, m=1.0, lam=1.0, sizes=(100, 1000, 10000))
        assert diag.strictly_increasing


# =============================================================================
# Spectral and AEG
# =============================================================================


class TestFig1Spectrum:

    # Acceptance Test 1: Power iteration finds lambda0 = 1 at N = 800
    def test_perron_n800(self):
        triple = perron_eigenpair(figure_config("fig1").build_model(), 800)
        assert triple.lambda0 == pytest.approx(1.0, abs=1e-5)

    # Acceptance Test 2: Non-Perron modes at N = 400 carry no h-moment
    def test_orthogonality_n400(self):
        report = spectral_gap(figure_config("fig1").build_model(), 400)
        assert report.orthogonality < 1e-6
        assert report.gap > 0


class TestFig1Aeg:

    # Acceptance Test 1: Error decays above the floor and fits an exponential
    def test_fig1_full_scale(self):
        result = run_experiment(figure_config("fig1", N=2000, t_end=20.0))
        assert result.spectral.lambda0 == pytest.approx(1.0, abs=1e-8)

        times = result.trace.times
        checkpoints = [int(np.argmin(np.abs(times - t))) for t in np.arange(1.0, 15.01, 0.5)]
        sampled = result.error_curve[checkpoints]
        above = sampled[sampled > 10.0 * result.floor]
        assert above.size >= 2
        assert np.all(np.diff(above) < 0)

        assert result.fit.rate > 0
        assert result.fit.converged or result.fit.rms_residual < 0.1


class TestExample1:

    # Acceptance Test 1: Root equation and power iteration agree at N = 2000
    def test_root_matches_perron(self):
        model = ExperimentConfig.load(CONFIG_DIR / "example1.json").build_model()
        solution = example1_solve(model, size=2000)
        triple = perron_eigenpair(model, 2000)
        assert solution.lambda0 == pytest.approx(triple.lambda0, abs=1e-5)

        U = assemble(model, 2000, "U_full").to_sparse()
        f = solution.eigenvector.entries
        residual = (U @ f - solution.lambda0 * f)[1:]
        assert np.max(np.abs(residual)) < 1e-10


class TestSplitting:

    # Acceptance Test 1: Lie splitting is first order on fig1 at N = 200
    def test_lie_order(self):
        model = figure_config("fig1").build_model()
        f0 = StateVector.delta(10, 200, 10.0)
        reference = integrate(model, f0, (0.0, 1.0), SolverOptions(rtol=1e-12, atol=1e-16)).final
        steps = [4, 8, 16, 32, 64]
        errors = [norm(trotter_evolve(model, f0, 1.0, n) - reference, 2.0) for n in steps]
        assert all(later < earlier for earlier, later in zip(errors, errors[1:]))
        slope = -np.polyfit(np.log(steps), np.log(errors), 1)[0]
        assert slope >= 0.8
