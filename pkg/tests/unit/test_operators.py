# =============================================================================
# Unit Tests for operators.py
# =============================================================================

# Covers assembly of the truncated generators, apply, the mass identity,
# explicit and Neumann resolvents and the resolvent-norm probes

import numpy as np
import pytest

import operators as mod
from errors import ResolventDomainError, ValidationError
from model import CoefficientModel, make_kernel, rate_family
from spaces import StateVector


# =============================================================================
# Helpers
# =============================================================================


def make_model(frag=None, growth=None, death=None, kernel=None):
    kernel_obj, induced = make_kernel(kernel if kernel is not None else {"type": "monomer_shatter"})
    return CoefficientModel(
        fragmentation_rate=rate_family(frag or {"family": "linear", "coeff": 2.0}, induced),
        growth_rate=rate_family(growth or {"family": "linear", "coeff": 1.0}),
        death_rate=rate_family(death or {"family": "zero"}),
        kernel=kernel_obj,
    )


# a = 2n, g = n, d = 0, monomer shatter
def make_fig1_model():
    return make_model()


def make_mixed_model(kernel=None):
    return make_model(
        frag={"family": "linear", "coeff": 1.0},
        growth={"family": "power", "coeff": 1.0, "exponent": 1.1},
        death={"family": "linear", "coeff": 0.5},
        kernel=kernel or {"type": "uniform_binary"},
    )


def random_state(N, seed=0):
    return StateVector(np.random.default_rng(seed).random(N))


# =============================================================================
# Tests for assemble() and apply()
# =============================================================================


class TestAssemble:

    # Test 1: Hand-computed K for N = 3, a = (0, 2, 3), g = 1, d = 0
    def test_subdiagonal_example(self):
        model = make_model(
            frag={"family": "table", "values": [0.0, 2.0, 3.0]},
            growth={"family": "constant", "value": 1.0},
        )
        dense = mod.assemble(model, 3, "K_subdiagonal").to_dense()
        assert np.diag(dense).tolist() == [-1.0, -3.0, -4.0]
        assert np.diag(dense, -1).tolist() == [1.0, 1.0]
        assert np.count_nonzero(np.triu(dense, 1)) == 0

    # Test 2: Reflecting closes the growth flux out of N
    def test_reflecting_policy(self):
        model = make_fig1_model()
        absorbing = mod.assemble(model, 5, "K_subdiagonal", "absorbing")
        reflecting = mod.assemble(model, 5, "K_subdiagonal", "reflecting")
        assert absorbing.diagonal[-1] == pytest.approx(-(5.0 + 10.0))
        assert reflecting.diagonal[-1] == pytest.approx(-10.0)

    # Test 3: U = V + F entrywise
    @pytest.mark.parametrize("kernel", [{"type": "uniform_binary"}, {"type": "monomer_shatter"}])
    def test_full_is_sum_of_parts(self, kernel):
        model = make_mixed_model(kernel)
        full = mod.assemble(model, 12, "U_full").to_dense()
        parts = mod.assemble(model, 12, "V_birth_death").to_dense() + mod.assemble(model, 12, "F_fragmentation").to_dense()
        assert np.allclose(full, parts, atol=1e-13)

    # Test 4: Every assembled operator is Metzler
    @pytest.mark.parametrize("which", mod.OPERATOR_KINDS)
    def test_metzler(self, which):
        assert mod.is_metzler(mod.assemble(make_mixed_model(), 15, which))

    # Test 5: Sparse and dense storage agree
    def test_sparse_storage_for_monomer_shatter(self):
        op = mod.assemble(make_fig1_model(), 20, "U_full")
        assert op.is_sparse
        assert np.allclose(op.to_sparse().toarray(), op.to_dense())

    # Test 6: Dense kernels keep dense storage below the limit
    def test_dense_storage_for_uniform_binary(self):
        op = mod.assemble(make_mixed_model(), 20, "U_full")
        assert not op.is_sparse
        assert isinstance(op.as_matrix(), np.ndarray)

    # Test 7: Invalid arguments are rejected
    @pytest.mark.parametrize("args", [(1, "U_full", "absorbing"), (5, "W", "absorbing"), (5, "U_full", "open")])
    def test_invalid_arguments(self, args):
        with pytest.raises(ValidationError):
            mod.assemble(make_fig1_model(), *args)


class TestApply:

    # Test 1: apply() matches the dense matrix product
    @pytest.mark.parametrize("which", mod.OPERATOR_KINDS)
    def test_matches_dense(self, which):
        op = mod.assemble(make_mixed_model(), 25, which)
        f = random_state(25)
        assert np.allclose(mod.apply(op, f).entries, op.to_dense() @ f.entries, rtol=1e-13, atol=1e-13)

    # Test 2: U_adjoint is the transpose of U_full
    def test_adjoint_is_transpose(self):
        model = make_mixed_model()
        full = mod.assemble(model, 10, "U_full").to_dense()
        adjoint = mod.assemble(model, 10, "U_adjoint").to_dense()
        assert np.array_equal(adjoint, full.T)

    # Test 3: Size mismatch is rejected
    def test_dimension_mismatch(self):
        op = mod.assemble(make_fig1_model(), 5)
        with pytest.raises(ValidationError):
            mod.apply(op, np.ones(4))

    # Test 4: On-the-fly columns reproduce the stored block
    def test_fragmentation_columns(self):
        model = make_mixed_model()
        columns = mod.FragmentationColumns(model, 30)
        block = mod._fragmentation_block(model, 30)
        x = random_state(30, seed=3).entries
        assert np.allclose(columns.toarray(), block)
        assert np.allclose(columns @ x, block @ x)
        assert np.allclose(columns.rmatvec(x), block.T @ x)


class TestMassIdentity:

    # Test 1: Column i < N carries g_i - d_i, column N carries -N g_N - d_N
    @pytest.mark.parametrize("kernel", [{"type": "uniform_binary"}, {"type": "monomer_shatter"}, {"type": "ends_only"}])
    def test_weighted_column_sums_absorbing(self, kernel):
        model = make_mixed_model(kernel)
        N = 20
        sums = mod.weighted_column_sums(mod.assemble(model, N, "U_full"))
        sizes = np.arange(1, N + 1)
        g, d = model.g(sizes), model.d(sizes)
        expected = g - d
        expected[-1] = -N * g[-1] - d[-1]
        assert np.allclose(sums, expected, rtol=1e-12, atol=1e-12)

    # Test 2: Reflecting keeps only the death loss at N
    def test_weighted_column_sums_reflecting(self):
        model = make_mixed_model()
        sums = mod.weighted_column_sums(mod.assemble(model, 20, "U_full", "reflecting"))
        assert sums[-1] == pytest.approx(-model.d(20))

    # Test 3: Pure fragmentation conserves mass in every column
    def test_pure_fragmentation_conserves(self):
        model = make_model(
            frag={"family": "linear", "coeff": 1.0},
            growth={"family": "zero"},
            kernel={"type": "homogeneous", "profile": "beta_symmetric", "beta": 0.1},
        )
        sums = mod.weighted_column_sums(mod.assemble(model, 40, "F_fragmentation"))
        assert np.allclose(sums, 0.0, atol=1e-10)


# =============================================================================
# Tests for resolvents
# =============================================================================


class TestResolventK:

    # Test 1: (lambda - K) R f = f
    @pytest.mark.parametrize("lam", [0.5, 1.0, 10.0])
    def test_inverts_lambda_minus_k(self, lam):
        model = make_mixed_model()
        f = random_state(30)
        u = mod.resolvent_K_apply(model, lam, f)
        K = mod.assemble(model, 30, "K_subdiagonal").to_dense()
        assert np.allclose((lam * np.eye(30) - K) @ u.entries, f.entries, rtol=1e-12, atol=1e-12)

    # Test 2: Component n depends on f_1..f_n only
    def test_truncation_consistent(self):
        model = make_fig1_model()
        f = random_state(40)
        long = mod.resolvent_K_apply(model, 1.0, f)
        short = mod.resolvent_K_apply(model, 1.0, f.entries[:25])
        assert np.allclose(long.entries[:25], short.entries, rtol=1e-14)

    # Test 3: The Neumann series terminates after N terms
    def test_neumann_terminates(self):
        model = make_mixed_model()
        f = random_state(12)
        exact = mod.resolvent_K_apply(model, 2.0, f)
        series = mod.neumann_resolvent_K(model, 2.0, f, 12)
        assert np.allclose(series.entries, exact.entries, rtol=1e-12)

    # Test 4: n partial sums are exact on components 1..n
    def test_neumann_partial_sums(self):
        model = make_mixed_model()
        f = random_state(12)
        exact = mod.resolvent_K_apply(model, 2.0, f)
        series = mod.neumann_resolvent_K(model, 2.0, f, 5)
        assert np.allclose(series.entries[:5], exact.entries[:5], rtol=1e-12)
        assert not np.allclose(series.entries[5:], exact.entries[5:])

    # Test 5: lambda + theta_n <= 0 is outside the resolvent set
    def test_domain_error(self):
        with pytest.raises(ResolventDomainError):
            mod.resolvent_K_apply(make_fig1_model(), -5.0, np.ones(5))


class TestResolventU:

    # Test 1: (lambda - U) R f = f for sparse and dense storage
    @pytest.mark.parametrize("kernel", [{"type": "monomer_shatter"}, {"type": "uniform_binary"}])
    def test_inverts_lambda_minus_u(self, kernel):
        model = make_mixed_model(kernel)
        f = random_state(20)
        u = mod.resolvent_U_apply(model, 3.0, f)
        U = mod.assemble(model, 20, "U_full").to_dense()
        assert np.allclose((3.0 * np.eye(20) - U) @ u.entries, f.entries, rtol=1e-10, atol=1e-12)

    # Test 2: Neumann series over the coupling converges for large lambda
    def test_neumann_matches_direct(self):
        model = make_model(
            frag={"family": "linear", "coeff": 1.0},
            growth={"family": "linear", "coeff": 1.0},
            kernel={"type": "uniform_binary"},
        )
        f = random_state(10)
        direct = mod.resolvent_U_apply(model, 100.0, f)
        series = mod.neumann_resolvent_U(model, 100.0, f, 60)
        assert np.allclose(series.entries, direct.entries, rtol=1e-10)


# =============================================================================
# Tests for the probes
# =============================================================================


class TestResolventProbe:

    # Test 1: Bound m'/(m' - m) = 3 holds for the fig1 model
    @pytest.mark.parametrize("lam", [1.0, 10.0])
    def test_bound_holds(self, lam):
        probe = mod.resolvent_bound_probe(make_fig1_model(), 2.0, 3.0, lam, samples=20, N=100)
        assert probe.bound == pytest.approx(3.0)
        assert probe.precondition == "holds"
        assert probe.within_bound

    # Test 2: Large lambda drives the ratio to 1
    def test_large_lambda_limit(self):
        f = random_state(50)
        ratio = mod.resolvent_ratio(make_fig1_model(), 2.0, 1e7, f)
        assert ratio == pytest.approx(1.0, abs=1e-4)

    # Test 3: Same seed, same ratios
    def test_deterministic(self):
        model = make_fig1_model()
        first = mod.resolvent_bound_probe(model, 2.0, 3.0, 1.0, samples=5, N=30, seed=7)
        second = mod.resolvent_bound_probe(model, 2.0, 3.0, 1.0, samples=5, N=30, seed=7)
        assert np.array_equal(first.ratios, second.ratios)

    # Test 4: A failing precondition is reported, the probe still runs
    def test_precondition_reported(self, caplog):
        model = make_model(
            frag={"family": "constant", "value": 1.0},
            growth={"family": "linear", "coeff": 1.0},
        )
        probe = mod.resolvent_bound_probe(model, 2.0, 3.0, 1.0, samples=3, N=30)
        assert probe.precondition != "holds"
        assert probe.ratios.size == 3
        assert "condi2" in caplog.text

    # Test 5: Invalid arguments
    @pytest.mark.parametrize("lam, samples, m_prime", [(0.0, 5, 3.0), (1.0, 0, 3.0), (1.0, 5, 2.0)])
    def test_invalid_arguments(self, lam, samples, m_prime):
        with pytest.raises(ValidationError):
            mod.resolvent_bound_probe(make_fig1_model(), 2.0, m_prime, lam, samples=samples, N=10)


class TestGrowthDiagnostic:

    # Test 1: Superlinear growth makes ||R delta_1||_[1] increase with N
    def test_superlinear_growth_increases(self):
        model = CoefficientModel(
            rate_family({"family": "zero"}),
            rate_family({"family": "power", "coeff": 1.0, "exponent": 2.0}),
            rate_family({"family": "zero"}),
            None,
        )
        diag = mod.growth_resolvent_diagnostic(model, m=1.0, lam=1.0, sizes=(100, 1000, 10000))
        assert diag.strictly_increasing
        assert diag.growth_factor > 1.0

    # Test 2: Sizes must ascend
    def test_sizes_must_ascend(self):
        with pytest.raises(ValidationError):
            mod.growth_resolvent_diagnostic(make_fig1_model(), sizes=(100, 10))
