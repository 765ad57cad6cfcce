import json

import numpy as np
import pytest

from acimlab.bvspace import default_r_grid, l1_distance, var_norm
from acimlab.errors import ConvergenceError, ParameterError, SamplingError, StructuralError
from acimlab.maps import builtin
from acimlab.noise import NoiseKernel, noise_matrix
from acimlab.stability import (
    SolveOptions,
    SweepReport,
    SweepRow,
    cesaro_averages,
    envelope_excess,
    fit_envelope,
    invariant_density,
    ly_estimate,
    ly_samples,
    monte_carlo_density,
    perturbed_operator,
    random_test_functions,
    residual,
    solve_invariant,
    spectral_gap,
    stability_sweep,
)
from acimlab.transfer import GridDensity, TransferMatrix, apply_matrix, ulam_matrix

MARKOV3_H = np.array([4 / 3, 2 / 3])


def markov3_step(n):
    return np.repeat(MARKOV3_H, n // 2)


def noisy(tmap, delta, n, profile="biweight"):
    return perturbed_operator(ulam_matrix(tmap, n), noise_matrix(NoiseKernel(profile, delta), n))


class TestSolver:
    def test_doubling_uniform(self, doubling):
        h = invariant_density(ulam_matrix(doubling, 256))
        assert np.max(np.abs(h.values - 1)) <= 1e-10

    @pytest.mark.parametrize("method", ["power", "cesaro", "eigen"])
    def test_markov3_two_cells(self, markov3, method):
        h = invariant_density(ulam_matrix(markov3, 2), SolveOptions(method=method))
        np.testing.assert_allclose(h.values, MARKOV3_H, atol=1e-11)

    def test_markov3_refined_grid_is_exact(self, markov3):
        # the partition is Markov, so every dyadic grid reproduces the step density
        h = invariant_density(ulam_matrix(markov3, 256))
        assert l1_distance(h, GridDensity(markov3_step(256))) <= 1e-10

    @pytest.mark.parametrize("delta", [0.01, 0.2])
    def test_noise_alone_uniform(self, delta):
        h = invariant_density(noise_matrix(NoiseKernel("biweight", delta), 128))
        assert np.max(np.abs(h.values - 1)) <= 1e-10

    def test_output_contract(self, sine):
        M = ulam_matrix(sine, 256)
        for method in ("power", "cesaro", "eigen"):
            res = solve_invariant(M, SolveOptions(method=method))
            assert res.residual <= 1e-12
            assert residual(M, res.density) <= 1e-12
            assert np.all(res.density.values >= 0)
            assert res.density.integral == pytest.approx(1, abs=1e-12)

    def test_methods_agree(self, all_builtins):
        tol = 1e-12
        for m in all_builtins:
            for M in (ulam_matrix(m, 512), noisy(m, 0.05, 512)):
                hs = [invariant_density(M, SolveOptions(method=k, tol=tol)).values
                      for k in ("power", "cesaro", "eigen")]
                for a in hs:
                    for b in hs:
                        assert np.abs(a - b).sum() / 512 <= 10 * tol

    def test_periodic_chain_falls_back_to_cesaro(self):
        swap = TransferMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), "frobenius_perron")
        seed = GridDensity([1.5, 0.5])
        res = solve_invariant(swap, SolveOptions(seed_density=seed))
        assert res.method == "power+cesaro"
        np.testing.assert_allclose(res.density.values, [1, 1], atol=1e-12)

    def test_convergence_error_carries_residual(self, sine):
        M = ulam_matrix(sine, 256)
        seed = GridDensity(np.linspace(0.1, 2, 256))
        with pytest.raises(ConvergenceError) as err:
            solve_invariant(M, SolveOptions(method="cesaro", tol=1e-14, max_iter=20, seed_density=seed))
        assert err.value.residual > 1e-14

    def test_seed_size_checked(self, sine):
        with pytest.raises(StructuralError):
            solve_invariant(ulam_matrix(sine, 8), SolveOptions(seed_density=GridDensity(np.ones(4))))

    @pytest.mark.parametrize("kw", [{"method": "lu"}, {"tol": 0.0}, {"max_iter": 0}])
    def test_options_validated(self, kw):
        with pytest.raises(ParameterError):
            SolveOptions(**kw)


def test_markov_contraction(all_builtins, rng):
    for m in all_builtins:
        for M in (ulam_matrix(m, 200), noisy(m, 0.07, 200)):
            for _ in range(100):
                f = rng.normal(size=200)
                assert np.abs(M.matvec(f)).sum() <= np.abs(f).sum() * (1 + 1e-13)
                g = np.abs(f)
                assert np.abs(M.matvec(g)).sum() == pytest.approx(g.sum(), rel=1e-13)


def test_cesaro_residual_bound(all_builtins, rng):
    for m in all_builtins:
        M = noisy(m, 0.05, 256)
        f = GridDensity(np.exp(rng.normal(size=256))).normalized()
        for k, h in cesaro_averages(M, f, 300):
            assert residual(M, h) <= 2 / k + 1e-12


class TestPerturbed:
    def test_identity_noise(self, sine):
        P = ulam_matrix(sine, 64)
        eye = TransferMatrix(np.eye(64), "noise")
        np.testing.assert_array_equal(perturbed_operator(P, eye).dense(), P.dense())

    def test_stochastic(self, all_builtins):
        for m in all_builtins:
            Pd = noisy(m, 0.03, 256)
            assert Pd.kind == "perturbed"
            assert np.max(np.abs(Pd.column_sums() - 1)) <= 1e-9

    @pytest.mark.parametrize("delta", [0.01, 0.1, 0.24])
    def test_doubling_uniform_fixed(self, doubling, delta):
        out = apply_matrix(noisy(doubling, delta, 256), GridDensity.uniform(256))
        assert np.max(np.abs(out.values - 1)) <= 1e-12

    def test_mismatches(self, sine):
        P = ulam_matrix(sine, 16)
        with pytest.raises(StructuralError):
            perturbed_operator(P, noise_matrix(NoiseKernel(), 32))
        with pytest.raises(StructuralError):
            perturbed_operator(noise_matrix(NoiseKernel(), 16), P)


class TestSweep:
    def test_doubling_exact(self, doubling):
        rep = stability_sweep(doubling, "biweight", [0.2, 0.1, 0.05, 0.01], 256, 2)
        assert np.all(rep.l1_errors <= 1e-8)

    @pytest.mark.parametrize("name", ["markov3", "sine"])
    def test_trend(self, name):
        m = builtin(name, [0.05] if name == "sine" else ())
        deltas = [2.0**-k for k in range(3, 10)]
        rep = stability_sweep(m, "biweight", deltas, 1024, 2, spectra=False)
        e = rep.l1_errors
        assert np.all(e > 0)
        assert e[-1] < e[0] / 4
        assert np.all(e[1:] <= 1.1 * e[:-1])
        if name == "sine":
            assert e[-1] < 0.02

    def test_max_iter_invariance(self, sine):
        deltas = [0.1, 0.03]
        a = stability_sweep(sine, "biweight", deltas, 256, 2, SolveOptions(max_iter=50_000), spectra=False)
        b = stability_sweep(sine, "biweight", deltas, 256, 2, SolveOptions(max_iter=100_000), spectra=False)
        assert np.max(np.abs(a.l1_errors - b.l1_errors)) <= 1e-6

    def test_convergence_error_tags_delta(self, sine, monkeypatch):
        import acimlab.stability as stab

        real = stab.solve_invariant

        def failing(M, opts=SolveOptions()):
            # noise speeds convergence on every builtin, so force the failure
            if M.kind == "perturbed":
                raise ConvergenceError("forced", residual=0.5)
            return real(M, opts)

        monkeypatch.setattr(stab, "solve_invariant", failing)
        with pytest.raises(ConvergenceError) as err:
            stability_sweep(sine, "biweight", [0.2, 0.1], 64, 2, spectra=False)
        assert err.value.delta == 0.2
        assert err.value.residual == 0.5
        assert "delta=0.2" in str(err.value)

    @pytest.mark.parametrize("deltas", [[0.1, 0.2], [0.3], [], [0.1, 0.1]])
    def test_bad_deltas(self, sine, deltas):
        with pytest.raises(ParameterError):
            stability_sweep(sine, "biweight", deltas, 32, 2)

    def test_workers_agree(self, sine):
        deltas = [0.2, 0.1, 0.05]
        a = stability_sweep(sine, "biweight", deltas, 128, 2)
        b = stability_sweep(sine, "biweight", deltas, 128, 2, workers=3)
        assert a.to_csv() == b.to_csv()

    def test_serialisation(self, sine):
        rep = stability_sweep(sine, "biweight", [0.2, 0.05], 128, 2)
        lines = rep.to_csv().splitlines()
        assert lines[0] == "delta,l1_error,var_h_delta,spectral_gap,iterations"
        assert len(lines) == 3
        text = rep.to_json()
        back = SweepReport.from_json(text)
        assert back.to_json() == text
        d = json.loads(text)
        assert d["map"] == "sine(eta=0.05)" and d["n"] == 128
        assert float(lines[1].split(",")[1]) == rep.rows[0].l1_error

    def test_report_invariants(self):
        row = SweepRow(0.1, 0.0, 1.0, 0.5, 3)
        with pytest.raises(StructuralError):
            SweepReport([row, SweepRow(0.2, 0.0, 1.0, 0.5, 3)], 8, 2, "m", "k")
        with pytest.raises(StructuralError):
            SweepReport([SweepRow(0.1, -1.0, 1.0, 0.5, 3)], 8, 2, "m", "k")

    def test_rate_exponent(self):
        rows = [SweepRow(d, 3 * d**1.5, 0, 0, 1) for d in (0.2, 0.1, 0.05)]
        assert SweepReport(rows, 8, 2, "m", "k").rate_exponent == pytest.approx(1.5)


class TestLY:
    def test_doubling(self, doubling, rng):
        est = ly_estimate(ulam_matrix(doubling, 1024), 2, rng=rng)
        assert est.alpha_hat <= 2**-0.5 + 0.1
        assert not est.violated

    def test_identity(self, rng):
        est = ly_estimate(TransferMatrix(np.eye(256), "noise"), 2, rng=rng)
        assert est.alpha_hat == pytest.approx(1.0, abs=1e-12)
        assert est.c_hat == 0.0

    def test_noise_contracts(self, rng):
        est = ly_estimate(noise_matrix(NoiseKernel("biweight", 0.1), 1024), 2, rng=rng)
        assert est.alpha_hat < 1
        assert est.alpha_hat >= 0 and est.c_hat >= 0

    def test_degenerate_samples(self):
        n = 16
        with pytest.raises(SamplingError):
            fit_envelope(np.ones(4), np.zeros(4), np.ones(4))
        assert envelope_excess([1.0], [1.0], [1.0], 1.0, 0.0) == 0.0
        with pytest.raises(ParameterError):
            ly_estimate(TransferMatrix(np.eye(n), "noise"), 2, num_test_functions=5)

    def test_families(self, rng):
        fs = random_test_functions(128, 30, rng)
        assert fs.shape == (30, 128)
        steps = fs[0::3]
        assert all(1 <= np.count_nonzero(np.diff(f)) <= 50 for f in steps)
        dens = fs[2::3]
        assert np.all(dens > 0)
        np.testing.assert_allclose(dens.mean(axis=1), 1, atol=1e-12)

    def test_envelope_without_gain(self, rng):
        # no sample gains seminorm, so the C cap is 0 and alpha is the worst ratio
        v0 = rng.uniform(1, 2, 50)
        l1 = rng.uniform(0.5, 1, 50)
        v1 = 0.6 * v0 + 0.2 * l1
        alpha, c = fit_envelope(v1, v0, l1)
        assert c == 0.0
        assert alpha == pytest.approx(np.max(v1 / v0), abs=1e-15)

    def test_envelope_with_gain(self, rng):
        v0 = rng.uniform(0.01, 2, 50)
        l1 = np.ones(50)
        v1 = 0.6 * v0 + 0.2
        alpha, c = fit_envelope(v1, v0, l1)
        assert envelope_excess(v1, v0, l1, alpha, c) <= 1e-12
        assert alpha <= 0.6 + 1e-12
        assert 0 <= c <= 10 * np.max(v1 - v0)

    def test_bounded_iterates(self, sine, rng):
        n, p = 512, 2
        grid = default_r_grid(n)
        M = noisy(sine, 0.2, n)
        est = ly_estimate(M, p, grid, rng=rng)
        assert est.alpha_hat < 1
        bound_extra = est.c_hat / (1 - est.alpha_hat)
        for f in random_test_functions(n, 12, rng):
            f = f / (np.abs(f).sum() / n)
            v0 = var_norm(GridDensity(f), p, grid).var
            cur = f
            for _ in range(100):
                cur = M.matvec(cur)
                assert var_norm(GridDensity(cur), p, grid).var <= v0 + bound_extra + 1e-8

    def test_samples_shape(self, sine, rng):
        M = ulam_matrix(sine, 64)
        fs = random_test_functions(64, 12, rng)
        v1, v0, l1 = ly_samples(M, fs, 2, default_r_grid(64))
        assert v1.shape == v0.shape == l1.shape == (12,)


class TestSpectrum:
    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_doubling_small_grids(self, doubling, n):
        # oracle: the range of the Ulam matrix is pair-constant vectors, where it acts as
        # [[1/2, 1/2], [1/2, 1/2]]; the rest is nilpotent, so lambda_2 = 0
        M = ulam_matrix(doubling, n).dense()
        L = int(np.log2(n))
        np.testing.assert_allclose(np.linalg.matrix_power(M, L), np.linalg.matrix_power(M, L + 1), atol=1e-15)
        sg = spectral_gap(ulam_matrix(doubling, n))
        assert sg.lambda2_modulus == pytest.approx(0.0, abs=1e-6)
        assert sg.eigenvalue_one_simple

    def test_identity_not_simple(self):
        sg = spectral_gap(TransferMatrix(np.eye(4), "noise"))
        assert not sg.eigenvalue_one_simple
        assert sg.lambda2_modulus == pytest.approx(1.0)

    def test_markov3(self, markov3):
        sg = spectral_gap(ulam_matrix(markov3, 512))
        assert sg.eigenvalue_one_simple and sg.lambda2_modulus < 1
        assert 0 < sg.gap <= 1

    def test_arpack_matches_dense(self, markov3):
        n = 1100
        M = noisy(markov3, 0.05, n)
        sparse_path = spectral_gap(M)
        dense = np.sort(np.abs(np.linalg.eigvals(M.dense())))[::-1]
        assert sparse_path.lambda2_modulus == pytest.approx(dense[1], abs=1e-8)
        assert sparse_path.eigenvalue_one_simple

    def test_budget(self):
        big = TransferMatrix(__import__("scipy.sparse", fromlist=["identity"]).identity(8193, format="csr"), "noise")
        with pytest.raises(ParameterError):
            spectral_gap(big)


class TestMonteCarlo:
    def test_doubling_uniform(self, doubling, rng):
        h = monte_carlo_density(doubling, NoiseKernel("biweight", 0.05), 10**6, 64, rng)
        assert h.is_probability_density()
        assert l1_distance(h, GridDensity.uniform(64)) <= 0.02

    def test_markov3_matches_operator(self, markov3, rng):
        n_fine, n = 4096, 64
        h_op = invariant_density(noisy(markov3, 0.02, n_fine)).coarsen(n)
        h_mc = monte_carlo_density(markov3, NoiseKernel("biweight", 0.02), 10**6, n, rng)
        assert l1_distance(h_mc, h_op) <= 0.05

    def test_tiny_noise_matches_noiseless(self, sine, rng):
        a = monte_carlo_density(sine, NoiseKernel("biweight", 1e-8), 10**6, 64, np.random.default_rng(1))
        b = monte_carlo_density(sine, None, 10**6, 64, np.random.default_rng(2))
        assert l1_distance(a, b) <= 0.05

    def test_single_chain(self, sine, rng):
        h = monte_carlo_density(sine, NoiseKernel("biweight", 0.1), 10**4, 16, rng, chains=1)
        assert h.is_probability_density()

    def test_sample_floor(self, sine, rng):
        with pytest.raises(ParameterError):
            monte_carlo_density(sine, None, 9999, 16, rng)

    def test_reproducible(self, sine):
        k = NoiseKernel("biweight", 0.1)
        a = monte_carlo_density(sine, k, 10**4, 32, np.random.default_rng(5))
        b = monte_carlo_density(sine, k, 10**4, 32, np.random.default_rng(5))
        np.testing.assert_array_equal(a.values, b.values)
