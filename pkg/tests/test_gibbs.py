"""Tests for the full conditionals, the Gibbs chain, summaries and chain files."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuzzyda.gibbs import (
    ChainConfig,
    PosteriorChain,
    bayes_estimate,
    conditional_beta_posterior,
    conditional_sigma_posterior,
    fit_all,
    impute_traits,
    kronecker_contraction,
    load_chains,
    quantile_intervals,
    run_chain,
    save_chains,
)
from fuzzyda.model import (
    MISSING,
    CategoryParams,
    CategoryPrior,
    ClassRule,
    Continuous,
    CovarianceClassMap,
    Dataset,
    Exact,
    Interval,
    Observation,
    TraitSchema,
    vec,
)
from fuzzyda.samplers import rng_stream


def _spd(rng, q):
    M = rng.normal(size=(q, q))
    return M @ M.T + q * np.eye(q)


def _naive_beta_posterior(Sigmas, Xs, Ys, prior):
    """Dense oracle that forms Z = I_q (x) X and Sigma (x) I_n explicitly."""
    q = prior.q
    prec = np.kron(np.eye(q), np.linalg.inv(prior.SigmaB))
    shift = prec @ prior.beta0
    for S, X, Y in zip(Sigmas, Xs, Ys):
        n = len(X)
        Z = np.kron(np.eye(q), X)
        W = np.linalg.inv(np.kron(S, np.eye(n)))
        prec = prec + Z.T @ W @ Z
        shift = shift + Z.T @ W @ vec(Y)
    cov = np.linalg.inv(prec)
    return cov @ shift, cov


class TestKroneckerContraction:
    def test_identity_covariance(self):
        X = np.random.default_rng(0).normal(size=(5, 2))
        np.testing.assert_allclose(kronecker_contraction(X, np.eye(3)), np.kron(np.eye(3), X.T @ X))

    def test_intercept_only(self):
        S = np.array([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_allclose(kronecker_contraction(np.ones((4, 1)), S),
                                   np.linalg.inv(S) * 4, atol=1e-12)

    def test_matches_naive_kronecker(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(3, 2))
        S = _spd(rng, 2)
        Z = np.kron(np.eye(2), X)
        naive = Z.T @ np.linalg.inv(np.kron(S, np.eye(3))) @ Z
        assert np.max(np.abs(kronecker_contraction(X, S) - naive)) < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 3), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_identity_property(self, n, p, q, seed):
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p))])
        S = _spd(rng, q)
        Z = np.kron(np.eye(q), X)
        naive = Z.T @ np.linalg.solve(np.kron(S, np.eye(n)), Z)
        np.testing.assert_allclose(kronecker_contraction(X, S), naive, atol=1e-10)


class TestBetaPosterior:
    def test_no_data_returns_prior(self):
        prior = CategoryPrior(np.arange(4.0).reshape(2, 2), np.diag([4.0, 1.0]), 5, np.eye(2))
        b, S = conditional_beta_posterior([np.eye(2)], [np.empty((0, 2))], [np.empty(0)], prior)
        np.testing.assert_allclose(b, prior.beta0)
        np.testing.assert_allclose(S, np.kron(np.eye(2), prior.SigmaB))

    def test_flat_prior_is_least_squares(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([np.ones(40), rng.normal(size=40)])
        u = X @ [1.5, -2.0] + rng.normal(size=40)
        prior = CategoryPrior(np.zeros((2, 1)), 1e6 * np.eye(2), 3, np.eye(1))
        b, _ = conditional_beta_posterior([np.array([[0.7]])], [X], [u], prior)
        ls = np.linalg.solve(X.T @ X, X.T @ u)
        np.testing.assert_allclose(b, ls, rtol=1e-3)

    def test_scalar_ridge_solve(self):
        rng = np.random.default_rng(3)
        X = np.column_stack([np.ones(10), rng.normal(size=10)])
        u = rng.normal(size=10)
        s2 = 0.4
        prior = CategoryPrior(np.array([[1.0], [2.0]]), np.diag([3.0, 0.5]), 3, np.eye(1))
        b, _ = conditional_beta_posterior([np.array([[s2]])], [X], [u], prior)
        SBi = np.linalg.inv(prior.SigmaB)
        direct = np.linalg.solve(SBi + X.T @ X / s2, SBi @ prior.beta0 + X.T @ u / s2)
        np.testing.assert_allclose(b, direct, atol=1e-12)

    def test_matches_naive_two_classes(self):
        rng = np.random.default_rng(4)
        q, k = 2, 2
        prior = CategoryPrior(rng.normal(size=(k, q)), _spd(rng, k), 5, np.eye(q))
        Sigmas = [_spd(rng, q), _spd(rng, q)]
        Xs = [np.column_stack([np.ones(n), rng.normal(size=n)]) for n in (6, 9)]
        Ys = [rng.normal(size=(len(X), q)) for X in Xs]
        b, S = conditional_beta_posterior(Sigmas, Xs, [vec(Y) for Y in Ys], prior)
        b0, S0 = _naive_beta_posterior(Sigmas, Xs, Ys, prior)
        assert np.max(np.abs(b - b0)) < 1e-10
        assert np.max(np.abs(S - S0)) < 1e-10


class TestSigmaPosterior:
    prior = CategoryPrior(np.zeros((2, 2)), np.eye(2), 6, np.array([[2.0, 0.3], [0.3, 1.0]]))

    def test_no_rows(self):
        nu, V = conditional_sigma_posterior(np.zeros((2, 2)), np.empty((0, 2)),
                                            np.empty((0, 2)), self.prior)
        assert nu == 6
        np.testing.assert_array_equal(V, self.prior.V0)

    def test_perfect_fit(self):
        X = np.column_stack([np.ones(5), np.arange(5.0)])
        B = np.array([[1.0, 2.0], [0.5, -1.0]])
        nu, V = conditional_sigma_posterior(B, X @ B, X, self.prior)
        assert nu == 11
        np.testing.assert_allclose(V, self.prior.V0, atol=1e-12)

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(7), rng.normal(size=7)])
        Y = rng.normal(size=(7, 2))
        B = rng.normal(size=(2, 2))
        _, V = conditional_sigma_posterior(B, Y, X, self.prior)
        S = np.zeros((2, 2))
        for j in range(7):
            for k in range(2):
                for l in range(2):
                    rk = Y[j, k] - sum(X[j, m] * B[m, k] for m in range(2))
                    rl = Y[j, l] - sum(X[j, m] * B[m, l] for m in range(2))
                    S[k, l] += rk * rl
        assert np.max(np.abs(V - self.prior.V0 - S)) < 1e-10
        np.testing.assert_array_equal(V, V.T)


class TestImpute:
    cmap = CovarianceClassMap(("age",), (ClassRule("juv", {"age": 0}), ClassRule("ad")))
    theta = CategoryParams(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]),
                           np.stack([np.eye(3) + 0.2, 2 * np.eye(3)]))

    def test_all_exact(self):
        obs = Observation((0,), (Exact(1.1), Exact(2.2), Exact(3.3)))
        y = impute_traits(self.theta, obs, self.cmap, rng_stream(0))
        np.testing.assert_array_equal(y, [1.1, 2.2, 3.3])

    def test_all_missing_uses_class_covariance(self):
        obs = Observation((1,), (MISSING, MISSING, MISSING))
        rng = rng_stream(1)
        y = np.array([impute_traits(self.theta, obs, self.cmap, rng) for _ in range(8000)])
        np.testing.assert_allclose(y.mean(axis=0), [1.5, 2.5, 3.5], atol=0.06)
        np.testing.assert_allclose(y.var(axis=0), 2.0, atol=0.15)

    def test_mixed_constraints(self):
        obs = Observation((0,), (Exact(0.123456789), Interval(2.0, 2.5), MISSING))
        rng = rng_stream(2)
        for _ in range(10_000):
            y = impute_traits(self.theta, obs, self.cmap, rng)
            assert y[0] == 0.123456789
            assert 2.0 < y[1] <= 2.5


def _synthetic(rng, n, B, Sigma, h=0.0):
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n)])
    Y = X @ B + rng.multivariate_normal(np.zeros(len(Sigma)), Sigma, n)
    if h:
        schema = TraitSchema(tuple(f"t{k}" for k in range(len(Sigma))),
                             tuple(Continuous(h) for _ in Sigma))
        lo, hi = schema.obfuscate(Y)
    else:
        lo, hi = Y, Y.copy()
    return X, lo, hi


class TestChain:
    prior = CategoryPrior(np.zeros((2, 2)), 100 * np.eye(2), 5, np.eye(2))

    def test_fixed_sigma_matches_closed_form(self):
        rng = np.random.default_rng(6)
        Sig = np.stack([np.array([[1.0, 0.3], [0.3, 0.5]]), np.array([[2.0, -0.4], [-0.4, 1.0]])])
        X, lo, hi = _synthetic(rng, 60, np.array([[1.0, -1.0], [0.5, 2.0]]), Sig[0])
        classes = X[:, 1].astype(int)
        cfg = ChainConfig(iterations=2500, burn_in=500, seed=3, fixed_sigmas=Sig.tolist())
        chain = run_chain(X, classes, lo, hi, self.prior, 2, cfg)
        Xs = [X[classes == a] for a in range(2)]
        Us = [vec(lo[classes == a]) for a in range(2)]
        bt, St = conditional_beta_posterior(Sig, Xs, Us, self.prior)
        draws = np.stack([vec(b) for b in chain.B])
        se = np.sqrt(np.diag(St) / len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - bt) < 3 * se)
        np.testing.assert_array_equal(chain.Sigmas, np.broadcast_to(Sig, chain.Sigmas.shape))

    def test_prior_only_chain(self):
        prior = CategoryPrior(np.zeros((1, 2)), np.eye(1), 8, np.array([[3.0, 1.0], [1.0, 2.0]]))
        chain = run_chain(np.empty((0, 1)), np.empty(0, int), np.empty((0, 2)), np.empty((0, 2)),
                          prior, 1, ChainConfig(iterations=20_000, burn_in=0, seed=4))
        np.testing.assert_allclose(chain.Sigmas.mean(axis=0)[0], prior.V0 / 5, atol=0.05)
        assert abs(chain.B[:, 0, 0].std() - 1.0) < 0.03

    def test_recovers_generating_parameters(self):
        rng = np.random.default_rng(7)
        B = np.array([[10.0, 5.0], [1.0, -2.0]])
        Sigma = np.array([[1.0, 0.3], [0.3, 0.5]])
        X, lo, hi = _synthetic(rng, 500, B, Sigma)
        chain = run_chain(X, np.zeros(500, int), lo, hi, self.prior, 1,
                          ChainConfig(iterations=2000, burn_in=500, seed=1))
        np.testing.assert_allclose(bayes_estimate(chain).B, B, rtol=0.05)

    def test_obfuscated_recovery(self):
        rng = np.random.default_rng(8)
        B = np.array([[10.0, 5.0], [1.0, -2.0]])
        Sigma = np.array([[1.0, 0.3], [0.3, 0.5]])
        X, lo, hi = _synthetic(rng, 200, B, Sigma, h=0.5)
        lo[::7, 1], hi[::7, 1] = -np.inf, np.inf
        chain = run_chain(X, np.zeros(200, int), lo, hi, self.prior, 1,
                          ChainConfig(iterations=800, burn_in=200, seed=2, retain_imputed=True))
        est = bayes_estimate(chain)
        np.testing.assert_allclose(est.B, B, rtol=0.1, atol=0.15)
        np.testing.assert_allclose(est.Sigmas[0], Sigma, atol=0.25)
        Y = chain.imputed
        assert np.all((Y > lo - 0) | (lo == hi)) and np.all(Y <= hi)
        assert np.all(np.linalg.eigvalsh(chain.Sigmas) > 0)

    def test_reproducible(self):
        rng = np.random.default_rng(9)
        X, lo, hi = _synthetic(rng, 30, np.ones((2, 2)), np.eye(2), h=0.5)
        cfg = ChainConfig(iterations=50, burn_in=10, thin=4, seed=5)
        a = run_chain(X, np.zeros(30, int), lo, hi, self.prior, 1, cfg)
        b = run_chain(X, np.zeros(30, int), lo, hi, self.prior, 1, cfg)
        assert len(a) == 10
        np.testing.assert_array_equal(a.B, b.B)
        np.testing.assert_array_equal(a.Sigmas, b.Sigmas)

    def test_small_class_warns(self):
        rng = np.random.default_rng(10)
        X, lo, hi = _synthetic(rng, 1, np.ones((2, 2)), np.eye(2))
        with pytest.warns(UserWarning, match="covariance class 0"):
            run_chain(X, np.zeros(1, int), lo, hi, self.prior, 1,
                      ChainConfig(iterations=5, burn_in=0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ChainConfig(iterations=10, burn_in=10)
        with pytest.raises(ValueError):
            ChainConfig(thin=0)
        assert ChainConfig(iterations=11, burn_in=1, thin=3).retained == 3

    @pytest.mark.slow
    def test_interval_width_contracts(self):
        B = np.array([[1.0, 0.0], [0.5, 0.5]])
        widths = np.zeros((2, 10))
        for s in range(10):
            for j, n in enumerate((40, 80)):
                rng = np.random.default_rng(100 + s)
                X, lo, hi = _synthetic(rng, n, B, np.eye(2))
                chain = run_chain(X, np.zeros(n, int), lo, hi, self.prior, 1,
                                  ChainConfig(iterations=700, burn_in=200, seed=s))
                qs = np.quantile(chain.B, [0.025, 0.975], axis=0)
                widths[j, s] = np.max(qs[1] - qs[0])
        assert widths[1].mean() <= widths[0].mean()


class TestFitAll:
    def test_workers_do_not_change_results(self):
        rng = np.random.default_rng(11)
        schema = TraitSchema(("a", "b"), (Continuous(0.5), Continuous(0.5)))
        cmap = CovarianceClassMap.single(("x",))
        Y = rng.normal(size=(40, 2)) * 2
        lo, hi = schema.obfuscate(Y)
        ds = Dataset(schema, ("x",), cmap, ("u", "v", "w"), rng.integers(0, 2, (40, 1)),
                     lo, hi, np.r_[np.zeros(20, int), np.ones(20, int)])
        prior = CategoryPrior(np.zeros((2, 2)), np.eye(2), 5, np.eye(2))
        cfg = ChainConfig(iterations=30, burn_in=5, seed=6)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            one = fit_all(ds, [prior] * 3, cfg, workers=1)
        assert any("no observations" in str(w.message) for w in caught)
        two = fit_all(ds, [prior] * 3, cfg, workers=2)
        for a, b in zip(one, two):
            np.testing.assert_array_equal(a.B, b.B)
            np.testing.assert_array_equal(a.Sigmas, b.Sigmas)
        assert not np.array_equal(one[0].B, one[1].B)


class TestSummaries:
    def _chain(self, B, S):
        return PosteriorChain(np.asarray(B, float), np.asarray(S, float))

    def test_single_draw(self):
        B = np.arange(4.0).reshape(1, 2, 2)
        S = np.eye(2)[None, None]
        est = bayes_estimate(self._chain(B, S))
        np.testing.assert_array_equal(est.B, B[0])

    def test_average_of_two(self):
        B = np.stack([np.zeros((2, 3)), 2 * np.ones((2, 3))])
        S = np.stack([np.eye(3), 3 * np.eye(3)])[:, None]
        est = bayes_estimate(self._chain(B, S))
        np.testing.assert_array_equal(est.B, np.ones((2, 3)))
        np.testing.assert_array_equal(est.Sigmas[0], 2 * np.eye(3))
        np.linalg.cholesky(est.Sigmas[0])

    def test_empty_chain(self):
        with pytest.raises(ValueError):
            bayes_estimate(self._chain(np.empty((0, 1, 1)), np.empty((0, 1, 1, 1))))

    def test_constant_chain_quantiles(self):
        chain = self._chain(np.full((5, 1, 1), 2.5), np.ones((5, 1, 1, 1)))
        qs = quantile_intervals(chain)
        np.testing.assert_array_equal(qs["B[0,0]"], [2.5, 2.5, 2.5])

    def test_linear_rule(self):
        B = np.arange(1.0, 101.0).reshape(100, 1, 1)
        chain = self._chain(B, np.ones((100, 1, 1, 1)))
        qs = quantile_intervals(chain, [0.5], row_names=["(intercept)"], trait_names=["wing"])
        assert qs["B[(intercept),wing]"][0] == 50.5

    def test_keys(self):
        chain = self._chain(np.zeros((3, 2, 2)), np.tile(np.eye(2), (3, 2, 1, 1)))
        keys = quantile_intervals(chain, class_names=["juv", "ad"], trait_names=["w", "n"]).keys()
        assert "Sigma[ad][w,n]" in keys and "Sigma[ad][n,w]" not in keys
        assert len(keys) == 4 + 2 * 3

    def test_bad_probs(self):
        chain = self._chain(np.zeros((3, 1, 1)), np.ones((3, 1, 1, 1)))
        with pytest.raises(ValueError):
            quantile_intervals(chain, [0.0, 0.5])


class TestPersistence:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        chains = [PosteriorChain(rng.normal(size=(7, 2, 3)), rng.normal(size=(7, 2, 3, 3)),
                                 {"seed": i}) for i in range(3)]
        path = tmp_path / "c.fzc"
        save_chains(path, chains, {"note": "x"})
        loaded, meta = load_chains(path)
        assert meta == {"note": "x"}
        for a, b in zip(chains, loaded):
            assert a.B.tobytes() == b.B.tobytes()
            assert a.Sigmas.tobytes() == b.Sigmas.tobytes()
            assert a.config == b.config

    def test_layout(self, tmp_path):
        chain = PosteriorChain(np.ones((2, 1, 1)), np.full((2, 1, 1, 1), 3.0))
        path = tmp_path / "c.fzc"
        save_chains(path, [chain])
        data = path.read_bytes()
        assert data.startswith(b"FUZZYDA-CHAINS\n")
        tail = np.frombuffer(data[-32:], "<f8")
        np.testing.assert_array_equal(tail, [1.0, 1.0, 3.0, 3.0])

    def test_corrupt_files(self, tmp_path):
        path = tmp_path / "bad.fzc"
        path.write_bytes(b"not a chain")
        with pytest.raises(ValueError):
            load_chains(path)
        chain = PosteriorChain(np.ones((2, 1, 1)), np.ones((2, 1, 1, 1)))
        save_chains(path, [chain])
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ValueError, match="trailing"):
            load_chains(path)

    def test_mismatched_chains(self, tmp_path):
        a = PosteriorChain(np.ones((2, 1, 1)), np.ones((2, 1, 1, 1)))
        b = PosteriorChain(np.ones((2, 1, 2)), np.ones((2, 1, 2, 2)))
        with pytest.raises(ValueError):
            save_chains(tmp_path / "x", [a, b])
