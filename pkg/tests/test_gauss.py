import math

import numpy as np
import pytest
import scipy.optimize

from pmdag.gauss import (
    CovMatrix,
    GaussError,
    GaussianDist,
    NotPositiveDefinite,
    SingularQ,
    TooFewRows,
    err_bha,
    err_kl,
    grad_err_bha,
    grad_err_kl,
    kl_gaussian,
    load_cov_csv,
    log_err_bha,
    sample_covariance,
    save_cov_csv,
    spd_factor,
)


def random_spd(rng, n, ridge=0.3):
    a = rng.standard_normal((n + 2, n))
    return a.T @ a / (n + 2) + ridge * np.eye(n)


class TestCovMatrix:
    def test_rejects_asymmetry(self):
        with pytest.raises(GaussError, match="symmetric"):
            CovMatrix(("a", "b"), [[1.0, 0.5], [0.4, 1.0]])

    def test_rejects_negative_eigenvalue(self):
        with pytest.raises(NotPositiveDefinite):
            CovMatrix(("a", "b"), [[1.0, 2.0], [2.0, 1.0]])

    def test_rejects_shape_and_duplicate_labels(self):
        with pytest.raises(GaussError):
            CovMatrix(("a",), [[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(GaussError):
            CovMatrix(("a", "a"), np.eye(2))

    def test_restrict_reorders(self):
        cov = CovMatrix(("a", "b", "c"), np.diag([1.0, 2.0, 3.0]))
        sub = cov.restrict(("c", "a"))
        np.testing.assert_array_equal(sub.data, np.diag([3.0, 1.0]))

    def test_get(self):
        cov = CovMatrix(("a", "b"), [[2.0, 0.5], [0.5, 1.0]])
        assert cov.get("a", "b") == 0.5


class TestSampleCovariance:
    def test_two_point_example(self):
        cov = sample_covariance([[1.0, -1.0], [-1.0, 1.0]], ("X", "Y"))
        np.testing.assert_allclose(cov.data, [[1.0, -1.0], [-1.0, 1.0]])

    def test_constant_rows_zero(self):
        cov = sample_covariance([[3.0, 3.0]] * 4, ("X", "Y"))
        np.testing.assert_array_equal(cov.data, np.zeros((2, 2)))

    def test_too_few_rows(self):
        with pytest.raises(TooFewRows):
            sample_covariance([[1.0, 2.0]], ("X", "Y"))

    def test_monte_carlo_recovers_truth(self):
        rng = np.random.default_rng(0)
        truth = np.array([[2.0, 0.6], [0.6, 1.0]])
        chol = np.linalg.cholesky(truth)
        m = 1_000_000
        obs = rng.standard_normal((m, 2)) @ chol.T
        cov = sample_covariance(obs, ("X", "Y")).data
        # standard error of a covariance entry from Gaussian fourth moments
        se = np.sqrt((np.outer(np.diag(truth), np.diag(truth)) + truth ** 2) / m)
        assert np.all(np.abs(cov - truth) < 4 * se)


class TestKlGaussian:
    def test_equal_distributions(self):
        d = GaussianDist(np.zeros(2), CovMatrix(("a", "b"), np.eye(2)))
        assert kl_gaussian(d, d) == pytest.approx(0.0, abs=1e-14)

    def test_diagonal_example(self):
        p = GaussianDist(np.zeros(2), CovMatrix(("a", "b"), np.diag([2.0, 1.0])))
        q = GaussianDist(np.zeros(2), CovMatrix(("a", "b"), np.eye(2)))
        assert kl_gaussian(p, q) == pytest.approx(0.5 * (1.0 - math.log(2.0)))

    def test_mean_shift_only(self):
        p = GaussianDist(np.array([1.0, 0.0]), CovMatrix(("a", "b"), np.eye(2)))
        q = GaussianDist(np.zeros(2), CovMatrix(("a", "b"), np.eye(2)))
        assert kl_gaussian(p, q) == pytest.approx(0.5)

    def test_nonnegative_on_randoms(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 5))
            p = GaussianDist(rng.standard_normal(n), CovMatrix(range(n), random_spd(rng, n)))
            q = GaussianDist(rng.standard_normal(n), CovMatrix(range(n), random_spd(rng, n)))
            assert kl_gaussian(p, q) >= 0.0

    def test_singular_p_reports_infinity(self):
        p = GaussianDist(np.zeros(2), CovMatrix(("a", "b"), [[1.0, 1.0], [1.0, 1.0]]))
        q = GaussianDist(np.zeros(2), CovMatrix(("a", "b"), np.eye(2)))
        assert kl_gaussian(p, q) == math.inf

    def test_singular_q_raises(self):
        p = GaussianDist(np.zeros(2), CovMatrix(("a", "b"), np.eye(2)))
        q = GaussianDist(np.zeros(2), CovMatrix(("a", "b"), np.zeros((2, 2))))
        with pytest.raises(SingularQ):
            kl_gaussian(p, q)


class TestErrKl:
    def test_identity_pair(self):
        assert err_kl(np.eye(3), np.eye(3)) == pytest.approx(3.0)

    def test_diagonal_example(self):
        assert err_kl(np.diag([2.0, 1.0]), np.eye(2)) == pytest.approx(3.0 - math.log(2.0))

    def test_relation_to_kl(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(2, 5))
            sigma, target = random_spd(rng, n), random_spd(rng, n)
            lhs = err_kl(sigma, target) - err_kl(target, target)
            zero = np.zeros(n)
            kl = kl_gaussian(GaussianDist(zero, CovMatrix(range(n), sigma)),
                             GaussianDist(zero, CovMatrix(range(n), target)))
            assert lhs == pytest.approx(2.0 * kl, abs=1e-10)

    def test_minimized_at_target(self):
        rng = np.random.default_rng(3)
        target = random_spd(rng, 3)

        def objective(theta):
            lower = np.zeros((3, 3))
            lower[np.tril_indices(3)] = theta
            sigma = lower @ lower.T + 1e-12 * np.eye(3)
            return err_kl(sigma, target)

        x0 = np.linalg.cholesky(target + 0.5 * np.eye(3))[np.tril_indices(3)]
        res = scipy.optimize.minimize(objective, x0, method="Nelder-Mead",
                                      options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
        lower = np.zeros((3, 3))
        lower[np.tril_indices(3)] = res.x
        np.testing.assert_allclose(lower @ lower.T, target, atol=1e-6)

    def test_argmin_symmetric_between_directions(self):
        # minimizing KL in either direction lands on the target
        rng = np.random.default_rng(4)
        target = random_spd(rng, 3)
        tcov = CovMatrix(range(3), target)
        zero = np.zeros(3)

        def make_objective(direction):
            def objective(theta):
                lower = np.zeros((3, 3))
                lower[np.tril_indices(3)] = theta
                sigma = lower @ lower.T + 1e-10 * np.eye(3)
                model = CovMatrix(range(3), sigma)
                if direction == "model_target":
                    return kl_gaussian(GaussianDist(zero, model), GaussianDist(zero, tcov))
                return kl_gaussian(GaussianDist(zero, tcov), GaussianDist(zero, model))
            return objective

        x0 = np.linalg.cholesky(target + 0.3 * np.eye(3))[np.tril_indices(3)]
        for direction in ("model_target", "target_model"):
            res = scipy.optimize.minimize(make_objective(direction), x0, method="Nelder-Mead",
                                          options={"xatol": 1e-12, "fatol": 1e-14,
                                                   "maxiter": 40000, "maxfev": 40000})
            lower = np.zeros((3, 3))
            lower[np.tril_indices(3)] = res.x
            assert np.linalg.norm(lower @ lower.T - target) < 1e-6


def central_diff(f, sigma, h):
    grad = np.zeros_like(sigma)
    for i in range(sigma.shape[0]):
        for j in range(sigma.shape[1]):
            up = sigma.copy(); up[i, j] += h
            dn = sigma.copy(); dn[i, j] -= h
            grad[i, j] = (f(up) - f(dn)) / (2 * h)
    return grad


class TestGradients:
    def test_grad_err_kl_examples(self):
        np.testing.assert_allclose(grad_err_kl(np.eye(2), np.eye(2)), np.zeros((2, 2)), atol=1e-14)
        np.testing.assert_allclose(grad_err_kl(np.diag([2.0, 1.0]), np.eye(2)),
                                   np.diag([0.5, 0.0]), atol=1e-14)

    def test_grad_err_bha_zero_at_target(self):
        np.testing.assert_allclose(grad_err_bha(np.eye(2), np.eye(2)), np.zeros((2, 2)), atol=1e-14)

    @pytest.mark.parametrize("which", ["kl", "bha"])
    def test_matches_finite_differences(self, which):
        # independent oracle: explicit inverse/determinant formulas that stay
        # well-defined under single-entry (asymmetric) perturbations
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(2, 7))
            sigma, target = random_spd(rng, n), random_spd(rng, n)
            h = 1e-5 * float(np.abs(sigma).max())
            target_inv = np.linalg.inv(target)
            if which == "kl":
                analytic = grad_err_kl(sigma, target)

                def f(s):
                    return float((target_inv * s.T).sum()) - np.linalg.slogdet(s)[1]
            else:
                analytic = grad_err_bha(sigma, target)

                def f(s):
                    return (n * math.log(0.5) + np.linalg.slogdet(s + target)[1]
                            - 0.5 * np.linalg.slogdet(s)[1])
            fd = central_diff(f, sigma, h)
            rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
            worst = max(worst, float(rel.max()))
        assert worst < 1e-6


class TestErrBha:
    def test_identity_example(self):
        assert err_bha(np.eye(2), np.eye(2)) == pytest.approx(1.0)

    def test_log_form_consistent(self):
        rng = np.random.default_rng(6)
        sigma, target = random_spd(rng, 3), random_spd(rng, 3)
        assert math.log(err_bha(sigma, target)) == pytest.approx(log_err_bha(sigma, target))


class TestSpdFactor:
    def test_identity(self):
        lower, logdet = spd_factor(np.eye(3))
        np.testing.assert_array_equal(lower, np.eye(3))
        assert logdet == 0.0

    def test_hand_factorization(self):
        lower, logdet = spd_factor(np.array([[4.0, 2.0], [2.0, 2.0]]))
        np.testing.assert_allclose(lower, [[2.0, 0.0], [1.0, 1.0]])
        assert logdet == pytest.approx(math.log(4.0))

    def test_indefinite_rejected(self):
        with pytest.raises(NotPositiveDefinite):
            spd_factor(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_jitter_rescues_semidefinite(self):
        lower, _ = spd_factor(np.array([[1.0, 1.0], [1.0, 1.0]]))
        np.testing.assert_allclose(lower @ lower.T, [[1.0, 1.0], [1.0, 1.0]], atol=1e-5)


class TestCovCsv:
    def test_round_trip(self, tmp_path):
        cov = CovMatrix(("X", "Y"), [[2.0, 0.3], [0.3, 1.0]])
        path = tmp_path / "cov.csv"
        save_cov_csv(cov, path)
        again = load_cov_csv(path)
        assert again.labels == cov.labels
        np.testing.assert_array_equal(again.data, cov.data)

    def test_rejects_asymmetric_file(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("X,Y\n1.0,0.5\n0.4,1.0\n")
        with pytest.raises(GaussError, match="symmetric"):
            load_cov_csv(path)

    def test_rejects_wrong_shape(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("X,Y\n1.0,0.0\n")
        with pytest.raises(GaussError):
            load_cov_csv(path)
