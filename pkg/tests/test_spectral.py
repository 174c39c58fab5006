import numpy as np
import pytest

from backend.src.errors import ConfigError, DegenerateMatrixError, DimensionError
from backend.src.processing.spectral import (
    POLISH_STEPS,
    POLISH_TOL,
    PowerIterState,
    lipschitz_bounds,
    normalize_spectral,
    power_iteration,
    spectral_norm_oracle,
)
from backend.src.seeding import make_rng

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0


def _state_for(W, seed=0):
    return PowerIterState.initial(W.shape[0], W.shape[1], make_rng(seed, "init"))


def _converged_sigma(W, seed=0):
    W = np.asarray(W, dtype=np.float64)
    return power_iteration(W, _state_for(W, seed), steps=POLISH_STEPS, tol=POLISH_TOL).sigma_estimate


class TestPowerIteration:
    @pytest.mark.parametrize(
        "W, expected, tol",
        [
            (np.eye(3), 1.0, 1e-9),
            (np.diag([3.0, 1.0]), 3.0, 1e-9),
            ([[1.0, 1.0], [0.0, 1.0]], GOLDEN_RATIO, 1e-6),
        ],
    )
    def test_known_spectral_norms(self, W, expected, tol):
        assert _converged_sigma(W) == pytest.approx(expected, abs=tol)

    def test_returns_new_state_and_leaves_input_alone(self):
        W = np.diag([3.0, 1.0])
        state = _state_for(W)
        u_before = state.u.copy()
        updated = power_iteration(W, state, steps=1)
        np.testing.assert_array_equal(state.u, u_before)
        assert state.sigma_estimate == 0.0
        assert updated is not state
        assert np.linalg.norm(updated.u) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(updated.v) == pytest.approx(1.0, abs=1e-12)

    def test_warm_start_continues_toward_the_top_singular_value(self):
        W = make_rng(3, "noise").uniform(-1, 1, size=(6, 4))
        state = _state_for(W)
        errors = []
        for _ in range(5):
            state = power_iteration(W, state, steps=1)
            errors.append(abs(state.sigma_estimate - spectral_norm_oracle(W)))
        assert errors[-1] <= errors[0]

    def test_zero_matrix_is_degenerate(self):
        with pytest.raises(DegenerateMatrixError, match="degenerate weight matrix"):
            power_iteration(np.zeros((3, 3)), _state_for(np.zeros((3, 3))))

    def test_dimension_mismatch(self):
        state = _state_for(np.ones((3, 2)))
        with pytest.raises(DimensionError):
            power_iteration(np.ones((2, 3)), state)

    @pytest.mark.parametrize("steps, tol", [(0, 1e-10), (1, 0.0), (1, -1.0)])
    def test_rejects_bad_iteration_parameters(self, steps, tol):
        W = np.eye(2)
        with pytest.raises(ConfigError):
            power_iteration(W, _state_for(W), steps=steps, tol=tol)

    def test_state_requires_unit_vectors(self):
        with pytest.raises(ConfigError, match="unit norm"):
            PowerIterState(u=np.array([2.0, 0.0]), v=np.array([1.0]))

    def test_non_finite_weights_rejected(self):
        W = np.array([[1.0, np.nan], [0.0, 1.0]])
        with pytest.raises(ConfigError, match="NaN or Inf"):
            power_iteration(W, _state_for(np.eye(2)))


class TestOracle:
    @pytest.mark.parametrize(
        "W, expected, tol",
        [
            (np.eye(5), 1.0, 1e-12),
            (np.diag([3.0, 1.0]), 3.0, 1e-12),
            ([[1.0, 1.0], [0.0, 1.0]], 1.6180339887, 1e-10),
        ],
    )
    def test_known_values(self, W, expected, tol):
        assert spectral_norm_oracle(W) == pytest.approx(expected, abs=tol)

    def test_matches_numpy_svd(self):
        W = make_rng(11, "noise").standard_normal((7, 5))
        assert spectral_norm_oracle(W) == pytest.approx(np.linalg.svd(W, compute_uv=False)[0], rel=1e-12)

    @pytest.mark.parametrize("c", [-3.5, 0.25, 7.0])
    def test_homogeneity(self, c):
        W = make_rng(5, "noise").uniform(-1, 1, size=(6, 9))
        assert spectral_norm_oracle(c * W) == pytest.approx(abs(c) * spectral_norm_oracle(W), abs=1e-9)

    @pytest.mark.slow
    def test_power_iteration_agrees_on_random_matrices(self):
        rng = make_rng(2024, "noise")
        for trial in range(200):
            rows, cols = rng.integers(1, 65, size=2)
            W = rng.uniform(-1, 1, size=(rows, cols))
            estimate = _converged_sigma(W, seed=trial)
            assert abs(estimate - spectral_norm_oracle(W)) < 1e-6, (trial, rows, cols)


class TestNormalize:
    def test_entrywise_division(self):
        np.testing.assert_allclose(normalize_spectral(np.diag([3.0, 1.0]), 3.0), np.diag([1.0, 1.0 / 3.0]))

    def test_identity_is_a_fixed_point(self):
        np.testing.assert_array_equal(normalize_spectral(np.eye(4), 1.0), np.eye(4))

    def test_unit_spectral_norm_after_normalization(self):
        rng = make_rng(17, "noise")
        for _ in range(20):
            W = rng.standard_normal((rng.integers(1, 12), rng.integers(1, 12)))
            result = normalize_spectral(W, spectral_norm_oracle(W))
            assert spectral_norm_oracle(result) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("sigma", [0.0, -1.0, np.nan, np.inf])
    def test_rejects_invalid_sigma(self, sigma):
        with pytest.raises(ConfigError):
            normalize_spectral(np.eye(2), sigma)

    def test_tiny_sigma_is_degenerate(self):
        with pytest.raises(DegenerateMatrixError):
            normalize_spectral(np.eye(2), 1e-13)


class TestLipschitzBounds:
    @pytest.mark.parametrize(
        "alpha, depth, lower, upper",
        [(0.5, 3, 0.25, 2.25), (1.0, 4, 0.0, 8.0), (0.3, 1, 1.0, 1.0), (1.0, 1, 1.0, 1.0)],
    )
    def test_known_values(self, alpha, depth, lower, upper):
        bounds = lipschitz_bounds(alpha, depth)
        assert bounds.lower == pytest.approx(lower, abs=1e-15)
        assert bounds.upper == pytest.approx(upper, abs=1e-15)
        assert bounds.lower <= 1.0 <= bounds.upper

    def test_monotone_in_alpha(self):
        alphas = np.linspace(0.05, 1.0, 20)
        bounds = [lipschitz_bounds(a, 4) for a in alphas]
        lowers = [b.lower for b in bounds]
        uppers = [b.upper for b in bounds]
        assert all(x > y for x, y in zip(lowers, lowers[1:]))
        assert all(x < y for x, y in zip(uppers, uppers[1:]))

    @pytest.mark.parametrize("alpha", [0.0, -0.1, 1.5])
    def test_alpha_outside_unit_interval(self, alpha):
        with pytest.raises(ConfigError):
            lipschitz_bounds(alpha, 3)

    def test_depth_must_be_positive(self):
        with pytest.raises(ConfigError):
            lipschitz_bounds(0.5, 0)
