"""
Dense linear-algebra helpers for the spectral constraint.

Matrices and vectors are plain float64 NumPy arrays; the helpers here validate
them, estimate the largest singular value by power iteration, provide an exact
eigen-decomposition oracle, normalize weights and compute the residual-stack
Lipschitz envelope.
"""

import logging
from dataclasses import dataclass

import numpy as np

from backend.src.errors import ConfigError, DegenerateMatrixError, DimensionError

logger = logging.getLogger(__name__)

# === TUNING CONSTANTS ===
# Below this the layer is considered dead and cannot be normalized
DEGENERATE_SIGMA = 1e-12

# Power iteration used when a model is finalized before export
POLISH_STEPS = 500
POLISH_TOL = 1e-10

UNIT_NORM_TOL = 1e-9


# --- VALIDATION ---
def as_matrix(values, name="matrix"):
    """Return `values` as a finite 2-D float64 array."""
    W = np.asarray(values, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ConfigError(f"{name} contains NaN or Inf entries")
    return W


def as_vector(values, name="vector"):
    """Return `values` as a finite 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise DimensionError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ConfigError(f"{name} contains NaN or Inf entries")
    return v


def _unit(x):
    norm = np.linalg.norm(x)
    if norm < DEGENERATE_SIGMA:
        raise DegenerateMatrixError("degenerate weight matrix: power iteration collapsed to zero")
    return x / norm


# === POWER ITERATION ===
@dataclass(frozen=True, eq=False)
class PowerIterState:
    """
    Warm-startable estimate of the top singular triple of one weight matrix.

    `u` lives in the output space (rows of W), `v` in the input space.
    """

    u: np.ndarray
    v: np.ndarray
    sigma_estimate: float = 0.0

    def __post_init__(self):
        for name in ("u", "v"):
            vec = getattr(self, name)
            if abs(np.linalg.norm(vec) - 1.0) > UNIT_NORM_TOL:
                raise ConfigError(f"power iteration vector {name} must have unit norm")
        if self.sigma_estimate < 0:
            raise ConfigError("sigma_estimate must be nonnegative")

    @classmethod
    def initial(cls, rows, cols, rng):
        """Unit-normalized Gaussian start vectors drawn from the run's generator."""
        u = _unit(rng.standard_normal(rows))
        v = _unit(rng.standard_normal(cols))
        return cls(u=u, v=v, sigma_estimate=0.0)


def power_iteration(W, state, steps=1, tol=POLISH_TOL):
    """
    Refine `state` with at most `steps` rounds of v <- W^T u, u <- W v.

    Stops early once two successive sigma estimates differ by less than `tol`.
    Returns a new PowerIterState; the input state is left untouched.
    """
    W = as_matrix(W, "weight matrix")
    if steps < 1:
        raise ConfigError("power iteration needs at least one step")
    if tol <= 0:
        raise ConfigError("power iteration tolerance must be positive")
    if state.u.shape != (W.shape[0],) or state.v.shape != (W.shape[1],):
        raise DimensionError(
            f"power iteration state ({state.u.shape[0]}, {state.v.shape[0]}) "
            f"does not fit a {W.shape[0]}x{W.shape[1]} matrix"
        )
    if not np.any(W):
        raise DegenerateMatrixError("degenerate weight matrix: all entries are zero")

    u, v = state.u, state.v
    sigma_prev = state.sigma_estimate
    sigma = sigma_prev
    for _ in range(steps):
        v = _unit(W.T @ u)
        u = _unit(W @ v)
        sigma = float(u @ W @ v)
        if abs(sigma - sigma_prev) < tol:
            break
        sigma_prev = sigma

    if sigma < DEGENERATE_SIGMA:
        raise DegenerateMatrixError(f"degenerate weight matrix: sigma={sigma:.3e}")
    return PowerIterState(u=u, v=v, sigma_estimate=sigma)


def spectral_norm_oracle(W):
    """
    Exact largest singular value from the symmetric eigenvalues of W^T W.

    Independent of power iteration; used to check it.
    """
    W = as_matrix(W, "weight matrix")
    gram = W.T @ W
    top = float(np.linalg.eigvalsh(gram)[-1])
    return float(np.sqrt(max(top, 0.0)))


def normalize_spectral(W, sigma):
    """W / sigma, so that the result has spectral norm 1 when sigma is exact."""
    W = as_matrix(W, "weight matrix")
    if not np.isfinite(sigma) or sigma <= 0:
        raise ConfigError(f"sigma must be a positive finite number, got {sigma!r}")
    if sigma < DEGENERATE_SIGMA:
        raise DegenerateMatrixError(f"degenerate weight matrix: sigma={sigma:.3e}")
    return W / sigma


# === LIPSCHITZ ENVELOPE ===
@dataclass(frozen=True)
class LipschitzBounds:
    lower: float
    upper: float
    alpha: float
    depth_L: int


def lipschitz_bounds(alpha, depth_L):
    """
    Bi-Lipschitz envelope of a residual stack whose blocks are alpha-Lipschitz.

    (1 - alpha)^(L-1) * d <= ||h(x) - h(x')|| <= (1 + alpha)^(L-1) * d
    """
    if not (0 < alpha <= 1):
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha!r}")
    if int(depth_L) != depth_L or depth_L < 1:
        raise ConfigError(f"depth_L must be a positive integer, got {depth_L!r}")
    exponent = int(depth_L) - 1
    return LipschitzBounds(
        lower=(1.0 - alpha) ** exponent,
        upper=(1.0 + alpha) ** exponent,
        alpha=float(alpha),
        depth_L=int(depth_L),
    )
