"""Diffusion coefficient schedule and the scalars derived from it.

Every quantity the attack engine, the projection module and the runtime
verifiers need is a function of one decreasing sequence alpha_0..alpha_T in
(0, 1] with alpha_0 = 1:

* nsr_t   = sqrt(1 - alpha_t) / sqrt(alpha_t), the per-step noise-to-signal
  ratio (strictly increasing in t),
* lambda_t = nsr_t - nsr_{t-1} > 0, the weight with which the step-t noise
  modification reaches the endpoint of the trajectory,
* sum(lambda_1..lambda_T) = nsr_T exactly (telescoping),
* rho = xi_internal / nsr_T, the noise-space l-inf radius that makes an
  image-space budget of xi_internal exact at the endpoint
  (rho * sum(lambda_t) = xi_internal).

Schedule arithmetic is always float64, independent of the attack's working
precision: the certified bounds are only as tight as these scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True)
class Schedule:
    """Coefficient sequence alpha_0..alpha_T plus derived per-step scalars.

    Arrays are length T+1 and indexed by step t; ``lam[0]`` is 0 and unused
    (lambda is defined for t = 1..T). Immutable after construction, safe to
    share across concurrent attack workers.
    """

    T: int
    beta_min: float
    beta_max: float
    alpha: np.ndarray        # (T+1,) float64, alpha[0] == 1, strictly decreasing
    nsr: np.ndarray = field(init=False)   # sqrt((1-alpha)/alpha)
    lam: np.ndarray = field(init=False)   # lam[t] = nsr[t] - nsr[t-1]

    def __post_init__(self):
        nsr = np.sqrt(1.0 - self.alpha) / np.sqrt(self.alpha)
        lam = np.empty_like(nsr)
        lam[0] = 0.0
        lam[1:] = np.diff(nsr)
        object.__setattr__(self, "nsr", nsr)
        object.__setattr__(self, "lam", lam)

    @property
    def alpha_T(self) -> float:
        return float(self.alpha[self.T])

    @property
    def lambda_total(self) -> float:
        """sum(lambda_t) == nsr_T up to roundoff (telescoping identity)."""
        return float(self.nsr[self.T])

    def summary(self) -> dict:
        """The run-report serialization of this schedule."""
        return {
            "T": self.T,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "alpha_T": self.alpha_T,
        }


@dataclass(frozen=True)
class ConstraintRadius:
    """Noise-space l-inf projection radius induced by an image-space budget."""

    rho: float
    xi_internal: float


def make_schedule(T: int, beta_min: float = DEFAULT_BETA_MIN,
                  beta_max: float = DEFAULT_BETA_MAX) -> Schedule:
    """Build the linear-beta schedule: beta_t interpolated from beta_min to
    beta_max over t = 1..T, alpha_t = prod_{s<=t}(1 - beta_s), alpha_0 = 1.

    The beta endpoints are not rescaled with T; the same endpoints are
    interpolated over however many steps T provides.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = np.empty(T + 1, dtype=np.float64)
    alpha[0] = 1.0
    np.cumprod(1.0 - betas, out=alpha[1:])
    return Schedule(T=int(T), beta_min=float(beta_min), beta_max=float(beta_max),
                    alpha=alpha)


def constraint_radius(s: Schedule, xi_internal: float) -> ConstraintRadius:
    """rho = sqrt(alpha_T)/sqrt(1-alpha_T) * xi_internal (zero iff xi is zero)."""
    if xi_internal < 0:
        raise ValueError(f"xi_internal must be nonnegative, got {xi_internal}")
    rho = float(np.sqrt(s.alpha[s.T]) / np.sqrt(1.0 - s.alpha[s.T]) * xi_internal)
    return ConstraintRadius(rho=rho, xi_internal=float(xi_internal))
