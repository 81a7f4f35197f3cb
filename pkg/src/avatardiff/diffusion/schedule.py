"""Noise schedule and the forward (noising) process.

The convention throughout is x_t = alpha[t] * x_0 + sqrt(1 - alpha[t]^2) * eps
with alpha the signal rate: alpha[0] = 1 (clean) and alpha[T] near zero.
"""

from dataclasses import dataclass

import numpy as np

BETA_MIN = 1e-4
BETA_MAX = 0.02
REFERENCE_T = 1000
DEFAULT_T = 200


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray   # length T+1 signal rates, alpha[0] == 1
    beta: np.ndarray    # length T per-step variances, beta[i] belongs to step i+1

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if alpha.shape != (self.T + 1,) or beta.shape != (self.T,):
            raise ValueError("schedule arrays do not match T")
        if alpha[0] != 1.0:
            raise ValueError("alpha[0] must be exactly 1")
        if not ((alpha > 0) & (alpha <= 1)).all():
            raise ValueError("signal rates must lie in (0, 1]")
        if not (np.diff(alpha) < 0).all():
            raise ValueError("signal rates must be strictly decreasing")
        if alpha[-1] > 0.05:
            raise ValueError(
                f"alpha[T] = {alpha[-1]:.4f} > 0.05: the chain does not end "
                f"near pure noise (T too small?)")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def noise_scale(self) -> np.ndarray:
        """sqrt(1 - alpha^2), the standard deviation of the noise component."""
        return np.sqrt(1.0 - self.alpha * self.alpha)


def make_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    """Linear variance schedule rescaled so its strength matches the
    reference step count: at T steps, each beta is scaled by REFERENCE_T / T,
    which keeps the total amount of added noise (and so alpha[T]) roughly
    independent of T. Capped below 1 for very coarse schedules."""
    if T < 2:
        raise ValueError("schedule needs at least 2 steps")
    beta = np.linspace(BETA_MIN, BETA_MAX, T) * (REFERENCE_T / T)
    beta = np.minimum(beta, 0.999)
    alpha = np.concatenate([[1.0], np.sqrt(np.cumprod(1.0 - beta))])
    return NoiseSchedule(T=T, alpha=alpha, beta=beta)


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray,
                    sched: NoiseSchedule) -> np.ndarray:
    """Noised sample x_t from a clean model-space array x0 and noise eps."""
    if not 0 <= t <= sched.T:
        raise IndexError(f"timestep {t} outside 0..{sched.T}")
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    a = x0.dtype.type(sched.alpha[t])
    s = x0.dtype.type(np.sqrt(1.0 - sched.alpha[t] ** 2))
    return a * x0 + s * eps
