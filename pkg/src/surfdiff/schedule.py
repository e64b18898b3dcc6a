"""DDPM forward/reverse kernels and DDIM sampling over observation arrays.

Everything here is a pure function of plain float arrays; randomness enters
only through explicitly passed noise.  Index convention: step t runs 1..T,
and tables carry a slot 0 so that alpha_bar[0] == 1 (which makes the t=1
posterior and the final DDIM step well defined).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables beta_t, alpha_t, alpha_bar_t, sigma_t for t in 1..T (index 0 padded)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray = field(repr=False)

    def check(self, t: int) -> None:
        if not (1 <= t <= self.T):
            raise ScheduleError(f"step {t} outside 1..{self.T}")


@dataclass
class ReverseTransition:
    mu: np.ndarray
    sigma_t: float


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"need at least 2 steps, got T={T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar[0] = 1.0
    # sigma_t^2 = beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
    sigma = np.zeros(T + 1)
    sigma[1:] = np.sqrt(
        (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    )
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def q_step(x_prev: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Single forward kernel draw: x_t | x_{t-1}."""
    sched.check(t)
    return np.sqrt(sched.alpha[t]) * x_prev + np.sqrt(sched.beta[t]) * eps


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal draw: x_t | x_0."""
    sched.check(t)
    if np.shape(eps) != np.shape(x0):
        raise ScheduleError(f"noise shape {np.shape(eps)} != x0 shape {np.shape(x0)}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def vlb_loss(x0: np.ndarray, x0_hat: np.ndarray, valid_mask: np.ndarray | None = None) -> float:
    """Mean squared error, optionally restricted by a pixel mask.

    The mask has the spatial shape of x0 (channels broadcast)."""
    if np.shape(x0) != np.shape(x0_hat):
        raise ScheduleError(f"shape mismatch {np.shape(x0)} vs {np.shape(x0_hat)}")
    d = np.square(np.asarray(x0_hat) - np.asarray(x0))
    if valid_mask is None:
        return float(d.mean())
    m = np.asarray(valid_mask, dtype=bool)
    if not m.any():
        raise ScheduleError("empty mask")
    return float(d[m].mean())


def posterior_mean(
    x0_hat: np.ndarray, xt: np.ndarray, t: int, sched: NoiseSchedule
) -> ReverseTransition:
    """DDPM posterior q(x_{t-1} | x_t, x0_hat) with the clean-sample parameterization."""
    sched.check(t)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    beta_t = sched.beta[t]
    alpha_t = sched.alpha[t]
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    return ReverseTransition(mu=c0 * x0_hat + ct * xt, sigma_t=float(sched.sigma[t]))


def ddim_step(
    xt: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    t_prev: int,
    eta: float,
    sched: NoiseSchedule,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One accelerated reverse step t -> t_prev; deterministic when eta=0."""
    sched.check(t)
    if not (0 <= t_prev < t):
        raise ScheduleError(f"need 0 <= t_prev < t, got {t_prev} >= {t}")
    if not (0.0 <= eta <= 1.0):
        raise ScheduleError(f"eta must be in [0,1], got {eta}")
    if t_prev == 0:
        return np.array(x0_hat, copy=True)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    eps_hat = (xt - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    sig = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - sig**2, 0.0)) * eps_hat
    if sig > 0:
        if noise is None:
            raise ScheduleError("eta > 0 requires an explicit noise draw")
        out = out + sig * noise
    return out


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """Uniform-stride decreasing step sequence, e.g. T=1000, n=100 -> [1000, 990, ..., 10].

    The implied transitions are (ts[0] -> ts[1], ..., ts[-1] -> 0), i.e.
    n_steps denoising updates ending at x0."""
    if not (1 <= n_steps <= T):
        raise ScheduleError(f"need 1 <= n_steps <= T, got {n_steps}")
    stride = T // n_steps
    ts = list(range(T, 0, -stride))[:n_steps]
    return ts
