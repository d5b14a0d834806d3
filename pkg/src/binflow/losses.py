"""Bregman divergences, time weights, noise parameterization, preconditioning.

The quadratic divergence carries the 1/2 of l(x) = |x|^2 / 2; the plain
squared-error objective used by the synthetic experiments is exactly twice
``bregman_quadratic``.  The entropic divergence (a log a - a log b - a + b)
is the one under which the likelihood identity is exact.

The preconditioning coefficients keep network inputs, regression targets
and the per-time loss at unit scale when the clean coordinates are i.i.d.
with mean ``mu_data`` and variance ``sigma2_data``:

    c_in(t)   = 1 / sqrt(mu t (1-t) + sigma^2 t^2 + eps_cin)
    s_in      = -mu / sqrt(sigma^2)
    c_skip(t) = sigma^2 / (mu (1-t) + sigma^2 t)
    c_out(t)  = sqrt(sigma^2 mu (1-t) / (mu (1-t) + sigma^2 t))
    w^2(t)    = 1 / (c_out(t)^2 + (mu - c_skip(t) mu t)^2 + eps_cin)

with time reported to the network as the noise level
sigma(t) = -log(t + eps_noise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EPS_CIN",
    "EPS_NOISE",
    "WEIGHT_TIME_CAP",
    "PrecondCoeffs",
    "NoiseSchedule",
    "bregman_quadratic",
    "bregman_entropic",
    "weight_synthetic",
    "sigma_of_t",
    "t_of_sigma",
    "sample_noise_level",
    "precond_coeffs",
    "baseline_affine",
]

EPS_CIN = 0.01
EPS_NOISE = 1e-5
WEIGHT_TIME_CAP = 1.0 - 1e-6


def bregman_quadratic(a, b) -> float:
    """(1/2) sum_i (a_i - b_i)^2."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(0.5 * np.sum((a - b) ** 2))


def bregman_entropic(a, b) -> float:
    """sum_i [a_i log a_i - a_i log b_i - a_i + b_i], with 0 log 0 = 0.

    Requires a >= 0 and b > 0; non-negative, zero iff a = b.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if np.any(a < 0):
        raise ValueError("first argument must be >= 0")
    if np.any(b <= 0):
        raise ValueError("second argument must be > 0")
    alog = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    return float(np.sum(alog - a * np.log(b) - a + b))


def weight_synthetic(t):
    """Time weight (1 - t)^{-1/2}, capped at t = 1 - 1e-6 (value 1000)."""
    t = np.asarray(t, dtype=float)
    capped = np.minimum(t, WEIGHT_TIME_CAP)
    out = (1.0 - capped) ** -0.5
    return float(out) if out.ndim == 0 else out


def sigma_of_t(t, eps_noise: float = EPS_NOISE):
    """Noise level sigma = -log(t + eps_noise) for t in [0, 1]."""
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > 1.0 + 1e-12):
        raise ValueError("t must lie in [0, 1]")
    out = -np.log(t + eps_noise)
    return float(out) if out.ndim == 0 else out


def t_of_sigma(sigma, eps_noise: float = EPS_NOISE):
    """Inverse map t = exp(-sigma) - eps_noise."""
    sigma = np.asarray(sigma, dtype=float)
    lo = -np.log1p(eps_noise)
    hi = -np.log(eps_noise)
    if np.any(sigma < lo - 1e-12) or np.any(sigma > hi + 1e-12):
        raise ValueError(f"sigma must lie in [{lo:.6g}, {hi:.6g}]")
    out = np.exp(-sigma) - eps_noise
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NoiseSchedule:
    """How training times are drawn: uniform in t, or Gaussian in sigma.

    In Gaussian mode the noise level is drawn from N(mu_sigma, gamma_sigma^2)
    restricted to [0, -log eps_noise] by rejection, then mapped to t.
    """

    mode: str = "uniform_time"
    mu_sigma: float = 2.0
    gamma_sigma: float = 1.0
    eps_noise: float = EPS_NOISE

    def __post_init__(self):
        if self.mode not in ("uniform_time", "gaussian_sigma"):
            raise ValueError(f"unknown noise schedule mode {self.mode!r}")
        if self.mode == "gaussian_sigma" and self.gamma_sigma <= 0:
            raise ValueError("gamma_sigma must be > 0 in gaussian_sigma mode")


def sample_noise_level(schedule: NoiseSchedule, rng, size=None):
    """Draw (t, sigma) pairs according to the schedule; deterministic per rng."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n = 1 if size is None else int(size)
    if schedule.mode == "uniform_time":
        t = rng.random(n)
        sigma = sigma_of_t(t, schedule.eps_noise)
    else:
        hi = -np.log(schedule.eps_noise)
        sigma = np.empty(n)
        pending = np.arange(n)
        while pending.size:
            draw = rng.normal(schedule.mu_sigma, schedule.gamma_sigma, pending.size)
            ok = (draw >= 0.0) & (draw <= hi)
            sigma[pending[ok]] = draw[ok]
            pending = pending[~ok]
        t = t_of_sigma(sigma, schedule.eps_noise)
    t = np.atleast_1d(t)
    sigma = np.atleast_1d(sigma)
    if size is None:
        return float(t[0]), float(sigma[0])
    return t, sigma


@dataclass(frozen=True)
class PrecondCoeffs:
    """Scaling coefficients at one time point, plus the data constants."""

    t: float
    c_in: float
    s_in: float
    c_skip: float
    c_out: float
    w_sq: float
    mu_data: float
    sigma2_data: float
    eps_cin: float = EPS_CIN
    eps_noise: float = EPS_NOISE


def _precond_arrays(t, mu_data, sigma2_data, eps_cin):
    t = np.asarray(t, dtype=float)
    var_xt = mu_data * t * (1.0 - t) + sigma2_data * t * t
    denom = mu_data * (1.0 - t) + sigma2_data * t
    c_in = 1.0 / np.sqrt(var_xt + eps_cin)
    c_skip = sigma2_data / denom
    c_out = np.sqrt(sigma2_data * mu_data * (1.0 - t) / denom)
    w_sq = 1.0 / (c_out**2 + (mu_data - c_skip * mu_data * t) ** 2 + eps_cin)
    return c_in, c_skip, c_out, w_sq


def precond_coeffs(
    t: float,
    mu_data: float,
    sigma2_data: float,
    eps_cin: float = EPS_CIN,
    eps_noise: float = EPS_NOISE,
) -> PrecondCoeffs:
    """All five scaling coefficients at time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if sigma2_data <= 0:
        raise ValueError("sigma2_data must be > 0")
    c_in, c_skip, c_out, w_sq = _precond_arrays(t, mu_data, sigma2_data, eps_cin)
    return PrecondCoeffs(
        t=float(t),
        c_in=float(c_in),
        s_in=float(-mu_data / np.sqrt(sigma2_data)),
        c_skip=float(c_skip),
        c_out=float(c_out),
        w_sq=float(w_sq),
        mu_data=float(mu_data),
        sigma2_data=float(sigma2_data),
        eps_cin=float(eps_cin),
        eps_noise=float(eps_noise),
    )


def baseline_affine(t: float, mu_data: float, sigma2_data: float) -> tuple[float, float]:
    """Coefficients of the best affine predictor b_skip * X_t + b_out * mu.

    b_skip coincides with c_skip and b_out = 1 - t * b_skip; this affine
    baseline minimizes the expected squared denoising error among maps of
    that form.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if sigma2_data <= 0:
        raise ValueError("sigma2_data must be > 0")
    b_skip = sigma2_data / (mu_data * (1.0 - t) + sigma2_data * t)
    return float(b_skip), float(1.0 - t * b_skip)
