"""Denoiser training loop: thin, regress, step.

Each step draws a minibatch of clean counts, draws per-sample times from
the noise schedule, corrupts by binomial thinning, and takes an Adam step
(beta = (0.9, 0.999), eps = 1e-8, weight decay added to the gradient,
global-norm clipping) on the weighted Bregman objective.  An exponential
moving average of the weights is maintained throughout and returned as the
inference model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from binflow.losses import NoiseSchedule, _precond_arrays, sample_noise_level, weight_synthetic
from binflow.network import MlpDenoiser

__all__ = ["TrainConfig", "TrainResult", "TrainingError", "train"]

LOSSES = ("quadratic", "entropic")
WEIGHT_FNS = ("inv_sqrt", "precond_w2", "constant")
RATE_FLOOR = 1e-10
ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss); message carries epoch and step."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    grad_clip_norm: float = 1.0
    ema_decay: float = 0.999
    loss: str = "quadratic"
    weight_fn: str = "inv_sqrt"
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    final_time: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        for name in ("learning_rate", "grad_clip_norm", "final_time"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.weight_fn not in WEIGHT_FNS:
            raise ValueError(f"weight_fn must be one of {WEIGHT_FNS}")
        if self.loss == "entropic" and self.weight_fn == "precond_w2":
            raise ValueError("entropic loss does not combine with precond_w2 weighting")


@dataclass
class TrainResult:
    model: MlpDenoiser          # EMA weights; use for inference
    raw_model: MlpDenoiser      # final optimizer weights
    history: list               # per-epoch (mean_loss, floor_events)

    def history_rows(self):
        return [(i, loss, floors) for i, (loss, floors) in enumerate(self.history)]


def _loss_and_grad(model, t, x_t, x_T, w, cfg, grad_buf):
    """Mean weighted Bregman loss over a batch plus its gradient; counts floors."""
    m, cache = model.forward(t, x_t, with_cache=True)
    batch = x_T.shape[0]
    floors = 0
    if cfg.loss == "quadratic":
        # plain squared error |x_T - m|^2 (twice the quadratic Bregman)
        diff = m - x_T
        loss = float(np.mean(w * np.sum(diff * diff, axis=1)))
        dm = (2.0 / batch) * w[:, None] * diff
    else:
        dt_rem = cfg.final_time - t
        a = (x_T - x_t) / dt_rem[:, None]
        b_raw = (m - x_t) / dt_rem[:, None]
        floored = b_raw < RATE_FLOOR
        floors = int(np.sum(floored))
        b = np.maximum(b_raw, RATE_FLOOR)
        alog = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
        div = np.sum(alog - a * np.log(b) - a + b, axis=1)
        loss = float(np.mean(w * div))
        db = np.where(floored, 0.0, 1.0 - a / b)
        dm = (1.0 / batch) * w[:, None] * db / dt_rem[:, None]
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss")
    return loss, model.backward(cache, dm, flat_out=grad_buf), floors


def _weights_for(cfg, model, t):
    if cfg.weight_fn == "inv_sqrt":
        return weight_synthetic(t)
    if cfg.weight_fn == "precond_w2":
        pc = model.precond
        if pc is None:
            raise ValueError("precond_w2 weighting needs a preconditioned model")
        _, _, _, w_sq = _precond_arrays(t, pc["mu_data"], pc["sigma2_data"], pc["eps_cin"])
        return w_sq
    return np.ones_like(t)


def _draw_times(cfg, rng, size):
    t, _sigma = sample_noise_level(cfg.noise, rng, size=size)
    # keep strictly inside [0, T) so thinning and rate denominators stay sane
    return np.minimum(t * cfg.final_time, cfg.final_time * (1.0 - 1e-12))


def train(model: MlpDenoiser, data, cfg: TrainConfig) -> TrainResult:
    """Run the training loop on clean count data.

    ``data`` is an integer array of shape (n,) or (n, d).  Returns the EMA
    model for inference, the raw final weights, and the per-epoch history
    of (mean loss, rate-floor events).  Deterministic given (weights seed,
    cfg.seed).
    """
    if cfg.loss == "entropic" and model.precond is not None:
        raise ValueError("entropic loss forbids the preconditioned parameterization "
                         "(its skip path emits negative rates)")
    data = np.asarray(data)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[1] != model.input_dim:
        raise ValueError(f"data has {data.shape[1]} coordinates, model expects {model.input_dim}")
    if np.any(data < 0):
        raise ValueError("training data must be non-negative counts")
    data = data.astype(np.int64)
    n = data.shape[0]
    if n < cfg.batch_size:
        raise ValueError("need at least one full batch of data")

    rng = np.random.default_rng(cfg.seed)
    theta = model.theta
    ema = theta.copy()
    adam_m = np.zeros_like(theta)
    adam_v = np.zeros_like(theta)
    grad = np.zeros_like(theta)
    buf = np.empty_like(theta)
    step = 0
    history = []
    steps_per_epoch = n // cfg.batch_size

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_floors = 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x_T = data[idx].astype(model.dtype)
            t = _draw_times(cfg, rng, cfg.batch_size)
            x_t = rng.binomial(data[idx], (t / cfg.final_time)[:, None]).astype(model.dtype)
            w = np.asarray(_weights_for(cfg, model, t), dtype=model.dtype)
            t = t.astype(model.dtype)
            try:
                loss, _, floors = _loss_and_grad(model, t, x_t, x_T, w, cfg, grad)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, step {b}") from None
            if cfg.weight_decay:
                grad += cfg.weight_decay * theta
            norm = float(np.sqrt(grad @ grad))
            if norm > cfg.grad_clip_norm:
                grad *= cfg.grad_clip_norm / norm
            step += 1
            # Adam with bias correction, all in place on the flat vectors
            adam_m *= ADAM_B1
            np.multiply(grad, 1.0 - ADAM_B1, out=buf)
            adam_m += buf
            adam_v *= ADAM_B2
            np.multiply(grad, grad, out=buf)
            buf *= 1.0 - ADAM_B2
            adam_v += buf
            np.divide(adam_v, 1.0 - ADAM_B2**step, out=buf)
            np.sqrt(buf, out=buf)
            buf += ADAM_EPS
            np.divide(adam_m, buf, out=buf)
            buf *= cfg.learning_rate / (1.0 - ADAM_B1**step)
            theta -= buf
            # EMA of the parameter vector
            ema *= cfg.ema_decay
            np.multiply(theta, 1.0 - cfg.ema_decay, out=buf)
            ema += buf
            epoch_loss += loss
            epoch_floors += floors
        history.append((epoch_loss / max(steps_per_epoch, 1), epoch_floors))

    return TrainResult(model=model.copy(params=ema), raw_model=model, history=history)
