"""Closed-form DDPM math: variance schedule, forward noising, loss and reverse step.

Steps are 1-based at every public entry point (``t`` in ``[1, T]``); the
schedule tensors are stored 0-based, so ``alpha_bars[t - 1]`` is the value for
step ``t``. All schedule coefficients live in float64 and are cast to the
dtype of the image tensor at the point of use.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import InvalidConfigError, InvalidInputError

__all__ = [
    "NoiseSchedule",
    "NoisedBatch",
    "build_linear_schedule",
    "q_sample",
    "simple_loss",
    "p_step",
    "ddpm_sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta / alpha / alpha-bar sequences of length ``T``."""

    betas: torch.Tensor
    alphas: torch.Tensor = field(init=False)
    alpha_bars: torch.Tensor = field(init=False)

    def __post_init__(self):
        betas = torch.as_tensor(self.betas, dtype=torch.float64).flatten().clone()
        if betas.numel() < 1:
            raise InvalidConfigError("schedule needs at least one step")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise InvalidConfigError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", torch.cumprod(alphas, dim=0))

    @property
    def T(self) -> int:
        return int(self.betas.numel())

    def params(self) -> dict:
        """JSON-friendly description (used in checkpoint manifests)."""
        return {
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
            "kind": "linear",
        }

    def check_steps(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.dtype.is_floating_point or t.dtype == torch.bool:
            raise InvalidInputError(f"steps must be integers, got dtype {t.dtype}")
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.T):
            raise InvalidInputError(f"steps must lie in [1, {self.T}], got range "
                                    f"[{int(t.min())}, {int(t.max())}]")
        return t.long()


@dataclass
class NoisedBatch:
    x_t: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                          beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` (inclusive)."""
    if not isinstance(T, int) or isinstance(T, bool) or T < 1:
        raise InvalidConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule(betas)


def _coef(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # gather per-sample coefficients and broadcast over the non-batch dims
    c = values[t - 1].to(like.dtype)
    return c.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> NoisedBatch:
    """Noise ``x0`` directly to step ``t``: sqrt(abar) * x0 + sqrt(1 - abar) * eps."""
    if x0.shape != eps.shape:
        raise InvalidInputError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    t = sched.check_steps(t)
    if t.dim() == 0:
        t = t.expand(x0.shape[0])
    if t.shape != (x0.shape[0],):
        raise InvalidInputError(f"need one step per sample, got shape {tuple(t.shape)}")
    abar = _coef(sched.alpha_bars, t, x0)
    x_t = abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps
    return NoisedBatch(x_t=x_t, eps=eps, t=t)


def simple_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_pred.shape != eps.shape:
        raise InvalidInputError(
            f"shape mismatch: {tuple(eps_pred.shape)} vs {tuple(eps.shape)}")
    return ((eps_pred - eps) ** 2).mean()


def p_step(x_t: torch.Tensor, t, eps_pred: torch.Tensor, sched: NoiseSchedule,
           rng_noise: torch.Tensor | None = None) -> torch.Tensor:
    """One ancestral reverse step with the variance fixed to ``beta_t``.

    ``rng_noise`` may be ``None`` (treated as zero). The injected noise is
    dropped for samples at ``t == 1`` so the final step returns the mean.
    """
    if x_t.shape != eps_pred.shape:
        raise InvalidInputError(
            f"shape mismatch: {tuple(x_t.shape)} vs {tuple(eps_pred.shape)}")
    t = sched.check_steps(t)
    if t.dim() == 0:
        t = t.expand(x_t.shape[0])
    beta = _coef(sched.betas, t, x_t)
    alpha = _coef(sched.alphas, t, x_t)
    abar = _coef(sched.alpha_bars, t, x_t)
    mean = (x_t - beta / (1.0 - abar).sqrt() * eps_pred) / alpha.sqrt()
    if rng_noise is None:
        return mean
    if rng_noise.shape != x_t.shape:
        raise InvalidInputError("rng_noise must match x_t in shape")
    keep = (t > 1).to(x_t.dtype).reshape_as(beta)
    return mean + keep * beta.sqrt() * rng_noise


@torch.no_grad()
def ddpm_sample(model, sched: NoiseSchedule, n: int, seed: int,
                clip: bool = True) -> torch.Tensor:
    """Run the full reverse chain from standard-normal ``x_T`` down to ``x_0``.

    ``model`` must expose ``config.in_channels`` / ``config.resolution`` and
    be callable as ``model(x_t, t)``. All noise comes from a private
    generator seeded with ``seed``, so the output is a pure function of
    (weights, schedule, n, seed).
    """
    if not isinstance(n, int) or n < 1:
        raise InvalidInputError(f"n must be a positive integer, got {n!r}")
    cfg = model.config
    shape = (n, cfg.in_channels, cfg.resolution, cfg.resolution)
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(int(seed))
    was_training = model.training
    model.eval()
    x = torch.randn(shape, generator=gen, dtype=dtype)
    for step in range(sched.T, 0, -1):
        t = torch.full((n,), step, dtype=torch.long)
        eps_pred = model(x, t)
        noise = torch.randn(shape, generator=gen, dtype=dtype)
        x = p_step(x, t, eps_pred, sched, noise)
    model.train(was_training)
    return x.clamp(-1.0, 1.0) if clip else x
