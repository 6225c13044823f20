"""Preference objectives: discrete DPO, Gaussian continuous DPO and its kernel form.

Every loss is written as ``softplus(-margin)``, which equals
``-log(sigmoid(margin))`` without overflow.  Continuous losses broadcast over
leading batch axes of the ``(..., L, D)`` feature matrices.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .core import Rng, TokenSequence, frobenius_sq_dist, sample_var, sigmoid, softplus
from .kernels import KernelSpec, kernel_distance, kernel_distance_grad


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.2
    sigma_bar: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.sigma_bar > 0:
            raise ValueError("sigma_bar must be positive")

    @property
    def gamma(self) -> float:
        return self.beta / (2.0 * self.sigma_bar**2)


class DiscretePair(NamedTuple):
    prompt_encoding: np.ndarray
    chosen: TokenSequence
    rejected: TokenSequence


class ContinuousQuadruple(NamedTuple):
    """Policy output, reference output, chosen and rejected representations."""

    policy: np.ndarray
    reference: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray

    def checked(self) -> "ContinuousQuadruple":
        arrs = [np.asarray(x, dtype=np.float64) for x in self]
        if len({a.shape for a in arrs}) != 1:
            raise ValueError("quadruple members must share one shape")
        return ContinuousQuadruple(*arrs)


# -- discrete -------------------------------------------------------------------


def dpo_margins(beta, policy_chosen, ref_chosen, policy_rejected, ref_rejected):
    """beta * [(log pi(z_w) - log ref(z_w)) - (log pi(z_l) - log ref(z_l))]."""
    pc, rc, pr, rr = (np.asarray(x, dtype=np.float64) for x in (policy_chosen, ref_chosen, policy_rejected, ref_rejected))
    if not all(np.all(np.isfinite(x)) for x in (pc, rc, pr, rr)):
        raise ValueError("log-probabilities must be finite")
    return beta * ((pc - rc) - (pr - rr))


def dpo_loss_discrete(
    cfg: DpoConfig,
    batch: Sequence[DiscretePair],
    policy_logprob: Callable[[np.ndarray, TokenSequence], float],
    ref_logprob: Callable[[np.ndarray, TokenSequence], float],
) -> tuple[float, list[float]]:
    """Mean DPO loss over ``batch`` and the per-item sigmoid arguments."""
    if not batch:
        raise ValueError("empty preference batch")
    for item in batch:
        if item.chosen == item.rejected:
            raise ValueError("chosen and rejected sequences must differ")
    pc = [policy_logprob(it.prompt_encoding, it.chosen) for it in batch]
    pr = [policy_logprob(it.prompt_encoding, it.rejected) for it in batch]
    rc = [ref_logprob(it.prompt_encoding, it.chosen) for it in batch]
    rr = [ref_logprob(it.prompt_encoding, it.rejected) for it in batch]
    margins = dpo_margins(cfg.beta, pc, rc, pr, rr)
    return float(np.mean(softplus(-margins))), [float(m) for m in margins]


def dpo_logprob_weights(beta: float, margins) -> np.ndarray:
    """d(per-item loss)/d(log pi(z_w)); the rejected weight is its negative."""
    return -beta * sigmoid(-np.asarray(margins, dtype=np.float64))


# -- continuous -----------------------------------------------------------------


def gaussian_seq_loglik(cfg: DpoConfig, h, mu):
    """Isotropic Gaussian log-density of the feature sequence ``h`` around ``mu``."""
    h = np.asarray(h, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if h.shape != mu.shape:
        raise ValueError(f"shape mismatch: {h.shape} vs {mu.shape}")
    L, D = h.shape[-2:]
    var = cfg.sigma_bar**2
    return -frobenius_sq_dist(h, mu) / (2.0 * var) - L * (D / 2.0) * math.log(2.0 * math.pi * var)


def dpo_loss_gaussian(cfg: DpoConfig, quad: ContinuousQuadruple):
    """DPO with Gaussian likelihoods centred at the policy and reference outputs.

    Independent of :func:`cdpo_loss`; the two agree because the normalisers cancel.
    """
    H, Hr, Hw, Hl = quad.checked()
    margins = dpo_margins(
        cfg.beta,
        gaussian_seq_loglik(cfg, Hw, H),
        gaussian_seq_loglik(cfg, Hw, Hr),
        gaussian_seq_loglik(cfg, Hl, H),
        gaussian_seq_loglik(cfg, Hl, Hr),
    )
    return softplus(-margins)


def cdpo_margin(cfg: DpoConfig, quad: ContinuousQuadruple):
    H, Hr, Hw, Hl = quad.checked()
    coef = cfg.beta / (2.0 * cfg.sigma_bar**2)
    return coef * (
        -frobenius_sq_dist(H, Hw)
        + frobenius_sq_dist(Hr, Hw)
        + frobenius_sq_dist(H, Hl)
        - frobenius_sq_dist(Hr, Hl)
    )


def cdpo_loss(cfg: DpoConfig, quad: ContinuousQuadruple):
    return softplus(-cdpo_margin(cfg, quad))


def cdpo_grad(cfg: DpoConfig, quad: ContinuousQuadruple) -> np.ndarray:
    """d cdpo_loss / d policy output."""
    H, Hr, Hw, Hl = quad.checked()
    coef = cfg.beta / (2.0 * cfg.sigma_bar**2)
    m = cdpo_margin(cfg, quad)
    dm = coef * (-2.0 * (H - Hw) + 2.0 * (H - Hl))
    return (-sigmoid(-m))[..., None, None] * dm


def kcdpo_margin(spec: KernelSpec, quad: ContinuousQuadruple):
    H, Hr, Hw, Hl = quad.checked()
    return spec.gamma * (
        -kernel_distance(spec, H, Hw)
        + kernel_distance(spec, Hr, Hw)
        + kernel_distance(spec, H, Hl)
        - kernel_distance(spec, Hr, Hl)
    )


def kcdpo_loss(spec: KernelSpec, quad: ContinuousQuadruple):
    return softplus(-kcdpo_margin(spec, quad))


def kcdpo_grad(spec: KernelSpec, quad: ContinuousQuadruple) -> np.ndarray:
    """d kcdpo_loss / d policy output; reference, chosen and rejected are constants."""
    H, Hr, Hw, Hl = quad.checked()
    m = kcdpo_margin(spec, quad)
    dk_w, _ = kernel_distance_grad(spec, H, Hw)
    dk_l, _ = kernel_distance_grad(spec, H, Hl)
    dm = spec.gamma * (dk_l - dk_w)
    return (-sigmoid(-m))[..., None, None] * dm


def kcdpo_loss_and_grad(spec: KernelSpec, quad: ContinuousQuadruple):
    """Per-item losses and policy-output gradients in one pass (used by training)."""
    H, Hr, Hw, Hl = quad.checked()
    k_hw = kernel_distance(spec, H, Hw)
    k_hl = kernel_distance(spec, H, Hl)
    m = spec.gamma * (-k_hw + kernel_distance(spec, Hr, Hw) + k_hl - kernel_distance(spec, Hr, Hl))
    dk_w, _ = kernel_distance_grad(spec, H, Hw)
    dk_l, _ = kernel_distance_grad(spec, H, Hl)
    grad = (-sigmoid(-m))[..., None, None] * (spec.gamma * (dk_l - dk_w))
    return softplus(-m), grad


# -- MC dropout ---------------------------------------------------------------------


def mc_predictive_estimate(model, prompt_encoding, num_samples: int, rng: Rng):
    """Sample mean and pooled isotropic variance of ``num_samples`` dropout forwards."""
    if num_samples < 2:
        raise ValueError("need at least two Monte Carlo samples")
    from .models import sample_dropdiv

    samples = sample_dropdiv(model, prompt_encoding, num_samples, rng)
    # shifted by the first sample: identical passes return it exactly, with zero variance
    dev = samples - samples[0]
    mu = samples[0] + dev.mean(axis=0)
    var = float(np.mean(sample_var(samples, axis=0, ddof=1)))
    return mu, var


MAX_ENUMERATED_UNITS = 20


def enumerate_dropout_oracle(model, prompt_encoding):
    """Exact mean and pooled variance of the dropout predictive distribution.

    Sums over every keep/drop mask of the dropout units, weighted by its
    Bernoulli probability.
    """
    widths = model.dropout_widths()
    k = sum(widths)
    if k > MAX_ENUMERATED_UNITS:
        raise ValueError(f"{k} dropout units is too many to enumerate (max {MAX_ENUMERATED_UNITS})")
    p = model.dropout_rate
    enc = np.asarray(prompt_encoding, dtype=np.float64)[None, :]
    outputs, weights = [], []
    for bits in itertools.product((0, 1), repeat=k):
        kept = sum(bits)
        w = (1.0 - p) ** kept * p ** (k - kept)
        if w == 0.0:
            continue
        masks, pos = [], 0
        for width in widths:
            masks.append(np.asarray(bits[pos : pos + width], dtype=np.float64)[None, :])
            pos += width
        outputs.append(model.forward_with_masks(enc, masks)[0])
        weights.append(w)
    outs = np.stack(outputs)
    wts = np.asarray(weights)
    mean = np.tensordot(wts, outs, axes=1)
    var = float(np.mean(np.tensordot(wts, (outs - mean) ** 2, axes=1)))
    return mean, var
