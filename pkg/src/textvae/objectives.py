"""ELBO assembly: closed-form KL, annealing, free bits, fraternal twin pass.

All losses are built in minimization form: the training step minimizes

    reconstruction + beta * kl_effective + alpha * fraternal_penalty

where reconstruction is the negative (twin-mean) log-likelihood averaged
over the batch.  The twin pass feeds the SAME latent sample through two
decoders whose input embeddings are masked with complementary draws, so
making the hidden states agree forces the decoder to route information
through the latent variable rather than the words.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Batch, make_batch
from .errors import ConfigError
from .layers import sample_mask_pair
from .model import GaussianPosterior, LatentSample, VaeParams, decode_batch, encode_batch, reparameterize


@dataclass
class AnnealSchedule:
    """Linear KL warmup: beta(t) = min(t / warmup_steps, 1)."""

    warmup_steps: int
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ConfigError(f"unknown annealing kind {self.kind!r}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be positive, got {self.warmup_steps}")


def anneal_weight(step: int, schedule: AnnealSchedule) -> float:
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    return min(step / schedule.warmup_steps, 1.0)


def _kl_elementwise(mu: Tensor, logvar: Tensor) -> Tensor:
    # 0.5 * (mu^2 + exp(logvar) - 1 - logvar), per coordinate
    inner = ad.sub(ad.sub(ad.add(ad.mul(mu, mu), ad.exp(logvar)), 1.0), logvar)
    return ad.scale(inner, 0.5)


def kl_diag_gaussian(post: GaussianPosterior) -> tuple[Tensor, Tensor]:
    """KL(q || N(0, I)) for a single posterior: (total scalar, per-dimension vector)."""
    per_dim = _kl_elementwise(post.mu, post.logvar)
    return ad.reduce_sum(per_dim), per_dim


def kl_columns(post: GaussianPosterior) -> Tensor:
    """Per-sentence KL totals as a (1, B) row over a batched posterior."""
    return ad.column_sums(_kl_elementwise(post.mu, post.logvar))


def free_bits(kl_total: Tensor, lam: float) -> Tensor:
    """max(kl, lambda): below the threshold the term is constant (no gradient)."""
    if lam < 0:
        raise ConfigError(f"free-bits threshold must be >= 0, got {lam}")
    return ad.maximum_scalar(kl_total, lam)


def free_bits_per_dimension(post: GaussianPosterior, lam: float, latent_dim: int) -> Tensor:
    """Per-dimension variant: the lambda budget is split evenly across
    dimensions and each coordinate's KL is clamped separately.  (1, B) row."""
    if lam < 0:
        raise ConfigError(f"free-bits threshold must be >= 0, got {lam}")
    clamped = ad.maximum_scalar(_kl_elementwise(post.mu, post.logvar), lam / latent_dim)
    return ad.column_sums(clamped)


def _hidden_gap_penalty(steps_a, steps_b, lengths: np.ndarray, hidden_dim: int) -> Tensor:
    """Squared distance between twin hidden matrices, per-sentence normalized.

    ||H' - H''||^2 summed over valid positions, divided by n_steps * hidden
    dim so the useful range of alpha does not depend on sentence length.
    Returns a (1, B) row.
    """
    B = lengths.shape[0]
    acc = Tensor(np.zeros((1, B)))
    for (h_a, valid), (h_b, _) in zip(steps_a, steps_b):
        diff = ad.sub(h_a, h_b)
        per_sentence = ad.column_sums(ad.mul(diff, diff))
        acc = ad.add(acc, ad.mul(per_sentence, Tensor(valid[None, :])))
    recip = 1.0 / ((lengths + 1).astype(np.float64) * hidden_dim)
    return ad.mul(acc, Tensor(recip[None, :]))


def fraternal_batch(z: Tensor, batch: Batch, keep_prob: float, params: VaeParams,
                    rng: np.random.Generator, mask: np.ndarray | None = None):
    """Twin decode with complementary masks; returns (mean log-lik (1,B), penalty (1,B)).

    One mask pair is drawn per sentence per call; ``mask`` freezes the base
    draw (tests, gradient checks).
    """
    B, L = batch.ids.shape
    n_steps = L + 1
    if mask is None:
        mask = np.stack([sample_mask_pair(n_steps, keep_prob, rng).d for _ in range(B)])
    else:
        mask = np.asarray(mask, dtype=np.float64).reshape(B, n_steps)
    ll_a, steps_a = decode_batch(z, batch.ids, batch.lengths, params, mask=mask)
    ll_b, steps_b = decode_batch(z, batch.ids, batch.lengths, params, mask=1.0 - mask)
    mean_ll = ad.scale(ad.add(ll_a, ll_b), 0.5)
    penalty = _hidden_gap_penalty(steps_a, steps_b, batch.lengths, params.hidden_dim)
    return mean_ll, penalty


def fraternal_pass(x, z, b: float, alpha: float, rng: np.random.Generator,
                   params: VaeParams, mask: np.ndarray | None = None):
    """Single-sentence twin pass; shares one latent sample across both decodes."""
    if alpha < 0:
        raise ConfigError(f"fraternal alpha must be >= 0, got {alpha}")
    z = z.z if isinstance(z, LatentSample) else z
    batch = make_batch([tuple(int(i) for i in x)])
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64).reshape(1, -1)
    mean_ll, penalty = fraternal_batch(z, batch, b, params, rng, mask=mask)
    return ad.reduce_sum(mean_ll), ad.reduce_sum(penalty)


@dataclass
class LossBreakdown:
    """One optimization step's loss terms (batch means, minimization form)."""

    reconstruction: Tensor
    kl_raw: Tensor
    kl_effective: Tensor
    beta: float
    fraternal_penalty: Tensor
    total: Tensor

    def scalars(self) -> dict:
        return {
            "reconstruction": self.reconstruction.item(),
            "kl_raw": self.kl_raw.item(),
            "kl_effective": self.kl_effective.item(),
            "beta": self.beta,
            "fraternal_penalty": self.fraternal_penalty.item(),
            "total": self.total.item(),
        }


def elbo_step(x, config, params: VaeParams, rng: np.random.Generator, step: int = 0,
              eps: np.ndarray | None = None, mask: np.ndarray | None = None,
              beta_override: float | None = None, deterministic_z: bool = False) -> LossBreakdown:
    """One surrogate-objective evaluation over a sentence or batch.

    ``config`` needs alpha, keep_prob, free_bits, warmup_steps and latent_dim
    attributes (TrainConfig satisfies this).  One latent sample is drawn per
    sentence; ``eps``/``mask`` freeze the noise for gradient checks,
    ``deterministic_z`` uses z = mu (the pretraining autoencoder mode).
    """
    if config.alpha < 0:
        raise ConfigError(f"fraternal alpha must be >= 0, got {config.alpha}")
    if isinstance(x, Batch):
        batch = x
    elif x and isinstance(x[0], (int, np.integer)):
        batch = make_batch([x])
    else:
        batch = make_batch(x)
    B = batch.size

    post = encode_batch(batch.ids, batch.lengths, params)
    if deterministic_z:
        z = post.mu
    else:
        if eps is None:
            eps = rng.standard_normal((config.latent_dim, B))
        z = reparameterize(post, eps).z

    if config.alpha > 0:
        mean_ll, penalty_cols = fraternal_batch(z, batch, config.keep_prob, params, rng, mask=mask)
        penalty = ad.reduce_mean(penalty_cols)
    else:
        single_mask = mask
        if single_mask is None and config.keep_prob < 1.0:
            n_steps = batch.ids.shape[1] + 1
            single_mask = np.stack(
                [sample_mask_pair(n_steps, config.keep_prob, rng).d for _ in range(B)])
        mean_ll, _ = decode_batch(z, batch.ids, batch.lengths, params, mask=single_mask)
        penalty = Tensor(0.0)

    reconstruction = ad.negate(ad.reduce_mean(mean_ll))
    kl_cols = kl_columns(post)
    kl_raw = ad.reduce_mean(kl_cols)
    if config.free_bits > 0:
        if getattr(config, "free_bits_per_dim", False):
            kl_eff_cols = free_bits_per_dimension(post, config.free_bits, config.latent_dim)
        else:
            kl_eff_cols = free_bits(kl_cols, config.free_bits)
    else:
        kl_eff_cols = kl_cols
    kl_effective = ad.reduce_mean(kl_eff_cols)

    if beta_override is not None:
        beta = float(beta_override)
    else:
        if config.warmup_steps is None:
            raise ConfigError("warmup_steps is unresolved; train() resolves it, or pass beta_override")
        beta = anneal_weight(step, AnnealSchedule(config.warmup_steps))

    total = ad.add(reconstruction, ad.scale(kl_effective, beta))
    if config.alpha > 0:
        total = ad.add(total, ad.scale(penalty, config.alpha))
    return LossBreakdown(reconstruction=reconstruction, kl_raw=kl_raw,
                         kl_effective=kl_effective, beta=beta,
                         fraternal_penalty=penalty, total=total)
