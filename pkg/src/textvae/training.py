"""Stochastic-gradient training loop, Adam optimizer, pretraining protocol.

A run is fully determined by (seed, config, corpus): parameter init, batch
shuffling, latent noise and dropout masks all come from one seeded generator
consumed in a fixed order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autodiff import tape, zero_grads
from .corpus import CorpusSplit, batches
from .errors import ConfigError, TrainingError
from .model import VaeParams
from .objectives import elbo_step


@dataclass
class TrainConfig:
    """Every knob of the optimization; seed fully determines a run."""

    latent_dim: int = 32
    embed_dim: int = 64
    hidden_dim: int = 128
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    # None resolves to 10 epochs' worth of batches at train() time
    warmup_steps: int | None = None
    free_bits: float = 0.0
    # split the free-bits budget evenly and clamp each latent coordinate
    free_bits_per_dim: bool = False
    alpha: float = 0.0
    keep_prob: float = 0.7
    pretrain_epochs: int = 0
    clip_norm: float = 0.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        checks = [
            (self.latent_dim >= 1, "latent_dim must be >= 1"),
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
            (self.hidden_dim >= 1, "hidden_dim must be >= 1"),
            (self.lr >= 0, "lr must be >= 0"),
            (0 <= self.adam_beta1 < 1, "adam_beta1 must lie in [0, 1)"),
            (0 <= self.adam_beta2 < 1, "adam_beta2 must lie in [0, 1)"),
            (self.adam_eps > 0, "adam_eps must be positive"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.warmup_steps is None or self.warmup_steps >= 1, "warmup_steps must be >= 1"),
            (self.free_bits >= 0, "free_bits must be >= 0"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (0 <= self.keep_prob <= 1, "keep_prob must lie in [0, 1]"),
            (self.pretrain_epochs >= 0, "pretrain_epochs must be >= 0"),
            (self.clip_norm >= 0, "clip_norm must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared timestep."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    t = state.t
    for name, p in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((t.grad ** 2).sum()) for _, t in params))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for _, t in params:
            t.grad *= factor
    return total


@dataclass
class TrainResult:
    params: VaeParams          # best-validation checkpoint
    final_params: VaeParams
    log: list[dict]
    best_epoch: int


def _dev_elbo(dev_sentences, config: TrainConfig, params: VaeParams, seed, batch_size: int) -> float:
    """Single-sample negative ELBO on the dev split (beta=1, no dropout)."""
    if not dev_sentences:
        return float("nan")
    rng = np.random.default_rng(seed)
    eval_cfg = replace(config, alpha=0.0, keep_prob=1.0, free_bits=0.0)
    total, count = 0.0, 0
    for batch in batches(dev_sentences, batch_size, seed=None):
        lb = elbo_step(batch, eval_cfg, params, rng, beta_override=1.0)
        total += lb.total.item() * batch.size
        count += batch.size
    return total / count


def train(corpus: CorpusSplit, config: TrainConfig, vocab_size: int,
          init_params: VaeParams | None = None, phase: str = "train",
          rng: np.random.Generator | None = None) -> TrainResult:
    """Optimize the surrogate objective by mini-batch Adam.

    ``phase="pretrain"`` runs the deterministic-autoencoder variant: z = mu,
    beta forced to 0, no fraternal term, no word dropout.
    """
    config.validate()
    if not corpus.train:
        raise ConfigError("training corpus is empty")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if init_params is None:
        params = VaeParams.init(vocab_size, config.embed_dim, config.hidden_dim,
                                config.latent_dim, rng)
    else:
        params = init_params

    n_batches = (len(corpus.train) + config.batch_size - 1) // config.batch_size
    if config.warmup_steps is None:
        config = replace(config, warmup_steps=max(1, 10 * n_batches))

    pretrain = phase == "pretrain"
    named = params.named_parameters()
    state = AdamState()
    log: list[dict] = []
    best = params.clone()
    best_val, best_epoch = float("inf"), -1
    step = 0
    t0 = time.perf_counter()

    for epoch in range(config.epochs):
        sums = {k: 0.0 for k in ("reconstruction", "kl_raw", "kl_effective",
                                 "beta", "fraternal_penalty", "total")}
        seen = 0
        for batch in batches(corpus.train, config.batch_size, seed=config.seed, epoch=epoch):
            zero_grads(named)
            with tape() as t:
                lb = elbo_step(batch, config, params, rng, step=step,
                               beta_override=0.0 if pretrain else None,
                               deterministic_z=pretrain)
                t.backward(lb.total)
            scalars = lb.scalars()
            if not np.isfinite(scalars["total"]):
                raise TrainingError(
                    f"training diverged at epoch {epoch}, step {step}: loss {scalars['total']}",
                    params=best, log=log)
            if config.clip_norm > 0:
                clip_gradients(named, config.clip_norm)
            adam_step(named, {n: t.grad for n, t in named}, state, config.lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            for k in sums:
                sums[k] += scalars[k] * batch.size
            seen += batch.size
            step += 1

        record = {k: sums[k] / seen for k in sums}
        record["epoch"] = epoch
        record["phase"] = phase
        record["val_elbo"] = _dev_elbo(corpus.dev, config, params,
                                       seed=[config.seed, 1000 + epoch],
                                       batch_size=config.batch_size)
        record["wall_time"] = time.perf_counter() - t0
        log.append(record)

        val = record["val_elbo"] if np.isfinite(record["val_elbo"]) else record["total"]
        if val < best_val:
            best_val, best_epoch = val, epoch
            best = params.clone()

    if config.epochs == 0:
        best, best_epoch = params.clone(), 0
    return TrainResult(params=best, final_params=params, log=log, best_epoch=best_epoch)


def pretrain_then_reset(corpus: CorpusSplit, config: TrainConfig, vocab_size: int,
                        rng: np.random.Generator | None = None):
    """Deterministic-autoencoder pretraining, then a fresh decoder.

    Phase 1 trains with z = mu, beta = 0, no fraternal term and no word
    dropout; afterwards every decoder-side parameter (embeddings included)
    is redrawn while the encoder is kept bitwise intact.  Returns
    (params, log) ready for the standard loop.
    """
    config.validate()
    if config.pretrain_epochs < 1:
        params = VaeParams.init(vocab_size, config.embed_dim, config.hidden_dim,
                                config.latent_dim, rng or np.random.default_rng(config.seed))
        return params, []
    if rng is None:
        rng = np.random.default_rng(config.seed)
    phase_cfg = replace(config, epochs=config.pretrain_epochs, alpha=0.0,
                        keep_prob=1.0, free_bits=0.0)
    result = train(corpus, phase_cfg, vocab_size, phase="pretrain", rng=rng)
    params = result.final_params
    params.reset_decoder(rng)
    log = result.log + [{"phase": "reset", "epoch": config.pretrain_epochs,
                         "note": "decoder parameters redrawn; encoder kept"}]
    return params, log
