"""Procurement stage: train the generative source classifier on positives plus composite negatives."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from sourcefree.errors import ConfigurationError, DataError, TrainingDivergedError
from sourcefree.models import ProcurementModel

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-4
LOSS_NAMES = ("ce", "v", "u", "p")


@dataclass
class ProcurementConfig:
    alpha: float = 0.2
    learning_rate: float = 1e-4
    max_iter: int = 2000
    update_iter: int = 100
    batch_size: int = 32
    negative_ratio: float = 1.0  # negatives per positive in a batch
    prior_samples_per_class: int = 64
    pretrain_steps: int = 500
    pretrain_lr: float = 1e-4
    pretrain_backbone: bool = True
    prior_logits: str = "log_density"  # or "density" (softmax over raw densities)
    variance_floor: float = VARIANCE_FLOOR
    negative_mode: str = "composite"  # or "latent": prior-sampled u-space negatives, one negative class
    latent_min_distance: float = 3.0
    seed: int = 0

    def validate(self) -> "ProcurementConfig":
        if not 0 < self.alpha <= 1:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.update_iter < 1 or (self.max_iter > 0 and self.update_iter > self.max_iter):
            raise ConfigurationError("update_iter must satisfy 1 <= update_iter <= max_iter")
        if self.prior_logits not in ("log_density", "density"):
            raise ConfigurationError(f"prior_logits must be 'log_density' or 'density', got {self.prior_logits!r}")
        if self.negative_mode not in ("composite", "latent"):
            raise ConfigurationError(f"unknown negative_mode {self.negative_mode!r}")
        if self.learning_rate <= 0 or self.pretrain_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClassPrior:
    class_id: int
    mean: np.ndarray
    var: np.ndarray  # diagonal covariance


def compute_class_priors(features_by_class: Mapping[int, np.ndarray], floor: float = VARIANCE_FLOOR) -> list[ClassPrior]:
    """Per-class sample mean and unbiased per-dimension variance, floored at ``floor``."""
    priors = []
    for c in sorted(features_by_class):
        f = np.asarray(features_by_class[c], dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise DataError(f"class {c} needs at least 2 samples to estimate a prior, got {len(f)}")
        priors.append(ClassPrior(int(c), f.mean(axis=0), np.maximum(f.var(axis=0, ddof=1), floor)))
    return priors


def priors_from_arrays(features, labels, num_positive: int, floor: float = VARIANCE_FLOOR) -> list[ClassPrior]:
    features = np.asarray(features)
    labels = np.asarray(labels)
    return compute_class_priors({c: features[labels == c] for c in range(num_positive)}, floor)


def sample_prior(prior: ClassPrior, n: int, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if np.any(prior.var <= 0):
        raise ConfigurationError(f"prior for class {prior.class_id} has non-positive variance")
    return prior.mean + rng.standard_normal((n, prior.mean.size)) * np.sqrt(prior.var)


def stack_priors(priors: Sequence[ClassPrior], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    means = torch.as_tensor(np.stack([p.mean for p in priors]), dtype=dtype)
    var = torch.as_tensor(np.stack([p.var for p in priors]), dtype=dtype)
    return means, var


def gaussian_log_density(u: torch.Tensor, means: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """``log N(u_b | mean_c, diag(var_c))`` for every row ``b`` and class ``c``; shape (B, C)."""
    diff = u[:, None, :] - means[None, :, :]
    quad = (diff**2 / var[None]).sum(-1)
    logdet = torch.log(var).sum(-1)
    return -0.5 * (quad + logdet[None] + u.shape[1] * math.log(2 * math.pi))


def mahalanobis(u: np.ndarray, prior: ClassPrior) -> np.ndarray:
    return np.sqrt((((np.atleast_2d(u) - prior.mean) ** 2) / prior.var).sum(-1))


def sample_latent_negatives(priors: Sequence[ClassPrior], n: int, seed, min_distance: float = 3.0, max_rounds: int = 100) -> np.ndarray:
    """Draw u vectors at least ``min_distance`` (Mahalanobis) away from every positive prior.

    Proposals come from a broad Gaussian around the prior means, inflated until
    enough proposals clear the rejection test.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    means = np.stack([p.mean for p in priors])
    center = means.mean(0)
    spread = np.sqrt(np.stack([p.var for p in priors]).mean(0) + means.var(0))
    scale = 2.0
    kept: list[np.ndarray] = []
    total = 0
    for _ in range(max_rounds):
        cand = center + rng.standard_normal((4 * n, center.size)) * spread * scale
        ok = np.ones(len(cand), dtype=bool)
        for p in priors:
            ok &= mahalanobis(cand, p) >= min_distance
        kept.append(cand[ok])
        total += int(ok.sum())
        if total >= n:
            return np.concatenate(kept)[:n]
        scale *= 1.25
    raise DataError(f"could not draw {n} latent negatives {min_distance} sigma away from all priors")


def loss_ce(model, positive_batch, negative_batch=None, alpha: float = 0.2, negatives_are_latent: bool = False):
    x_s, y_s = positive_batch
    loss = F.cross_entropy(model(x_s), y_s)
    if negative_batch is not None and len(negative_batch[1]):
        x_n, y_n = negative_batch
        u_n = x_n if negatives_are_latent else model.embed(x_n)
        loss = loss + alpha * F.cross_entropy(model.D(u_n), y_n)
    return loss


def loss_v(model, x_s):
    v = model.M(x_s).detach()
    return (v - model.G(model.Fs(v))).abs().mean()


def loss_u(model, prior_samples):
    return (prior_samples - model.Fs(model.G(prior_samples))).abs().mean()


def loss_p(model, priors: Sequence[ClassPrior], positive_batch, prior_logits: str = "log_density"):
    x_s, y_s = positive_batch
    order = sorted(priors, key=lambda p: p.class_id)
    slot = {p.class_id: k for k, p in enumerate(order)}
    missing = set(y_s.tolist()) - set(slot)
    if missing:
        raise ConfigurationError(f"no prior for positive classes {sorted(missing)}")
    u_s = model.embed(x_s)
    means, var = stack_priors(order, dtype=u_s.dtype)
    scores = gaussian_log_density(u_s, means, var)
    if prior_logits == "density":
        scores = scores.exp()
    target = torch.as_tensor([slot[c] for c in y_s.tolist()], dtype=torch.long)
    return F.cross_entropy(scores, target)


def procurement_losses(
    model: ProcurementModel,
    priors: Sequence[ClassPrior],
    positive_batch: tuple[torch.Tensor, torch.Tensor],
    negative_batch: tuple[torch.Tensor, torch.Tensor] | None,
    prior_samples: torch.Tensor,
    alpha: float = 0.2,
    prior_logits: str = "log_density",
    negatives_are_latent: bool = False,
) -> dict[str, torch.Tensor]:
    """The four procurement losses on one batch.

    ``ce``: mean positive cross-entropy plus ``alpha`` times mean negative
    cross-entropy, softmax over all K outputs. ``v``: mean |v - G(Fs(v))|.
    ``u``: mean |u_r - Fs(G(u_r))| over prior samples. ``p``: cross-entropy of
    the class-conditional Gaussian scores of u_s against the true class.
    """
    return {
        "ce": loss_ce(model, positive_batch, negative_batch, alpha, negatives_are_latent),
        "v": loss_v(model, positive_batch[0]),
        "u": loss_u(model, prior_samples),
        "p": loss_p(model, priors, positive_batch, prior_logits),
    }


@torch.no_grad()
def embed(model: ProcurementModel, x: torch.Tensor, batch: int = 256) -> torch.Tensor:
    return torch.cat([model.embed(x[k : k + batch]) for k in range(0, len(x), batch)]) if len(x) else torch.empty(0)


@torch.no_grad()
def predict_logits(fn: Callable, x: torch.Tensor, batch: int = 256) -> torch.Tensor:
    return torch.cat([fn(x[k : k + batch]) for k in range(0, len(x), batch)])


def _check_finite(loss: torch.Tensor, step: int, name: str):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite {name} loss at step {step}", step=step, loss_name=name)


def _batch_indices(gen: torch.Generator, n: int, size: int) -> torch.Tensor:
    return torch.randint(n, (min(size, n) if n else 0,), generator=gen)


def pretrain(
    model: ProcurementModel,
    x: torch.Tensor,
    y: torch.Tensor,
    steps: int,
    learning_rate: float = 1e-4,
    batch_size: int = 32,
    seed: int = 0,
    train_backbone: bool = True,
    on_step: Callable[[int, str, float], None] | None = None,
) -> ProcurementModel:
    """Cross-entropy warm-up of (M,) Fs and D on positive samples over all K logits."""
    params = list(model.Fs.parameters()) + list(model.D.parameters())
    if train_backbone:
        params += list(model.M.parameters())
    if steps <= 0 or not params:
        return model
    opt = torch.optim.Adam(params, lr=learning_rate)
    gen = torch.Generator().manual_seed(seed)
    for step in range(steps):
        idx = _batch_indices(gen, len(x), batch_size)
        loss = F.cross_entropy(model(x[idx]), y[idx])
        _check_finite(loss, step, "pretrain")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if on_step:
            on_step(step, "pretrain", loss.item())
    return model


@dataclass
class ProcurementResult:
    model: ProcurementModel
    priors: list[ClassPrior]
    trace: list[dict]


def _set_backbone_trainable(model: ProcurementModel, flag: bool):
    for p in model.M.parameters():
        p.requires_grad_(flag)


def run_procurement(
    model: ProcurementModel,
    source: tuple[torch.Tensor, torch.Tensor],
    negatives: tuple[torch.Tensor, torch.Tensor] | None,
    config: ProcurementConfig,
    on_step: Callable[[int, str, float], None] | None = None,
) -> ProcurementResult:
    """Pretrain, estimate priors, then cycle the four losses with separate Adam states.

    In ``latent`` negative mode ``negatives`` is ignored; u-space negatives
    labelled with the single negative output are redrawn at each prior refresh.
    """
    config.validate()
    x_s, y_s = source
    num_positive = model.num_positive
    latent = config.negative_mode == "latent"
    if latent:
        if model.num_outputs != num_positive + 1:
            raise ConfigurationError("latent negative mode needs exactly one negative output")
    elif negatives is None or len(negatives[1]) == 0:
        raise ConfigurationError("composite negative mode needs a negative dataset")
    else:
        bad = (negatives[1] < num_positive) | (negatives[1] >= model.num_outputs)
        if bool(bad.any()):
            raise ConfigurationError("negative labels do not match the model's negative outputs")

    trace: list[dict] = []
    t0 = time.perf_counter()

    def record(step, name, value):
        trace.append({"step": step, "loss": name, "value": value, "wall": round(time.perf_counter() - t0, 4)})
        if on_step:
            on_step(step, name, value)

    pretrain(
        model, x_s, y_s, config.pretrain_steps, config.pretrain_lr, config.batch_size,
        seed=config.seed, train_backbone=config.pretrain_backbone, on_step=record,
    )
    _set_backbone_trainable(model, False)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    gen = torch.Generator().manual_seed(config.seed + 1)

    def refresh():
        feats = embed(model, x_s).double().numpy()
        priors = priors_from_arrays(feats, y_s.numpy(), num_positive, config.variance_floor)
        pool = np.concatenate([sample_prior(p, config.prior_samples_per_class, rng) for p in priors])
        latent_neg = None
        if latent:
            latent_neg = sample_latent_negatives(
                priors, config.prior_samples_per_class * num_positive, rng, config.latent_min_distance
            )
        return priors, torch.as_tensor(pool, dtype=torch.float32), latent_neg

    priors, pool, latent_neg = refresh()
    params = [p for m in (model.Fs, model.D, model.G) for p in m.parameters()]
    optimizers = {name: torch.optim.Adam(params, lr=config.learning_rate) for name in LOSS_NAMES}
    n_neg = max(1, int(round(config.batch_size * config.negative_ratio)))

    for it in range(config.max_iter):
        if it > 0 and it % config.update_iter == 0:
            priors, pool, latent_neg = refresh()
        name = LOSS_NAMES[it % len(LOSS_NAMES)]
        pos_idx = _batch_indices(gen, len(x_s), config.batch_size)
        if latent:
            neg_idx = _batch_indices(gen, len(latent_neg), n_neg)
            neg_batch = (
                torch.as_tensor(latent_neg[neg_idx.numpy()], dtype=torch.float32),
                torch.full((len(neg_idx),), num_positive, dtype=torch.long),
            )
        else:
            neg_idx = _batch_indices(gen, len(negatives[1]), n_neg)
            neg_batch = (negatives[0][neg_idx], negatives[1][neg_idx])
        if name == "ce":
            loss = loss_ce(model, (x_s[pos_idx], y_s[pos_idx]), neg_batch, config.alpha, latent)
        elif name == "v":
            loss = loss_v(model, x_s[pos_idx])
        elif name == "u":
            loss = loss_u(model, pool[_batch_indices(gen, len(pool), config.batch_size)])
        else:
            loss = loss_p(model, priors, (x_s[pos_idx], y_s[pos_idx]), config.prior_logits)
        _check_finite(loss, it, name)
        opt = optimizers[name]
        opt.zero_grad()
        loss.backward()
        opt.step()
        record(it, name, loss.item())

    priors, _, _ = refresh()
    log.info("procurement finished: %d iterations", config.max_iter)
    return ProcurementResult(model, priors, trace)
