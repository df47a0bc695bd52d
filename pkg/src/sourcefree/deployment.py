"""Deployment stage: adapt a copy of the feature extractor on unlabeled target data."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from sourcefree.errors import ConfigurationError, InvalidInputError, SourceFreeError, TrainingDivergedError
from sourcefree.models import ProcurementModel, module_checksum

log = logging.getLogger(__name__)

GROUP_MASS_FLOOR = 1e-12
_PROB_TOL = 1e-6


@dataclass
class SsmWeight:
    """Per-sample source-similarity weights; both lie in [1, e]."""

    w: torch.Tensor
    w_prime: torch.Tensor

    def detach(self) -> "SsmWeight":
        return SsmWeight(self.w.detach(), self.w_prime.detach())


def compute_ssm(y_hat, num_positive: int) -> SsmWeight:
    """``w = max_i exp(p_i)`` and ``w' = max_i exp(1 - p_i)`` over the positive classes.

    ``y_hat`` holds full-K softmax probabilities, one row per sample (a single
    vector is accepted too).
    """
    p = torch.as_tensor(y_hat)
    if not torch.is_floating_point(p):
        p = p.double()
    if p.min() < -_PROB_TOL or p.max() > 1 + _PROB_TOL:
        raise InvalidInputError("probabilities must lie in [0, 1]")
    pos = p[..., :num_positive].clamp(0.0, 1.0)
    w = torch.exp(pos.max(dim=-1).values)
    w_prime = torch.exp(1.0 - pos.min(dim=-1).values)
    return SsmWeight(w, w_prime)


def group_masses(z_hat: torch.Tensor, num_positive: int) -> tuple[torch.Tensor, torch.Tensor]:
    return z_hat[..., :num_positive].sum(-1), z_hat[..., num_positive:].sum(-1)


def loss_d1(z_hat: torch.Tensor, ssm: SsmWeight, num_positive: int, reduction: str = "mean") -> torch.Tensor:
    """SSM-weighted negative log group mass for positives and negatives."""
    pos, neg = group_masses(torch.as_tensor(z_hat), num_positive)
    per = ssm.w * -torch.log(pos.clamp_min(GROUP_MASS_FLOOR)) + ssm.w_prime * -torch.log(neg.clamp_min(GROUP_MASS_FLOOR))
    return per.mean() if reduction == "mean" else per


def split_softmax(h: torch.Tensor, num_positive: int) -> tuple[torch.Tensor, torch.Tensor]:
    h = torch.as_tensor(h)
    return F.softmax(h[..., :num_positive], dim=-1), F.softmax(h[..., num_positive:], dim=-1)


def entropy(p: torch.Tensor) -> torch.Tensor:
    # clamped log keeps 0 * log 0 = 0 in both value and gradient
    return -(p * torch.log(p.clamp_min(torch.finfo(p.dtype).tiny))).sum(-1)


def loss_d2(z_tilde_s: torch.Tensor, z_tilde_n: torch.Tensor, ssm: SsmWeight, reduction: str = "mean") -> torch.Tensor:
    per = ssm.w * entropy(z_tilde_s) + ssm.w_prime * entropy(z_tilde_n)
    return per.mean() if reduction == "mean" else per


class DeploymentModel(nn.Module):
    """Frozen M, Fs, D, G from procurement plus a trainable copy ``Ft`` of Fs."""

    def __init__(self, source: ProcurementModel, beta: float = 0.1):
        super().__init__()
        self.source = source
        self.num_positive = source.num_positive
        self.num_outputs = source.num_outputs
        self.beta = beta
        self.Ft = copy.deepcopy(source.Fs)
        for p in self.source.parameters():
            p.requires_grad_(False)
        for p in self.Ft.parameters():
            p.requires_grad_(True)

    @property
    def M(self):
        return self.source.M

    @property
    def D(self):
        return self.source.D

    def frozen_checksum(self) -> str:
        s = self.source
        return module_checksum(s.M, s.Fs, s.D, s.G)

    def source_probs(self, x) -> torch.Tensor:
        with torch.no_grad():
            return F.softmax(self.source(x), dim=-1)

    def forward(self, x):
        return self.D(self.Ft(self.M(x)))

    def embed(self, x):
        return self.Ft(self.M(x))


def adaptation_loss(model: DeploymentModel, x_t: torch.Tensor, ssm: SsmWeight | None = None) -> dict[str, torch.Tensor]:
    if ssm is None:
        ssm = compute_ssm(model.source_probs(x_t), model.num_positive)
    h = model(x_t)
    d1 = loss_d1(F.softmax(h, dim=-1), ssm, model.num_positive)
    zs, zn = split_softmax(h, model.num_positive)
    d2 = loss_d2(zs, zn, ssm)
    return {"d1": d1, "d2": d2, "d": d1 + model.beta * d2}


@dataclass
class AdaptationConfig:
    iterations: int = 500
    learning_rate: float = 1e-4
    beta: float = 0.1
    batch_size: int = 32
    cache_ssm: bool = False
    seed: int = 0

    def validate(self) -> "AdaptationConfig":
        if self.iterations < 0:
            raise ConfigurationError("iterations must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class FrozenParameterViolation(SourceFreeError):
    exit_code = 4
    kind = "frozen-violation"


@torch.no_grad()
@torch.no_grad()
def mean_confidence(model: DeploymentModel, x: torch.Tensor, batch: int = 256) -> float:
    probs = torch.cat([F.softmax(model(x[k : k + batch]), -1) for k in range(0, len(x), batch)])
    return float(probs.max(-1).values.mean())


def run_adaptation(
    model: DeploymentModel,
    target: torch.Tensor,
    config: AdaptationConfig,
    on_step: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """Train ``Ft`` on unlabeled target inputs; returns the per-iteration trace.

    ``target`` is a bare input tensor: the adapter never sees labels.
    """
    config.validate()
    model.beta = config.beta
    before = model.frozen_checksum()
    opt = torch.optim.Adam(model.Ft.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    cached = None
    if config.cache_ssm:
        cached = compute_ssm(torch.cat([model.source_probs(target[k : k + 256]) for k in range(0, len(target), 256)]), model.num_positive)
    trace = []
    t0 = time.perf_counter()
    for it in range(config.iterations):
        idx = torch.randint(len(target), (min(config.batch_size, len(target)),), generator=gen)
        ssm = SsmWeight(cached.w[idx], cached.w_prime[idx]) if cached is not None else None
        losses = adaptation_loss(model, target[idx], ssm)
        loss = losses["d"]
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite adaptation loss at step {it}", step=it, loss_name="d")
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": it, "wall": round(time.perf_counter() - t0, 4), **{k: v.item() for k, v in losses.items()}}
        trace.append(row)
        if on_step:
            on_step(it, row)
    after = model.frozen_checksum()
    if before != after:
        raise FrozenParameterViolation("frozen parameters changed during adaptation")
    log.info("adaptation finished: %d iterations, frozen: OK", config.iterations)
    return trace


def ssm_bounds() -> tuple[float, float]:
    return 1.0, math.e
