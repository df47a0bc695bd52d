"""Stage glue shared by the CLI and the in-memory experiment runner."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from sourcefree import checkpoint as ck
from sourcefree.compositor import build_negative_dataset
from sourcefree.config import ExperimentConfig
from sourcefree.data import group_by_class, to_tensor
from sourcefree.deployment import DeploymentModel, compute_ssm, mean_confidence, run_adaptation
from sourcefree.evaluation import MetricReport, PredictionRecord, evaluate, records_from_logits
from sourcefree.labels import LabelSpace, NegativeClassTable, build_negative_table
from sourcefree.models import build_model, module_checksum
from sourcefree.procurement import embed, predict_logits, run_procurement
from sourcefree.synthetic import render_domain

log = logging.getLogger(__name__)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Copy of ``cfg`` with every stage seed set to ``seed``."""
    return dataclasses.replace(
        cfg,
        seed=seed,
        negatives=dataclasses.replace(cfg.negatives, seed=seed),
        procurement=dataclasses.replace(cfg.procurement, seed=seed),
        adaptation=dataclasses.replace(cfg.adaptation, seed=seed),
    )


def make_negatives(images: np.ndarray, labels: np.ndarray, num_positive: int, cfg: ExperimentConfig, ids=None):
    table = build_negative_table(num_positive, cfg.negatives.requested, cfg.negatives.seed)
    samples = build_negative_dataset(group_by_class(images, labels, ids), table, cfg.negatives.per_class, cfg.negatives.seed)
    return table, samples


def procure(
    cfg: ExperimentConfig,
    images: np.ndarray,
    labels: np.ndarray,
    negatives: tuple[np.ndarray, np.ndarray] | None,
    table: NegativeClassTable | None,
    source_classes: Sequence[str],
    on_step: Callable | None = None,
) -> tuple[ck.Checkpoint, list[dict]]:
    """Train the procurement model; ``labels`` are dense ids ``0..|Cs|-1``."""
    num_positive = len(source_classes)
    latent = cfg.procurement.negative_mode == "latent"
    num_outputs = num_positive + 1 if latent else table.num_outputs
    model = build_model(cfg.arch, num_positive, num_outputs, cfg.procurement.seed)
    neg = None
    if not latent:
        neg = (to_tensor(negatives[0]), torch.as_tensor(negatives[1]))
    result = run_procurement(model, (to_tensor(images), torch.as_tensor(labels)), neg, cfg.procurement, on_step)
    ckpt = ck.from_procurement(model, result.priors, source_classes, None if latent else table, cfg.procurement.to_dict())
    return ckpt, result.trace


def adapt(ckpt: ck.Checkpoint, target_images: np.ndarray, cfg: ExperimentConfig, on_step: Callable | None = None):
    """Adapt ``Ft`` on unlabeled target images; returns (checkpoint, trace, model)."""
    dm = ck.deployment_model(ckpt, beta=cfg.adaptation.beta)
    trace = run_adaptation(dm, to_tensor(target_images), cfg.adaptation, on_step)
    return ck.with_adaptation(ckpt, dm, cfg.adaptation.to_dict()), trace, dm


def ssm_values(dm: DeploymentModel, images: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        probs = predict_logits(dm.source_probs, to_tensor(images))
    return compute_ssm(probs, dm.num_positive).w.double().numpy()


def score(fn: Callable, images: np.ndarray, true_labels, label_space: LabelSpace, ids=None, dm=None) -> tuple[list[PredictionRecord], MetricReport]:
    with torch.no_grad():
        x = to_tensor(images)
        logits = predict_logits(fn, x).numpy()
        ssm = None
        if dm is not None:
            s = compute_ssm(predict_logits(dm.source_probs, x), label_space.num_source)
            ssm = (s.w.numpy(), s.w_prime.numpy())
    records = records_from_logits(logits, true_labels, label_space, ids, ssm)
    return records, evaluate(records, label_space)


@dataclass
class ExperimentResult:
    label_space: LabelSpace
    unadapted: MetricReport
    adapted: MetricReport
    ssm_means: dict = field(default_factory=dict)
    ssm: dict = field(default_factory=dict)
    source_accuracy: float = float("nan")
    procurement_trace: list = field(default_factory=list)
    adaptation_trace: list = field(default_factory=list)
    checkpoint: ck.Checkpoint | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def gain(self) -> float:
        return self.adapted.t_avg - self.unadapted.t_avg


def run_synthetic_experiment(cfg: ExperimentConfig, label_space: LabelSpace, seed: int | None = None) -> ExperimentResult:
    """Render, composite, procure, adapt and score one synthetic task in memory.

    ``label_space`` holds synthetic universe ids; output ``k`` of the model is
    ``label_space.source_labels[k]``.
    """
    if seed is not None:
        cfg = with_seed(cfg, seed)
    source_labels = list(label_space.source_labels)
    xs, ys_u = render_domain(cfg.synthetic, source_labels, cfg.seed, target=False)
    xt, yt = render_domain(cfg.synthetic, list(label_space.target_labels), cfg.seed, target=True)
    dense = {c: k for k, c in enumerate(source_labels)}
    ys = np.asarray([dense[int(c)] for c in ys_u], dtype=np.int64)
    num_positive = len(source_labels)

    table, samples, negatives = None, [], None
    if cfg.procurement.negative_mode == "composite":
        table, samples = make_negatives(xs, ys, num_positive, cfg)
        negatives = (np.stack([s.image for s in samples]), np.asarray([s.negative_label for s in samples]))
    names = [f"class_{c:02d}" for c in source_labels]
    ckpt, ptrace = procure(cfg, xs, ys, negatives, table, names)

    dm0 = ck.deployment_model(ckpt, beta=cfg.adaptation.beta)
    with torch.no_grad():
        src_pred = predict_logits(dm0.source, to_tensor(xs)).argmax(-1).numpy()
    source_acc = float((src_pred == ys).mean())
    _, unadapted = score(dm0.source, xt, yt, label_space)

    shared = np.isin(ys_u, label_space.shared)
    private_t = np.isin(yt, label_space.target_private)
    pops = {"source-shared": xs[shared], "target-shared": xt[~private_t], "target-private": xt[private_t]}
    if negatives is not None:
        pops["negative-source"] = negatives[0]
    ssm = {k: ssm_values(dm0, v) for k, v in pops.items() if len(v)}

    feats = embed(dm0.source, to_tensor(xs)).double().numpy()
    diag = {"frozen_before": module_checksum(dm0.M, dm0.source.Fs, dm0.D, dm0.source.G)}
    diag.update(compactness(feats, ys))
    diag["confidence_before"] = mean_confidence(dm0, to_tensor(xt))

    ackpt, atrace, dm = adapt(ckpt, xt, cfg)
    _, adapted = score(dm, xt, yt, label_space)
    diag["confidence_after"] = mean_confidence(dm, to_tensor(xt))
    diag["frozen_after"] = module_checksum(dm.M, dm.source.Fs, dm.D, dm.source.G)
    log.info("seed %d: T_avg %.3f -> %.3f", cfg.seed, unadapted.t_avg, adapted.t_avg)
    return ExperimentResult(
        label_space, unadapted, adapted, {k: float(v.mean()) for k, v in ssm.items()}, ssm, source_acc, ptrace, atrace,
        ackpt, diag,
    )


def compactness(features: np.ndarray, labels: np.ndarray) -> dict:
    """Mean distance to the own class centroid against the mean distance between centroids."""
    classes = np.unique(labels)
    centroids = np.stack([features[labels == c].mean(0) for c in classes])
    within = np.mean([np.linalg.norm(features[labels == c] - centroids[k], axis=1).mean() for k, c in enumerate(classes)])
    d = np.linalg.norm(centroids[:, None] - centroids[None], axis=-1)
    between = d[np.triu_indices(len(classes), 1)].mean()
    return {"within_class": float(within), "between_centroid": float(between)}
