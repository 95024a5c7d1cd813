"""Losses, PK sampling and the training loops.

Batch composition depends only on ``(seed, step)``, so a run is reproducible
regardless of how data loading is scheduled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attention import ContractViolation
from .data import ArraySet, DatasetError
from .geometry import angular_difference, encode_viewpoint, recover_orientation, viewpoint_loss
from .model import ConfigurationError, ReIDModel, ViewpointEstimator, to_tensor

log = logging.getLogger(__name__)


class SamplingError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_trip: float = 1.0
    lambda_id: float = 1.0

    def validate(self):
        if self.lambda_trip < 0 or self.lambda_id < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lambda_trip == 0 and self.lambda_id == 0:
            raise ValueError("loss weights lambda_trip and lambda_id cannot both be 0")


@dataclass
class ScheduleConfig:
    base_lr: float = 0.005
    viewpoint_lr_scale: float = 0.1
    decay_factor: float = 0.1
    decay_every: int = 1500
    total_steps: int = 4000
    P: int = 8
    K: int = 4
    margin: float = 0.3
    soft_margin: bool = False
    momentum: float = 0.9
    weight_decay: float = 5e-4
    log_every: int = 10

    def validate(self):
        if self.P < 2 or self.K < 2:
            raise ValueError(f"schedule.P and schedule.K must be >= 2, got P={self.P}, K={self.K}")
        if self.total_steps < 1:
            raise ValueError("schedule.total_steps must be >= 1")
        if self.decay_every < 1:
            raise ValueError("schedule.decay_every must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("schedule.base_lr must be > 0")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


def learning_rate(schedule: ScheduleConfig, step: int) -> float:
    """Step decay: ``base_lr * decay_factor ** (step // decay_every)``."""
    return schedule.base_lr * schedule.decay_factor ** (step // schedule.decay_every)


def batch_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


class PKSampler:
    """P identities, K images each; images repeat when an identity has fewer than K."""

    def __init__(self, labels, P: int, K: int):
        labels = np.asarray(labels)
        self.P, self.K = P, K
        self.identities = np.unique(labels)
        if len(self.identities) < P:
            raise SamplingError(f"need at least P={P} identities, dataset has {len(self.identities)}")
        self.pools = [np.flatnonzero(labels == i) for i in self.identities]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        chosen = rng.choice(len(self.identities), self.P, replace=False)
        out = []
        for c in chosen:
            pool = self.pools[c]
            out.append(rng.choice(pool, self.K, replace=len(pool) < self.K))
        return np.concatenate(out)


def pk_sample(labels, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    return PKSampler(labels, P, K).sample(rng)


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    d2 = (x[:, None, :] - x[None, :, :]).pow(2).sum(-1)
    # keeps sqrt differentiable on the diagonal
    return d2.clamp_min(1e-12).sqrt()


def triplet_loss_batch_hard(features: torch.Tensor, labels: torch.Tensor, margin: float = 0.3,
                            soft: bool = False) -> torch.Tensor:
    """Batch-hard triplet loss on raw (unnormalized) features."""
    labels = torch.as_tensor(labels)
    same = labels[:, None] == labels[None, :]
    if (same.sum(1) < 2).any() or same.all(1).any():
        raise ContractViolation("every sample needs at least one positive and one negative in the batch")
    dist = pairwise_euclidean(features)
    hardest_pos = (dist * same).max(dim=1).values
    hardest_neg = dist.masked_fill(same, float("inf")).min(dim=1).values
    gap = hardest_pos - hardest_neg
    if soft:
        return F.softplus(gap).mean()
    return F.relu(margin + gap).mean()


def id_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractViolation(f"identity labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def combined_loss(features, logits, labels, weights: LossWeights, margin: float = 0.3,
                  soft: bool = False) -> tuple[torch.Tensor, dict]:
    terms = {}
    total = features.new_zeros(())
    if weights.lambda_trip:
        terms["loss_trip"] = triplet_loss_batch_hard(features, labels, margin, soft)
        total = total + weights.lambda_trip * terms["loss_trip"]
    if weights.lambda_id:
        terms["loss_id"] = id_loss(logits, labels)
        total = total + weights.lambda_id * terms["loss_id"]
    return total, terms


class MetricsLog:
    """Plain-text, one record per line: ``step=<n>\\tlr=<x>\\t<term>=<value>...``."""

    def __init__(self, path=None, append: bool = False):
        self.path = None if path is None else Path(path)
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append or not self.path.exists():
                self.path.write_text("")

    def write(self, step: int, lr: float, **terms):
        record = {"step": step, "lr": lr, **terms}
        self.records.append(record)
        if self.path is not None:
            line = "\t".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items())
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def read_metrics_log(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        rec = {}
        for item in line.split("\t"):
            k, v = item.split("=", 1)
            rec[k] = int(v) if k == "step" else float(v)
        out.append(rec)
    return out


def _sgd(groups, schedule: ScheduleConfig):
    return torch.optim.SGD(groups, lr=schedule.base_lr, momentum=schedule.momentum,
                           weight_decay=schedule.weight_decay)


def _set_lr(optimizer, schedule: ScheduleConfig, step: int):
    lr = learning_rate(schedule, step)
    for group in optimizer.param_groups:
        group["lr"] = lr * group["lr_scale"]
    return lr


def viewpoint_targets(data: ArraySet) -> np.ndarray:
    if data.theta is None or data.phi is None or np.isnan(data.theta).any():
        raise DatasetError("dataset lacks viewpoint metadata")
    return encode_viewpoint(data.phi, data.theta)


@torch.no_grad()
def predict_viewpoints(estimator: ViewpointEstimator, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was = estimator.training
    estimator.eval()
    dtype = estimator.head.weight.dtype
    out = [estimator(to_tensor(images[i:i + batch_size], dtype)) for i in range(0, len(images), batch_size)]
    estimator.train(was)
    return torch.cat(out).numpy().astype(np.float64)


def mean_orientation_error(pred: np.ndarray, theta: np.ndarray) -> float:
    """Mean absolute angular error in degrees between recovered and true orientation."""
    return float(np.degrees(angular_difference(recover_orientation(pred), theta)).mean())


@dataclass
class TrainResult:
    log: MetricsLog
    final_step: int
    validation: list[tuple[int, float]] = field(default_factory=list)


def step1_train(estimator: ViewpointEstimator, train: ArraySet, schedule: ScheduleConfig, seed: int = 0,
                validation: ArraySet | None = None, metrics: MetricsLog | None = None,
                eval_every: int = 500, loss_kind: str = "mse") -> TrainResult:
    """Fit the viewpoint estimator alone on the viewpoint regression loss."""
    schedule.validate()
    targets = torch.from_numpy(viewpoint_targets(train)).float()
    metrics = metrics or MetricsLog()
    val_x = val_t = None
    if validation is not None:
        val_x = validation.images
        val_t = viewpoint_targets(validation)
    result = TrainResult(metrics, 0)

    def validate(step):
        if val_x is None:
            return
        pred = predict_viewpoints(estimator, val_x)
        result.validation.append((step, float(np.mean((pred - val_t) ** 2))))

    groups = [{"params": list(estimator.parameters()), "lr_scale": 1.0}]
    optimizer = _sgd(groups, schedule)
    estimator.train()
    validate(0)
    for step in range(schedule.total_steps):
        lr = _set_lr(optimizer, schedule, step)
        idx = batch_rng(seed, step).choice(len(train), schedule.batch_size, replace=False)
        pred = estimator(to_tensor(train.images[idx]))
        loss = viewpoint_loss(pred, targets[idx], loss_kind)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % schedule.log_every == 0 or step == schedule.total_steps - 1:
            metrics.write(step, lr, loss_vpt=loss.item())
        if eval_every and (step + 1) % eval_every == 0 and step + 1 < schedule.total_steps:
            validate(step + 1)
    validate(schedule.total_steps)
    estimator.eval()
    result.final_step = schedule.total_steps
    return result


def label_indices(ids: np.ndarray) -> tuple[np.ndarray, dict]:
    """Map raw identity ids to contiguous class indices (sorted order)."""
    mapping = {int(v): i for i, v in enumerate(np.unique(ids))}
    return np.array([mapping[int(v)] for v in ids]), mapping


def step2_train(model: ReIDModel, train: ArraySet, schedule: ScheduleConfig, weights: LossWeights,
                seed: int = 0, metrics: MetricsLog | None = None, start_step: int = 0) -> TrainResult:
    """Joint optimisation with triplet + identity losses; the estimator gets a reduced lr."""
    schedule.validate()
    weights.validate()
    labels, _ = label_indices(train.ids)
    num_classes = int(labels.max()) + 1
    if model.num_ids != num_classes:
        raise ConfigurationError(
            f"classifier has {model.num_ids} outputs but the training set has {num_classes} identities")
    sampler = PKSampler(labels, schedule.P, schedule.K)
    metrics = metrics or MetricsLog()
    groups = [
        {"params": model.main_parameters(), "lr_scale": 1.0},
        {"params": model.viewpoint_parameters(), "lr_scale": schedule.viewpoint_lr_scale},
    ]
    optimizer = _sgd(groups, schedule)
    labels_t = torch.from_numpy(labels)
    model.train()
    for step in range(start_step, schedule.total_steps):
        lr = _set_lr(optimizer, schedule, step)
        idx = sampler.sample(batch_rng(seed, step))
        x = to_tensor(train.images[idx], model.embed.weight.dtype)
        _, features, logits = model(x)
        loss, terms = combined_loss(features, logits, labels_t[idx], weights, schedule.margin,
                                    schedule.soft_margin)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % schedule.log_every == 0 or step == schedule.total_steps - 1:
            metrics.write(step, lr, **{k: v.item() for k, v in terms.items()}, loss=loss.item())
    model.eval()
    return TrainResult(metrics, schedule.total_steps)


def two_stage_transfer(model: ReIDModel, auxiliary: ArraySet, target: ArraySet,
                       schedule_aux: ScheduleConfig, schedule_target: ScheduleConfig,
                       weights: LossWeights, seed: int = 0, metrics_aux: MetricsLog | None = None,
                       metrics_target: MetricsLog | None = None,
                       on_stage_end=None) -> tuple[TrainResult, TrainResult]:
    """Train on the auxiliary identities, swap the classifier, then train on the target set."""
    n_aux = len(np.unique(auxiliary.ids))
    if model.num_ids != n_aux:
        model.reset_classifier(n_aux, seed)
    first = step2_train(model, auxiliary, schedule_aux, weights, seed, metrics_aux)
    if on_stage_end is not None:
        on_stage_end(model)
    model.reset_classifier(len(np.unique(target.ids)), seed + 1)
    second = step2_train(model, target, schedule_target, weights, seed + 1, metrics_target)
    return first, second
