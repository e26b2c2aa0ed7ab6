"""Supervised contrastive loss, cross-entropy, the SGD schedule and one training step."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, asdict, field

import torch
import torch.nn.functional as F


class NumericalError(RuntimeError):
    pass


@dataclass
class LossConfig:
    temperature: float = 0.07
    # "sum" adds anchor terms as written in the objective; "mean" averages them
    reduction: str = "sum"
    supcon_weight: float = 1.0
    ce_weight: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-3
    milestones: tuple[int, ...] = (800, 900)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 1000

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if not self.base_lr > 0 or not self.gamma > 0:
            raise ValueError("base_lr and gamma must be positive")

    def compressed(self, epochs: int) -> "OptimizerConfig":
        """Same schedule with milestones rescaled to a run of ``epochs`` epochs."""
        ms = tuple(int(round(m * epochs / self.epochs)) for m in self.milestones)
        return OptimizerConfig(self.base_lr, ms, self.gamma, self.momentum,
                               self.weight_decay, epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def lr_at(epoch: int, cfg: OptimizerConfig | None = None) -> float:
    """Piecewise-constant schedule: ``base_lr * gamma ** (#milestones <= epoch)``."""
    cfg = cfg or OptimizerConfig()
    k = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.base_lr * cfg.gamma ** k


def make_optimizer(params, cfg: OptimizerConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def supcon_loss(embeddings: torch.Tensor, labels: torch.Tensor, temperature: float = 0.07,
                reduction: str = "sum", norm_tol: float = 1e-4) -> torch.Tensor:
    """Supervised contrastive loss over all views of a batch.

    For anchor ``i`` the positives are every other view with the same label;
    the denominator runs over all ``k != i``.  Anchors without positives are
    skipped.  Log-sum-exp is max-shifted for stability.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if embeddings.dim() != 2 or embeddings.shape[0] < 2:
        raise ValueError(f"need a (V >= 2, d) embedding matrix, got {tuple(embeddings.shape)}")
    norms = embeddings.detach().norm(dim=1)
    if bool(((norms - 1).abs() > norm_tol).any()):
        raise ValueError(f"embeddings must be unit-norm (max deviation "
                         f"{float((norms - 1).abs().max()):.2e})")
    labels = labels.reshape(-1).to(embeddings.device)
    v = embeddings.shape[0]
    eye = torch.eye(v, dtype=torch.bool, device=embeddings.device)

    logits = embeddings @ embeddings.T / temperature
    logits = logits.masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(eye, 0.0)

    positives = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = positives.sum(dim=1)
    has_pos = n_pos > 0
    if not bool(has_pos.any()):
        warnings.warn("supcon_loss: no anchor has a positive; loss is 0")
        return embeddings.sum() * 0.0
    per_anchor = -(log_prob * positives).sum(dim=1)[has_pos] / n_pos[has_pos]
    return per_anchor.sum() if reduction == "sum" else per_anchor.mean()


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over views of ``-log softmax(logits)[label]``."""
    return F.cross_entropy(logits, labels.reshape(-1).long())


@dataclass
class StepReport:
    step: int
    epoch: int
    lr: float
    supcon: float
    ce: float
    total: float
    grad_norm_encoder: float
    grad_norm_projection: float
    grad_norm_classifier: float
    batch: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("batch")
        return d


def _grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(sq)


def training_step(model, optimizer, view_a: torch.Tensor, view_b: torch.Tensor,
                  labels: torch.Tensor, cfg: LossConfig | None = None, *,
                  step: int = 0, epoch: int = 0, batch_ids=None) -> StepReport:
    """One SGD update on ``supcon_weight * SupCon + ce_weight * CE``.

    The classification head reads detached features, so encoder and projection
    gradients come from the contrastive term alone.
    """
    cfg = cfg or LossConfig()
    model.train()
    optimizer.zero_grad(set_to_none=True)
    labels = labels.reshape(-1).long()
    view_labels = torch.cat([labels, labels])
    embeddings, logits = model.forward_training(view_a, view_b)
    l_sup = supcon_loss(embeddings, view_labels, cfg.temperature, cfg.reduction)
    l_ce = cross_entropy(logits, view_labels)
    total = cfg.supcon_weight * l_sup + cfg.ce_weight * l_ce
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite loss at step {step} (supcon={l_sup.item()}, "
                             f"ce={l_ce.item()}); batch={batch_ids}")
    total.backward()
    report = StepReport(
        step=step, epoch=epoch, lr=optimizer.param_groups[0]["lr"],
        supcon=l_sup.item(), ce=l_ce.item(), total=total.item(),
        grad_norm_encoder=_grad_norm(model.encoder.parameters()),
        grad_norm_projection=_grad_norm(model.projection.parameters()),
        grad_norm_classifier=_grad_norm(model.classifier.parameters()),
        batch=list(batch_ids or []),
    )
    optimizer.step()
    return report
