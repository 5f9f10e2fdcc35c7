"""Training losses over cosine-distance score vectors.

All losses take distances, not logits: a score vector holds one cosine
distance per class, so ``-distance`` plays the role of a logit.  Softmaxes
are computed via ``log_softmax`` so large distance gaps cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

ATTENTION_LOSS_FORMS = ("nll", "raw")


@dataclass
class LossConfig:
    """Loss weights, softening temperature, and the attention-loss variant.

    ``attention_loss_form="nll"`` trains the fused embedding toward its
    superclass module; ``"raw"`` keeps the plain softmax probability (an
    ablation form that rewards moving away from it when minimized).
    """

    lambda1: float = 0.7
    lambda2: float = 1.1
    lambda3: float = 0.6
    tau: float = 2.0
    attention_loss_form: str = "nll"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        lambdas = (self.lambda1, self.lambda2, self.lambda3)
        if any(lam < 0 for lam in lambdas):
            raise ConfigurationError(f"loss weights must be non-negative, got {lambdas}")
        if not any(lam > 0 for lam in lambdas):
            raise ConfigurationError("at least one loss weight must be positive")
        if self.attention_loss_form not in ATTENTION_LOSS_FORMS:
            raise ConfigurationError(
                f"attention_loss_form must be one of {ATTENTION_LOSS_FORMS}, "
                f"got {self.attention_loss_form!r}"
            )


@dataclass
class DistillationContext:
    """Old-class score vectors captured from the frozen pre-session model."""

    old_scores: torch.Tensor  # (batch, num_old)
    num_old: int

    def __post_init__(self):
        if self.num_old < 1:
            raise ConfigurationError("distillation needs at least one old class")
        if self.old_scores.ndim != 2 or self.old_scores.shape[1] != self.num_old:
            raise ShapeError(
                f"old_scores shape {tuple(self.old_scores.shape)} does not match "
                f"num_old={self.num_old}"
            )


def classification_loss(distances: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of softmax(-distances) at the true class column."""
    if distances.ndim != 2:
        raise ShapeError(f"distances must be (batch, classes), got {tuple(distances.shape)}")
    num_classes = distances.shape[1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 1 or labels.shape[0] != distances.shape[0]:
        raise ShapeError("labels must be a vector matching the batch size")
    if bool(((labels < 0) | (labels >= num_classes)).any()):
        raise IndexError(f"label outside [0, {num_classes})")
    log_probs = F.log_softmax(-distances, dim=1)
    return -log_probs.gather(1, labels.unsqueeze(1)).mean()


def distillation_loss(
    new_distances: torch.Tensor, ctx: DistillationContext, tau: float
) -> torch.Tensor:
    """Soft cross-entropy between old and new score distributions.

    Both distributions are softmaxes of ``-distance / tau`` renormalized over
    the old classes only; new classes never enter either distribution.
    Equals H(p) when the old-class block of the new scores reproduces the
    snapshot, and exceeds it by KL(p || q) otherwise.
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    n = ctx.num_old
    if new_distances.ndim != 2 or new_distances.shape[1] < n:
        raise ShapeError(
            f"new_distances shape {tuple(new_distances.shape)} has fewer than "
            f"{n} old-class columns"
        )
    if new_distances.shape[0] != ctx.old_scores.shape[0]:
        raise ShapeError("batch size mismatch between new distances and snapshot")
    p = F.softmax(-ctx.old_scores / tau, dim=1)
    log_q = F.log_softmax(-new_distances[:, :n] / tau, dim=1)
    return -(p * log_q).sum(dim=1).mean()


def attention_loss(
    fused: torch.Tensor,
    per_module: torch.Tensor,
    superclass_labels: torch.Tensor,
    form: str = "nll",
) -> torch.Tensor:
    """Pulls each fused embedding toward its superclass's module output.

    The score of module j for sample i is the cosine distance between the
    fused embedding and that module's output; softmax(-distance) turns the
    scores into probabilities.  Superclass labels are 1-based.
    """
    if form not in ATTENTION_LOSS_FORMS:
        raise ConfigurationError(f"unknown attention loss form {form!r}")
    if per_module.ndim != 3:
        raise ShapeError(f"per_module must be (batch, N, u), got {tuple(per_module.shape)}")
    num_modules = per_module.shape[1]
    labels = torch.as_tensor(superclass_labels, dtype=torch.long)
    if bool(((labels < 1) | (labels > num_modules)).any()):
        raise IndexError(f"superclass label outside [1, {num_modules}]")
    distances = 1.0 - F.cosine_similarity(fused.unsqueeze(1), per_module, dim=-1)
    cols = (labels - 1).unsqueeze(1)
    if form == "raw":
        probs = F.softmax(-distances, dim=1)
        return probs.gather(1, cols).mean()
    log_probs = F.log_softmax(-distances, dim=1)
    return -log_probs.gather(1, cols).mean()


def total_loss(lc, ld, la, cfg: LossConfig, phase: str):
    """Weighted combination; the base phase has no old classes to distill."""
    if phase == "base":
        return cfg.lambda1 * lc + cfg.lambda3 * la
    if phase == "novel":
        return cfg.lambda1 * lc + cfg.lambda2 * ld + cfg.lambda3 * la
    raise ConfigurationError(f"unknown phase {phase!r}")
