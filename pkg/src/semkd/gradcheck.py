"""Finite-difference verification of loss gradients.

Builds a small double-precision instance of the post-backbone pipeline,
evaluates the requested loss, and compares autograd gradients of every
trainable parameter against central finite differences.  Errors are reported
per parameter tensor as ||analytic - numeric|| / max(||analytic||, ||numeric||).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError
from .losses import (
    DistillationContext,
    LossConfig,
    attention_loss,
    classification_loss,
    distillation_loss,
    total_loss,
)
from .model import ClassifierHead, ModelConfig, ModelState, forward_semantic, score

LOSS_COMPONENTS = ("total", "lc", "ld", "la")


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_tensor: dict
    num_params: int

    def __str__(self) -> str:
        lines = [f"checked {self.num_params} parameters"]
        for name, err in sorted(self.per_tensor.items()):
            lines.append(f"  {name:: <40} rel err {err:.3e}")
        lines.append(f"max relative error: {self.max_rel_err:.3e}")
        return "\n".join(lines)


def build_check_instance(
    seed: int = 0,
    feature_dim: int = 8,
    semantic_dim: int = 6,
    num_embeddings: int = 3,
    attention_hidden: int = 5,
    batch: int = 4,
    num_old: int = 4,
    num_new: int = 2,
    mapping_hidden=(10, 9),
):
    """Random double-precision model, head, inputs, labels, and a distillation
    snapshot drawn from an independently initialized twin model."""
    torch.manual_seed(seed)
    cfg = ModelConfig(
        backbone="mlp",
        input_dim=feature_dim,
        feature_dim=feature_dim,
        semantic_dim=semantic_dim,
        num_embeddings=num_embeddings,
        attention_hidden=attention_hidden,
        mapping_hidden=tuple(mapping_hidden),
    )
    model = ModelState(cfg, dtype=torch.float64)
    twin = ModelState(cfg, dtype=torch.float64)

    head = ClassifierHead(semantic_dim, dtype=torch.float64)
    sem = torch.randn(num_old + num_new, semantic_dim, dtype=torch.float64)
    head.register((f"class_{i:02d}", sem[i].numpy()) for i in range(num_old + num_new))

    g = torch.randn(batch, feature_dim, dtype=torch.float64)
    labels = torch.randint(0, num_old + num_new, (batch,))
    sc_labels = torch.randint(1, num_embeddings + 1, (batch,))
    with torch.no_grad():
        y_twin, _, _, _ = forward_semantic(twin, g)
        d_old = score(head, y_twin)[:, :num_old]
    ctx = DistillationContext(old_scores=d_old, num_old=num_old)
    return model, head, g, labels, sc_labels, ctx


def _loss_value(model, head, g, labels, sc_labels, ctx, loss_cfg, component):
    y, fused, _, per = forward_semantic(model, g)
    distances = score(head, y)
    if component == "lc":
        return classification_loss(distances, labels)
    if component == "ld":
        return distillation_loss(distances, ctx, loss_cfg.tau)
    if component == "la":
        return attention_loss(fused, per, sc_labels, loss_cfg.attention_loss_form)
    lc = classification_loss(distances, labels)
    ld = distillation_loss(distances, ctx, loss_cfg.tau)
    la = attention_loss(fused, per, sc_labels, loss_cfg.attention_loss_form)
    return total_loss(lc, ld, la, loss_cfg, "novel")


def check_gradients(
    component: str = "total",
    seed: int = 0,
    epsilon: float = 1e-4,
    loss_cfg: LossConfig | None = None,
    **instance_kwargs,
) -> GradCheckReport:
    """Compare autograd against central differences for one loss component.

    Only the novel-phase trainable components (attention, mapping, embedding
    modules) are perturbed; the backbone is frozen exactly as in training.
    """
    if component not in LOSS_COMPONENTS:
        raise ConfigurationError(f"component must be one of {LOSS_COMPONENTS}")
    loss_cfg = loss_cfg or LossConfig()
    model, head, g, labels, sc_labels, ctx = build_check_instance(seed=seed, **instance_kwargs)
    model.set_trainable_components({"attention", "mapping", "embeddings"})

    loss = _loss_value(model, head, g, labels, sc_labels, ctx, loss_cfg, component)
    model.zero_grad()
    loss.backward()

    named = [
        (name, p) for name, p in model.named_parameters() if p.requires_grad
    ]
    per_tensor: dict[str, float] = {}
    num_params = 0
    with torch.no_grad():
        for name, param in named:
            # a component loss may not touch every trainable tensor
            analytic = (
                param.grad.detach().clone() if param.grad is not None
                else torch.zeros_like(param)
            )
            numeric = torch.zeros_like(param)
            flat = param.view(-1)
            nflat = numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                hi = _loss_value(model, head, g, labels, sc_labels, ctx, loss_cfg, component)
                flat[i] = orig - epsilon
                lo = _loss_value(model, head, g, labels, sc_labels, ctx, loss_cfg, component)
                flat[i] = orig
                nflat[i] = (hi - lo) / (2.0 * epsilon)
            denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
            per_tensor[name] = (analytic - numeric).norm().item() / denom
            num_params += flat.numel()
    return GradCheckReport(
        max_rel_err=max(per_tensor.values()),
        per_tensor=per_tensor,
        num_params=num_params,
    )
