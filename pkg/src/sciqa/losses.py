"""Training objectives and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from .errors import NumericError


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1.0  # triplet margin
    lambda1: float = 1.0  # triplet weight
    lambda2: float = 5e-3  # MMD weight
    lambda3: float = 1.0  # classification weight

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


def _check_same_shape(*tensors):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def triplet_loss(anchor, positive, negative, alpha: float = 1.0) -> torch.Tensor:
    """Mean hinge on squared distances: [|a - p|^2 - |a - n|^2 + alpha]_+.

    For the semantic features the anchor is the reference image, the positive
    its distorted version and the negative the auxiliary image.
    """
    _check_same_shape(anchor, positive, negative)
    d_pos = ((anchor - positive) ** 2).sum(-1)
    d_neg = ((anchor - negative) ** 2).sum(-1)
    return torch.relu(d_pos - d_neg + alpha).mean()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    K = logits.shape[-1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits - logits.max(dim=-1, keepdim=True).values.detach()
    lse = torch.log(torch.exp(z).sum(-1))
    picked = z.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return (lse - picked).mean()


def mae_loss(pred, gt) -> torch.Tensor:
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def kl_regularizers(phi_rd, phi_ad):
    """Squared norms |phi_rd|^2, |phi_ad|^2, |phi_rd - phi_ad|^2.

    Inputs may be single D-vectors or (B, D) batches; batches are averaged.
    """
    _check_same_shape(phi_rd, phi_ad)

    def sq(v):
        return (v * v).sum(-1).mean() if v.ndim > 1 else (v * v).sum()

    return sq(phi_rd), sq(phi_ad), sq(phi_rd - phi_ad)


COMPONENTS = ("mae", "trip", "mmd", "cls", "reg_rd", "reg_ad", "reg_diff")


@dataclass
class LossBundle:
    mae: torch.Tensor
    trip: torch.Tensor
    mmd: torch.Tensor
    cls: torch.Tensor
    reg_rd: torch.Tensor
    reg_ad: torch.Tensor
    reg_diff: torch.Tensor
    total: torch.Tensor
    lambdas: tuple

    def as_dict(self) -> dict:
        out = {name: float(getattr(self, name).detach()) for name in COMPONENTS + ("total",)}
        out["lambdas"] = list(self.lambdas)
        return out

    def identity_holds(self) -> bool:
        return bool(combine(self, self.lambdas) == self.total)


def combine(c, lambdas) -> torch.Tensor:
    l1, l2, l3 = lambdas
    return c.mae + l1 * c.trip + l2 * c.mmd + l3 * c.cls + c.reg_rd + c.reg_ad + c.reg_diff


def total_loss(components: dict, hyper: HyperParams = HyperParams()) -> LossBundle:
    """Weighted sum of all objectives; raises on any non-finite component."""
    values = {}
    for name in COMPONENTS:
        v = torch.as_tensor(components[name])
        if not torch.isfinite(v).all():
            raise NumericError(f"loss component {name!r} is not finite ({float(v.detach())})")
        values[name] = v
    lambdas = (hyper.lambda1, hyper.lambda2, hyper.lambda3)
    bundle = LossBundle(total=torch.zeros(()), lambdas=lambdas, **values)
    bundle.total = combine(bundle, lambdas)
    if not math.isfinite(float(bundle.total.detach())):
        raise NumericError("total loss is not finite")
    return bundle
