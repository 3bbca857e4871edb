"""Point-set classifier D and the adversarial losses of the training game.

D predicts the probability that a point set is (perturbed) ground truth:
a T-Net-style input transform (3x3 matrix, exactly identity at
initialization), a shared per-point encoder, max-pooling over points for
permutation invariance, and a zero-initialized classifier head so a fresh
D outputs exactly 0.5.

loss_D = H(D(P), 0) + H(D(P_gt_hat), 1) touches only discriminator
parameters (the generated set is detached); loss_G = H(D(P), 1) is the
non-saturating generator objective computed with the discriminator frozen,
so backward passes never mix the two parameter sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError
from .nnutil import bce_scalar, mlp, xavier_init, zero_init


@dataclass(frozen=True)
class ClassifierConfig:
    encoder_hidden: tuple[int, int] = (64, 128)
    transform_hidden: tuple[int, int] = (32, 64)
    head_hidden: int = 64


class InputTransform(nn.Module):
    """Predicts a 3x3 transform from the point set; identity at initialization."""

    def __init__(self, config: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        h1, h2 = config.transform_hidden
        self.point_net = mlp((3, h1, h2))
        self.matrix_net = mlp((h2, h1, 9))
        xavier_init(self)
        zero_init(self.matrix_net[-1])

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        pooled = self.point_net(points).max(dim=0).values
        delta = self.matrix_net(pooled).view(3, 3)
        return delta + torch.eye(3, dtype=delta.dtype, device=delta.device)


class PointSetClassifier(nn.Module):
    """D(.; theta_D): transform -> per-point encoder -> max-pool -> sigmoid head."""

    def __init__(self, config: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.config = config
        e1, e2 = config.encoder_hidden
        self.transform = InputTransform(config)
        self.encoder = mlp((3, e1, e2), nn.ReLU())
        self.head = mlp((e2, config.head_hidden, 1))
        xavier_init(self)
        zero_init(self.transform.matrix_net[-1])
        zero_init(self.head[-1])
        with torch.no_grad():
            probe = torch.rand(4, 3)
            t = self.transform(probe)
            if not torch.equal(t, torch.eye(3)):
                raise ShapeError("input transform is not identity at initialization")

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        if points.ndim != 2 or points.shape[1] != 3:
            raise ShapeError(f"points must be (N, 3), got {tuple(points.shape)}")
        q = points @ self.transform(points)
        encoded = self.encoder(q)
        pooled = encoded.max(dim=0).values
        return torch.sigmoid(self.head(pooled)).squeeze(0)


def classify(model: PointSetClassifier, points) -> torch.Tensor:
    points = torch.as_tensor(points).to(next(model.parameters()).dtype)
    return model(points)


def generator_loss(p_gen: torch.Tensor, model: PointSetClassifier) -> torch.Tensor:
    """Non-saturating objective H(D(P), 1), evaluated with theta_D frozen.

    Freezing requires_grad during the forward keeps theta_D out of the
    autograd graph, so a backward pass reaches only the generator side.
    """
    flags = [p.requires_grad for p in model.parameters()]
    try:
        for p in model.parameters():
            p.requires_grad_(False)
        return bce_scalar(model(p_gen), 1.0)
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)


def adversarial_losses(
    p_gen: torch.Tensor, p_gt_hat: torch.Tensor, model: PointSetClassifier
) -> tuple[torch.Tensor, torch.Tensor]:
    """(loss_D, loss_G) with the gradient partition built in.

    loss_D sees a detached generated set, so backward through it reaches
    only theta_D; loss_G comes from `generator_loss` and reaches only the
    generator side feeding p_gen.
    """
    d_gen = model(p_gen.detach())
    d_gt = model(p_gt_hat.detach() if p_gt_hat.requires_grad else p_gt_hat)
    loss_d = bce_scalar(d_gen, 0.0) + bce_scalar(d_gt, 1.0)
    return loss_d, generator_loss(p_gen, model)
