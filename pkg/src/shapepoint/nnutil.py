"""Small shared pieces for the network modules: clamped BCE, init helpers."""

from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeError

BCE_EPS = 1e-7


def clamped_bce(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities clamped to [eps, 1-eps]."""
    if prob.shape != target.shape:
        raise ShapeError(f"BCE shapes differ: {tuple(prob.shape)} vs {tuple(target.shape)}")
    p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def bce_scalar(prob: torch.Tensor, label: float) -> torch.Tensor:
    """BCE of a probability tensor against a constant 0/1 label."""
    return clamped_bce(prob, torch.full_like(prob, float(label)))


def xavier_init(module: nn.Module) -> nn.Module:
    """Xavier-uniform weights and zero biases on all linear/conv submodules."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


def zero_init(layer: nn.Linear) -> nn.Linear:
    """Zero weights and bias, making the layer output exactly zero."""
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def mlp(widths: tuple[int, ...], final_activation: nn.Module | None = None) -> nn.Sequential:
    """Linear stack with ReLU between layers and an optional final activation."""
    layers: list[nn.Module] = []
    for i in range(len(widths) - 1):
        layers.append(nn.Linear(widths[i], widths[i + 1]))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    if final_activation is not None:
        layers.append(final_activation)
    return nn.Sequential(*layers)
