"""Channel attention: viewpoint-conditioned weights and the squeeze-excitation baseline."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ContractViolation(ValueError):
    pass


def attentive_weights(viewpoint: torch.Tensor, weight: torch.Tensor,
                      bias: torch.Tensor | None = None) -> torch.Tensor:
    """Per-channel gates ``sigmoid(V @ W)`` for one stage.

    ``viewpoint`` is ``(3,)`` or ``(B, 3)``; ``weight`` is ``(3, C)``.
    Returns ``(C,)`` or ``(B, C)`` respectively.
    """
    if viewpoint.shape[-1] != 3 or viewpoint.dim() not in (1, 2):
        raise ContractViolation(f"viewpoint must be (3,) or (B, 3), got {tuple(viewpoint.shape)}")
    if weight.dim() != 2 or weight.shape[0] != 3:
        raise ContractViolation(f"attention parameters must be (3, C), got {tuple(weight.shape)}")
    logits = viewpoint @ weight
    if bias is not None:
        logits = logits + bias
    return torch.sigmoid(logits)


def channel_reweight(features: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Scale every channel of ``features`` by its gate, broadcast over space.

    ``features`` is ``(C, H, W)`` with ``weights`` ``(C,)``, or ``(B, C, H, W)``
    with ``weights`` ``(B, C)``.
    """
    if features.dim() == 3 and weights.dim() == 1:
        c = features.shape[0]
    elif features.dim() == 4 and weights.dim() == 2 and weights.shape[0] == features.shape[0]:
        c = features.shape[1]
    else:
        raise ContractViolation(
            f"cannot reweight features {tuple(features.shape)} with weights {tuple(weights.shape)}")
    if weights.shape[-1] != c:
        raise ContractViolation(f"feature map has {c} channels but {weights.shape[-1]} weights given")
    return features * weights[..., :, None, None]


def se_weights(features: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor,
               w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    """Squeeze-excitation gates from a ``(B, C, H, W)`` map; ``w1`` is ``(r, C)``, ``w2`` is ``(C, r)``."""
    squeezed = features.mean(dim=(-2, -1))
    return torch.sigmoid(F.linear(F.relu(F.linear(squeezed, w1, b1)), w2, b2))


class ViewpointAttention(nn.Module):
    """One ``3 x C_i`` gate generator per backbone stage."""

    def __init__(self, stage_channels, bias: bool = False):
        super().__init__()
        self.stage_channels = list(stage_channels)
        self.weights = nn.ParameterList([nn.Parameter(torch.empty(3, c)) for c in self.stage_channels])
        if bias:
            self.biases = nn.ParameterList([nn.Parameter(torch.zeros(c)) for c in self.stage_channels])
        else:
            self.biases = None
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(3.0)
        for w in self.weights:
            nn.init.uniform_(w, -bound, bound)
        if self.biases is not None:
            for b in self.biases:
                nn.init.zeros_(b)

    def stage(self, viewpoint: torch.Tensor, index: int) -> torch.Tensor:
        bias = None if self.biases is None else self.biases[index]
        return attentive_weights(viewpoint, self.weights[index], bias)

    def forward(self, viewpoint: torch.Tensor) -> list[torch.Tensor]:
        return [self.stage(viewpoint, i) for i in range(len(self.weights))]


class SEBlock(nn.Module):
    """Squeeze-excitation gate generator; returns the weights, not the rescaled map."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return se_weights(features, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)
