"""Xavier (Glorot) uniform initialisation."""
from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn


def fans(shape: Sequence[int]) -> tuple[int, int]:
    """``(fan_in, fan_out)`` of a weight tensor laid out ``(out, in, *kernel)``."""
    shape = tuple(shape)
    if len(shape) < 2:
        raise ValueError(f"weight needs at least 2 dims, got {shape}")
    receptive = math.prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


def xavier_bound(shape: Sequence[int]) -> float:
    fan_in, fan_out = fans(shape)
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape: Sequence[int], seed=None, dtype=torch.float32) -> torch.Tensor:
    """Uniform draw on ``[-b, b]`` with ``b = sqrt(6 / (fan_in + fan_out))``.

    ``seed`` may be an int or a ``torch.Generator``.  One-dimensional shapes
    are biases and come back as zeros.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        return torch.zeros(shape, dtype=dtype)
    gen = seed
    if not isinstance(seed, torch.Generator):
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
    b = xavier_bound(shape)
    return (torch.rand(shape, generator=gen, dtype=dtype) * 2.0 - 1.0) * b


@torch.no_grad()
def init_module(module: nn.Module, seed: int = 0) -> nn.Module:
    """Xavier weights and zero biases for every conv / linear layer, in registration order."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            m.weight.copy_(xavier_init(m.weight.shape, gen, m.weight.dtype))
            if m.bias is not None:
                m.bias.zero_()
    return module
