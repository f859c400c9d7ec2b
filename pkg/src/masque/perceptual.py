"""Perceptual image distances.

The toy stack has no pretrained perceptual network, so the default metric
compares unit-normalised activations of a fixed random convolutional
network (weights drawn from a seeded generator). It is deterministic,
differentiable and zero exactly when the two images are equal. Anything
with the same call signature, for example a real LPIPS model, can be
registered instead.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

DTYPE = torch.float64


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    return x.unsqueeze(0) if x.dim() == 3 else x


class RandomFeatureDistance:
    """LPIPS-style distance over features of a seeded random conv net.

    Called as ``metric(a, b)`` on (B, H, W, 3) or (H, W, 3) images in [0, 1];
    returns one distance per image (a 0-d tensor for single images).
    """

    name = "random-conv"

    def __init__(self, channels=(16, 32, 32), seed: int = 1234):
        gen = torch.Generator().manual_seed(seed)
        self.weights = []
        c_in = 3
        for c in channels:
            w = torch.randn(c, c_in, 3, 3, generator=gen, dtype=DTYPE) / (3 * c_in) ** 0.5
            self.weights.append(w)
            c_in = c

    def features(self, x: torch.Tensor) -> list:
        h = (x.permute(0, 3, 1, 2) - 0.5) / 0.25
        feats = []
        for i, w in enumerate(self.weights):
            h = F.conv2d(h, w, padding=1, stride=1 if i == 0 else 2)
            h = F.leaky_relu(h, 0.2)
            feats.append(h)
        return feats

    def __call__(self, a, b) -> torch.Tensor:
        single = torch.as_tensor(a).dim() == 3
        fa = self.features(_as_batch(a))
        fb = self.features(_as_batch(b))
        d = 0
        for x, y in zip(fa, fb):
            # unit-normalise along channels; eps keeps the gradient finite at 0
            nx = x / (x.pow(2).sum(1, keepdim=True) + 1e-10).sqrt()
            ny = y / (y.pow(2).sum(1, keepdim=True) + 1e-10).sqrt()
            # uniform per-channel weights in place of LPIPS' learned linear layer
            d = d + (nx - ny).pow(2).mean(1).mean((-2, -1))
        return d[0] if single else d


_REGISTRY = {"random-conv": RandomFeatureDistance}


def register_metric(name: str, factory):
    _REGISTRY[name] = factory


def get_metric(name: str = "random-conv"):
    from masque.errors import ConfigError
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ConfigError(f"unknown perceptual metric {name!r}; known: {sorted(_REGISTRY)}") from None


def registered_metrics() -> list[str]:
    return sorted(_REGISTRY)
