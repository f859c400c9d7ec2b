"""Toy face-recognition feature extractors."""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from masque.diffusion.backend import DTYPE, atomic_torch_save, load_checkpoint, state_digest
from masque.errors import CheckpointError, DataError, ShapeMismatch, TrainingDiverged


@dataclass(frozen=True)
class EmbedderSpec:
    image_size: int = 32
    width: int = 32
    dim: int = 64
    seed: int = 0
    steps: int = 3000
    identities_per_batch: int = 16
    images_per_identity: int = 4
    lr: float = 1e-3
    pos_margin: float = 0.95
    neg_margin: float = 0.2
    noise: float = 0.02
    dataset: dict = field(default_factory=dict)


class FaceNet(nn.Module):
    def __init__(self, width=32, dim=64, image_size=32):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.AvgPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.AvgPool2d(2),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.AvgPool2d(2),
        )
        side = image_size // 8
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(2 * w * side * side, 128), nn.SiLU(), nn.Linear(128, dim))

    def forward(self, x):
        # x: (B, H, W, 3) in [0, 1]
        h = self.features((x.permute(0, 3, 1, 2) - 0.5) / 0.25)
        return F.normalize(self.head(h), dim=-1)


@dataclass(frozen=True)
class FaceEmbedding:
    vector: torch.Tensor  # unit norm
    embedder: str  # digest of the producing model


class FaceEmbedder:
    """Differentiable image -> unit-norm embedding."""

    def __init__(self, spec: EmbedderSpec, model: FaceNet | None = None, name: str = "toy"):
        self.spec = spec
        self.name = name
        if model is None:
            with torch.random.fork_rng():
                torch.manual_seed(spec.seed)
                model = FaceNet(spec.width, spec.dim, spec.image_size)
        self.model = model.to(DTYPE)
        self.model.eval()
        self.model.requires_grad_(False)
        self.image_shape = (spec.image_size, spec.image_size, 3)
        self._digest = None

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        """Batch (B, H, W, 3) or single (H, W, 3) -> unit vectors; differentiable."""
        x = torch.as_tensor(images, dtype=DTYPE) if not torch.is_tensor(images) else images.to(DTYPE)
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != self.image_shape:
            raise ShapeMismatch(f"image shape {tuple(x.shape[1:])} does not match embedder {self.image_shape}")
        e = self.model(x)
        return e[0] if single else e

    def embed_face(self, image) -> FaceEmbedding:
        with torch.no_grad():
            v = self(torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image))
        return FaceEmbedding(v, self.digest())

    def embed_batch(self, images, batch_size: int = 256) -> torch.Tensor:
        x = torch.as_tensor(np.ascontiguousarray(images) if not torch.is_tensor(images) else images, dtype=DTYPE)
        with torch.no_grad():
            return torch.cat([self(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])

    def digest(self) -> str:
        if self._digest is None:
            self._digest = state_digest(_spec_json(self.spec), self.model.state_dict())
        return self._digest

    def save(self, path: Union[str, os.PathLike], extra: dict | None = None) -> str:
        atomic_torch_save({"format": "masque-checkpoint/v1", "kind": "embedder", "name": self.name,
                           "spec": _spec_json(self.spec), "state": self.model.state_dict(),
                           "digest": self.digest(), "extra": extra or {}}, path)
        return self.digest()

    @classmethod
    def load(cls, path) -> "FaceEmbedder":
        payload = load_checkpoint(path, "embedder")
        emb = cls(EmbedderSpec(**payload["spec"]), name=payload.get("name", "toy"))
        emb.model.load_state_dict(payload["state"])
        emb._digest = None
        if emb.digest() != payload["digest"]:
            raise CheckpointError(f"{path}: content digest mismatch")
        emb.extra = payload.get("extra", {})
        return emb


def _spec_json(spec: EmbedderSpec) -> dict:
    return asdict(spec)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis."""
    return (F.normalize(a, dim=-1) * F.normalize(b, dim=-1)).sum(-1)


def train_toy_embedder(dataset, spec: EmbedderSpec, name: str = "toy"):
    """Margin-based contrastive training on identity-balanced batches.

    Genuine pairs are pushed above ``pos_margin`` cosine similarity and
    impostor pairs below ``neg_margin``. Returns ``(embedder, losses)``.
    """
    groups = dataset.by_identity()
    labels = sorted(groups)
    if len(labels) < 2 or any(len(groups[k]) < 2 for k in labels):
        raise DataError("embedder training needs >= 2 identities with >= 2 images each")
    images = [torch.tensor(np.stack([r.pixels for r in groups[k]]), dtype=torch.float32) for k in labels]

    emb = FaceEmbedder(spec, name=name)
    model = copy.deepcopy(emb.model).float()
    model.train()
    model.requires_grad_(True)
    gen = torch.Generator().manual_seed(spec.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
    P = min(spec.identities_per_batch, len(labels))
    K = spec.images_per_identity
    same = torch.block_diag(*[torch.ones(K, K)] * P).bool()
    eye = torch.eye(P * K).bool()
    losses = []
    for step in range(spec.steps):
        ids = torch.randperm(len(labels), generator=gen)[:P]
        batch = []
        for i in ids.tolist():
            pick = torch.randint(0, len(images[i]), (K,), generator=gen)
            batch.append(images[i][pick])
        x = torch.cat(batch)
        # photometric jitter
        x = x * (1 + 0.1 * (torch.rand(len(x), 1, 1, 1, generator=gen) - 0.5))
        x = (x + spec.noise * torch.rand(len(x), 1, 1, 1, generator=gen)
             * torch.randn(x.shape, generator=gen)).clamp(0, 1)
        e = model(x)
        sim = e @ e.T
        pos = F.relu(spec.pos_margin - sim[same & ~eye]).pow(2).mean()
        neg = F.relu(sim[~same] - spec.neg_margin).pow(2).mean()
        loss = pos + neg
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite embedder loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    emb.model.load_state_dict({k: v.detach().to(DTYPE) for k, v in model.state_dict().items()})
    emb._digest = None
    return emb, losses
