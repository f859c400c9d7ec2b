"""Verification, identification and threshold calibration."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from masque.errors import DataError, InsufficientPairs
from masque.recognition.embedder import cosine

MIN_IMPOSTOR_PAIRS = 100


@dataclass(frozen=True)
class VerificationThreshold:
    gamma: float
    far_level: float
    measured_far: float
    n_pairs: int
    calibration_digest: str
    embedder: str = ""

    def to_json(self) -> dict:
        return dict(self.__dict__)


def calibrate_from_similarities(similarities, far: float = 0.01, embedder: str = "") -> VerificationThreshold:
    """Smallest gamma with at most ``far`` of impostor similarities strictly above it."""
    s = np.sort(np.asarray(similarities, dtype=np.float64))[::-1]
    n = len(s)
    if n < MIN_IMPOSTOR_PAIRS:
        raise InsufficientPairs(f"need >= {MIN_IMPOSTOR_PAIRS} impostor pairs, got {n}")
    if not 0 <= far < 1:
        raise DataError(f"FAR level must lie in [0, 1), got {far}")
    allowed = math.floor(far * n + 1e-9)
    gamma = float(s[allowed])
    measured = float(np.count_nonzero(s > gamma)) / n
    digest = hashlib.sha256(s.tobytes()).hexdigest()
    return VerificationThreshold(gamma, far, measured, n, digest, embedder)


def calibrate_threshold(impostor_pairs, embedder, far: float = 0.01) -> VerificationThreshold:
    """``impostor_pairs``: sequence of (image_a, image_b) with distinct identities."""
    if len(impostor_pairs) < MIN_IMPOSTOR_PAIRS:
        raise InsufficientPairs(f"need >= {MIN_IMPOSTOR_PAIRS} impostor pairs, got {len(impostor_pairs)}")
    a = embedder.embed_batch(np.stack([p[0] for p in impostor_pairs]))
    b = embedder.embed_batch(np.stack([p[1] for p in impostor_pairs]))
    return calibrate_from_similarities(cosine(a, b).numpy(), far, embedder.digest())


def similarity(embedder, x_a, x_b) -> float:
    with torch.no_grad():
        return float(cosine(embedder(torch.as_tensor(x_a)), embedder(torch.as_tensor(x_b))))


def verify(x_p, x_g, threshold: VerificationThreshold, embedder) -> dict:
    s = similarity(embedder, x_p, x_g)
    return {"match": s > threshold.gamma, "similarity": s}


@dataclass
class Gallery:
    entries: dict = field(default_factory=dict)  # label -> (n, dim) tensor
    provenance: dict = field(default_factory=dict)  # label -> list of image ids

    def add(self, label: str, embeddings, source=None):
        e = torch.as_tensor(embeddings)
        if e.dim() == 1:
            e = e.unsqueeze(0)
        if len(e) == 0:
            raise DataError(f"identity {label!r} has no embeddings")
        prev = self.entries.get(label)
        self.entries[label] = e if prev is None else torch.cat([prev, e])
        self.provenance.setdefault(label, []).extend(source or [None] * len(e))

    @classmethod
    def from_images(cls, embedder, labels, images, sources=None) -> "Gallery":
        g = cls()
        emb = embedder.embed_batch(images)
        for i, label in enumerate(labels):
            g.add(label, emb[i], [sources[i]] if sources else None)
        return g

    @property
    def labels(self) -> list[str]:
        return sorted(self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, label):
        return label in self.entries

    def save(self, root):
        import json
        from pathlib import Path

        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        index = {}
        for k, label in enumerate(self.labels):
            name = f"{k:05d}.npy"
            np.save(root / name, self.entries[label].numpy())
            index[label] = {"file": name, "sources": self.provenance.get(label, [])}
        (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))

    @classmethod
    def load(cls, root) -> "Gallery":
        import json
        from pathlib import Path

        root = Path(root)
        index = json.loads((root / "index.json").read_text())
        g = cls()
        for label, meta in index.items():
            g.add(label, torch.as_tensor(np.load(root / meta["file"])), meta.get("sources"))
        return g


def rank_identities(query: torch.Tensor, gallery: Gallery) -> list[tuple[str, float]]:
    """All gallery identities by max similarity to ``query``; ties by label."""
    scores = []
    for label in gallery.labels:
        s = float(cosine(query.unsqueeze(0), gallery.entries[label]).max())
        scores.append((label, s))
    return sorted(scores, key=lambda p: (-p[1], p[0]))


def identify(x_p, gallery: Gallery, embedder, k: int = 1) -> list[tuple[str, float]]:
    if len(gallery) == 0:
        raise DataError("gallery is empty")
    if k < 1:
        raise DataError("k must be >= 1")
    with torch.no_grad():
        q = embedder(torch.as_tensor(x_p))
    return rank_identities(q, gallery)[:k]
