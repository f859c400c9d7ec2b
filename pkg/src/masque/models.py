"""Bundled toy checkpoints.

``diffusion.pt`` is the latent diffusion model trained on captioned synthetic
faces. ``embedder_a.pt`` is the white-box recogniser the guidance attacks and
``embedder_b.pt`` an independently trained recogniser (different seed and
width) used to measure transfer. Both embedders were trained on
``faces.generate(200, 8, seed=11, identity_seed=0)``.
"""
from __future__ import annotations

from importlib import resources

from masque.errors import ConfigError

BUNDLED = {"diffusion": "diffusion.pt", "A": "embedder_a.pt", "B": "embedder_b.pt"}


def bundled_path(name: str) -> str:
    if name not in BUNDLED:
        raise ConfigError(f"no bundled model {name!r}; known: {sorted(BUNDLED)}")
    return str(resources.files("masque") / "data" / BUNDLED[name])


def load_diffusion(path: str | None = None):
    from masque.diffusion.backend import ToyBackend

    return ToyBackend.load(path or bundled_path("diffusion"))


def load_embedder(path_or_role: str | None = "A"):
    """Load an embedder checkpoint; ``"A"``/``"B"`` (or None for A) pick a bundled one."""
    from masque.recognition.embedder import FaceEmbedder

    if path_or_role in (None, "", "A", "B"):
        return FaceEmbedder.load(bundled_path(path_or_role or "A"))
    return FaceEmbedder.load(path_or_role)
