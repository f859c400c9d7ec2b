"""Prompt-to-region matching and region masks."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from masque.errors import DataError, MaskVanished
from masque.faces import REGIONS, rasterize

# one fixed sentence per region, in tie-break order
REGION_DESCRIPTORS = {
    "lips": "lipstick or lip gloss applied to the lips and mouth",
    "eyebrows": "colour applied to the eyebrows and brows",
    "eyes": "eyeshadow and eyeliner applied around the eyes and eyelids",
    "cheeks": "blush or rouge applied to the cheeks",
    "skin": "full face makeup, foundation, tan or face paint covering the skin",
}

# concept lexicon of the bundled encoder; a word may name at most one region
_CONCEPTS = {
    "lips": ("lip", "lips", "lipstick", "gloss", "mouth", "lipliner"),
    "eyebrows": ("eyebrow", "eyebrows", "brow", "brows"),
    "eyes": ("eye", "eyes", "eyeshadow", "eyeliner", "eyelid", "eyelids", "lash", "lashes", "mascara", "smoky"),
    "cheeks": ("cheek", "cheeks", "blush", "rouge", "rosy", "blusher"),
    "skin": ("skin", "foundation", "tan", "tanned", "pale", "clown", "paint", "full", "whole",
             "complexion", "freckles", "glowing", "bronzer", "covering"),
}
_STOP = {"a", "an", "the", "with", "and", "or", "of", "to", "on", "applied", "face", "makeup",
         "around", "colour", "color"}


class SentenceEncoder:
    """Bundled deterministic sentence encoder.

    Features: a region-concept bag from a fixed lexicon, hashed word unigrams
    and hashed character trigrams. Output rows are unit-normalised.
    """

    dim_hash = 256

    def _words(self, text):
        return [w for w in re.findall(r"[a-z]+", text.lower()) if w not in _STOP]

    def _bucket(self, token: str) -> int:
        return int.from_bytes(hashlib.sha256(token.encode()).digest()[:4], "little") % self.dim_hash

    def encode(self, sentences) -> np.ndarray:
        out = []
        for s in sentences:
            concept = np.zeros(len(REGIONS))
            hashed = np.zeros(self.dim_hash)
            for w in self._words(s):
                for k, region in enumerate(REGIONS):
                    if w in _CONCEPTS[region]:
                        concept[k] += 1.0
                hashed[self._bucket("w:" + w)] += 0.5
                padded = f"#{w}#"
                for i in range(len(padded) - 2):
                    hashed[self._bucket("c:" + padded[i:i + 3])] += 0.1
            v = np.concatenate([3.0 * concept, hashed])
            n = np.linalg.norm(v)
            out.append(v / n if n > 0 else v)
        return np.stack(out)


class SentenceTransformerEncoder:
    """Adapter for a locally available sentence-transformers model."""

    def __init__(self, model_name_or_path: str):
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(model_name_or_path)

    def encode(self, sentences) -> np.ndarray:
        return np.asarray(self.model.encode(list(sentences), normalize_embeddings=True), dtype=np.float64)


def match_region(edit_prompt: str, encoder=None, descriptors: dict | None = None) -> str:
    """Region whose descriptor sentence is most similar to the prompt.

    Ties go to the earlier region in (lips, eyebrows, eyes, cheeks, skin); a
    prompt with no similarity to any descriptor falls back to skin.
    """
    if not edit_prompt.strip():
        raise DataError("edit prompt is empty")
    encoder = encoder or SentenceEncoder()
    descriptors = descriptors or REGION_DESCRIPTORS
    labels = list(descriptors)
    emb = encoder.encode([edit_prompt] + [descriptors[r] for r in labels])
    sims = emb[1:] @ emb[0]
    if not np.any(sims > 0):
        return "skin"
    order = sorted(range(len(labels)), key=lambda k: (-round(float(sims[k]), 12), k))
    return labels[order[0]]


@dataclass(frozen=True)
class RegionMask:
    label: str
    pixel: np.ndarray  # (H, W) bool
    latent: np.ndarray  # (h, w) bool
    dilation: int = 0

    @property
    def area(self) -> int:
        return int(self.latent.sum())

    def pixel_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.pixel, dtype=dtype)

    def latent_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.latent, dtype=dtype)

    def at_resolution(self, h: int, w: int) -> torch.Tensor:
        """Max-pool the latent mask to (h, w)."""
        m = self.latent_tensor()[None, None]
        if m.shape[-2:] == (h, w):
            return m[0, 0]
        return F.adaptive_max_pool2d(m, (h, w))[0, 0]

    @classmethod
    def full(cls, shape, patch: int = 2, label: str = "skin") -> "RegionMask":
        pix = np.ones(shape, dtype=bool)
        return cls(label, pix, downsample(pix, patch))

    @classmethod
    def from_pixels(cls, pixel, patch: int = 2, label: str = "custom") -> "RegionMask":
        pixel = np.asarray(pixel, dtype=bool)
        return cls(label, pixel, downsample(pixel, patch))


def downsample(pixel: np.ndarray, patch: int) -> np.ndarray:
    h, w = pixel.shape
    return pixel.reshape(h // patch, patch, w // patch, patch).any(axis=(1, 3))


def build_mask(face_meta: dict, region: str, min_area: int = 4, patch: int = 2,
               max_dilations: int = 10, size: int | None = None) -> RegionMask:
    """Rasterise the region polygons; dilate while the latent mask is too small.

    ``face_meta`` maps region label -> list of polygons in pixel coordinates
    (the ``polygons`` entry of a dataset sidecar).
    """
    if region not in face_meta:
        raise DataError(f"no geometry for region {region!r}")
    kwargs = {} if size is None else {"size": size}
    pixel = rasterize(face_meta[region], **kwargs)
    dilations = 0
    while downsample(pixel, patch).sum() < min_area and dilations < max_dilations:
        if not pixel.any():
            break
        pixel = ndimage.binary_dilation(pixel, structure=np.ones((3, 3), dtype=bool))
        dilations += 1
    latent = downsample(pixel, patch)
    if not latent.any():
        raise MaskVanished(f"mask for {region!r} is empty after {dilations} dilations")
    return RegionMask(region, pixel, latent, dilations)
