"""Experiment plumbing shared by the CLI and the acceptance suite.

Turns a synthetic face set into evaluation records (probe, guide, gallery per
identity), calibrates thresholds on impostor pairs and protects records in
batches.
"""
from __future__ import annotations

import numpy as np
import torch

from masque.config import ProtectionConfig
from masque.editor.pipeline import protect_batch
from masque.editor.regions import build_mask, match_region
from masque.errors import DataError
from masque.evaluation import EvalRecord
from masque.guidance import resolve_guides
from masque.inversion import invert
from masque.recognition.embedder import cosine
from masque.recognition.verification import Gallery, calibrate_from_similarities

PROBE, GUIDE, GALLERY = 0, 1, 2


def build_records(dataset, prompt: str, limit: int | None = None, min_area: int = 4) -> list[EvalRecord]:
    """One record per identity: render 0 is the probe, 1 the guide, 2 the gallery photo.

    Renders 3.. are kept as extra guide photos (``record.extra_guides``).
    """
    region = match_region(prompt)
    groups = dataset.by_identity()
    records = []
    for label in sorted(groups)[:limit]:
        renders = groups[label]
        if len(renders) < 3:
            raise DataError(f"identity {label} has {len(renders)} images; need probe, guide and gallery")
        mask = build_mask(renders[PROBE].polygons, region, min_area)
        rec = EvalRecord(label, renders[PROBE].pixels, renders[GUIDE].pixels, renders[GALLERY].pixels,
                         mask.pixel.astype(bool), prompt)
        rec.region_mask = mask
        rec.extra_guides = [r.pixels for r in renders[3:]]
        records.append(rec)
    return records


def guide_photos(record: EvalRecord, G: int) -> np.ndarray | None:
    photos = [record.guide] + list(getattr(record, "extra_guides", []))
    if G > len(photos):
        raise DataError(f"identity {record.identity} has {len(photos)} guide photos, G = {G}")
    return np.stack(photos[:G]) if G else None


def build_gallery(records, embedder) -> Gallery:
    return Gallery.from_images(embedder, [r.identity for r in records], np.stack([r.gallery for r in records]))


def impostor_pairs(labels, n_pairs: int = 1000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j) with different labels, drawn uniformly with a seeded generator."""
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise DataError("impostor pairs need at least two identities")
    rng = np.random.default_rng(seed)
    ii, jj = [], []
    while len(ii) < n_pairs:
        i = rng.integers(0, len(labels), 4 * n_pairs)
        j = rng.integers(0, len(labels), 4 * n_pairs)
        keep = labels[i] != labels[j]
        ii.extend(i[keep].tolist())
        jj.extend(j[keep].tolist())
    return np.array(ii[:n_pairs]), np.array(jj[:n_pairs])


def calibrate_on_dataset(embedder, dataset, far: float = 0.01, n_pairs: int = 1000, seed: int = 0):
    labels = [r.identity_label for r in dataset.renders]
    i, j = impostor_pairs(labels, n_pairs, seed)
    e = embedder.embed_batch(dataset.images())
    return calibrate_from_similarities(cosine(e[i], e[j]).numpy(), far, embedder.digest())


def protect_records(backend, records, cfg: ProtectionConfig, embedder, trajectories=None, perceptual=None,
                    batch_size: int = 10, guide_seed: int | None = None, use_photos: bool = True):
    """Protect every record in place (sets ``record.protected``).

    ``use_photos=False`` ignores the guide photos so that guides come from
    augmenting the probe. Returns ``(reconstructions, provenance records,
    trajectories)``.
    """
    records = list(records)
    prompt = records[0].prompt
    if any(r.prompt != prompt for r in records):
        raise DataError("protect_records expects one edit prompt per call")
    if trajectories is None:
        trajectories = []
        for k in range(0, len(records), batch_size):
            chunk = np.stack([r.probe for r in records[k:k + batch_size]])
            trajectories += invert(backend, chunk, cfg.source_prompt, cfg.inversion_steps, cfg.inversion_lr,
                                   cfg.guidance_scale)
    seed = cfg.seed if guide_seed is None else guide_seed
    recs, prov = [], []
    for k in range(0, len(records), batch_size):
        chunk = records[k:k + batch_size]
        guides = [resolve_guides(r.probe, guide_photos(r, cfg.G) if use_photos else None, cfg.G, cfg.augmentation, seed + k + q,
                                 cfg.max_shift) for q, r in enumerate(chunk)]
        res = protect_batch(backend, np.stack([r.probe for r in chunk]), prompt,
                            [r.region_mask for r in chunk], guides, cfg, embedder, perceptual,
                            trajectories[k:k + batch_size])
        for r, img in zip(chunk, res.images):
            r.protected = img
        recs.append(res.reconstructions)
        prov += res.records
    return np.concatenate(recs), prov, trajectories


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed)
