"""Hand-built 10-record evaluation fixture with a pixel-vector embedder."""
import numpy as np
import torch

from masque.evaluation import EvalRecord
from masque.recognition.verification import Gallery, VerificationThreshold

RED, BLUE = (0.9, 0.05, 0.05), (0.05, 0.1, 0.9)


class PixelEmbedder:
    """Embedding = the flattened, L2-normalized image."""

    def embed_batch(self, images):
        x = torch.as_tensor(np.ascontiguousarray(images), dtype=torch.float64).flatten(1)
        return x / x.norm(dim=1, keepdim=True)

    def __call__(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        if x.dim() == 3:
            return self.embed_batch(x[None])[0]
        return self.embed_batch(x)

    def digest(self):
        return "pixel"


def threshold(gamma):
    return VerificationThreshold(gamma, 0.01, 0.0, 100, "")


def build(seed=0):
    """Records with protected images, a gallery with two photos per identity
    plus an external target 'tgt', the embedder and the raw (label, image)
    gallery pairs for the brute-force references."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((16, 16), bool)
    mask[4:10, 4:12] = True
    records, gallery_imgs, labels = [], [], []
    for k in range(10):
        probe = rng.uniform(0.2, 0.8, (16, 16, 3))
        gal = np.clip(probe + rng.normal(0, 0.05 + 0.04 * k, probe.shape), 0, 1)
        guide = np.clip(probe + rng.normal(0, 0.05, probe.shape), 0, 1)
        prot = probe.copy()
        prot[mask] = RED if k % 3 else BLUE
        if k == 7:
            prot[mask] = probe[mask]  # untouched record
        if k == 8:
            prot[0, 0] += 0.2  # change outside the mask only
        rec = EvalRecord(f"id{k}", probe, guide, gal, mask.copy(), "red lipstick", np.clip(prot, 0, 1))
        records.append(rec)
        gallery_imgs += [gal, guide]
        labels += [rec.identity] * 2
    target = np.mean([records[k].protected for k in (0, 1, 4)], axis=0)
    gallery_imgs.append(target)
    labels.append("tgt")
    emb = PixelEmbedder()
    gallery = Gallery()
    e = emb.embed_batch(np.stack(gallery_imgs))
    for label, v in zip(labels, e):
        gallery.add(label, v)
    return records, gallery, emb, list(zip(labels, gallery_imgs))


# -- brute-force references --------------------------------------------------------

def _cos(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    return float(a @ b / np.sqrt(a @ a) / np.sqrt(b @ b))


def ref_dsr_verification(records, gamma):
    dodged = 0
    for r in records:
        if not _cos(r.protected, r.gallery) > gamma:
            dodged += 1
    return dodged / len(records)


def _ranking(query, gallery_pairs):
    best = {}
    for label, img in gallery_pairs:
        best[label] = max(best.get(label, -2.0), _cos(query, img))
    return sorted(best, key=lambda l: (-best[l], l))


def ref_dsr_rank(records, gallery_pairs, k):
    miss = 0
    for r in records:
        if r.identity not in _ranking(r.protected, gallery_pairs)[:k]:
            miss += 1
    return miss / len(records)


def ref_isr(records, gallery_pairs, target):
    hits = 0
    for r in records:
        if _ranking(r.protected, gallery_pairs)[0] == target:
            hits += 1
    return hits / len(records)


def ref_concentration(x_p, x, mask):
    import math

    inside, total = [], []
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            d = sum(abs(float(x_p[i, j, c]) - float(x[i, j, c])) for c in range(3))
            total.append(d)
            if mask[i, j]:
                inside.append(d)
    return 1.0 if math.fsum(total) == 0 else math.fsum(inside) / math.fsum(total)


def ref_hue_accuracy(x_p, x, mask, lo, hi, thr=0.02):
    import colorsys

    n = good = 0
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            if not mask[i, j]:
                continue
            if sum(abs(float(x_p[i, j, c]) - float(x[i, j, c])) for c in range(3)) <= thr:
                continue
            n += 1
            h = colorsys.rgb_to_hsv(*[float(v) for v in x_p[i, j]])[0] * 360
            if (h - lo) % 360 <= (hi - lo) % 360:
                good += 1
    return 0.0 if n == 0 else good / n


def ref_localization_mse(x_p, x, mask):
    m = mask.astype(float)[..., None]
    frac = mask.mean()
    d_in = np.mean((x_p * m - x * m) ** 2) / frac
    d_out = np.mean((x_p * (1 - m) - x * (1 - m)) ** 2) / (1 - frac)
    return d_in - d_out
