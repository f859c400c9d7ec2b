"""Pairwise adversarial guidance.

Late in the reverse pass the edit-branch latent is nudged so the decoded face
moves away (in embedding space) from other photos of the same person, while a
perceptual term keeps it close to the source.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from masque.errors import DataError, EmptyGuideSet, IdentityNotInGallery, NonFiniteGradient

log = logging.getLogger(__name__)

DTYPE = torch.float64
AUGMENTATIONS = ("none", "hflip", "vflip", "translate")


@dataclass(frozen=True)
class AdvConfig:
    lambda_cosi: float = 0.1
    lambda_lpips: float = 1.0
    tau_adv: int = 45
    m_adv: int = 15
    step_size: float = 0.05


@dataclass(frozen=True)
class GuideSet:
    """Guide images of the source's identity, shape (G, H, W, 3)."""

    images: torch.Tensor
    mode: str = "none"
    source_used: bool = False
    seed: int | None = None
    shifts: tuple = ()
    max_shift: int = 20

    @property
    def G(self) -> int:
        return int(self.images.shape[0])

    def describe(self) -> dict:
        return {"G": self.G, "mode": self.mode, "source_used": self.source_used,
                "seed": self.seed, "shifts": [list(s) for s in self.shifts]}


def _image(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=DTYPE)


def shift_image(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Translate an (H, W, 3) image, replicating edge pixels into the gap."""
    h, w = x.shape[:2]
    rows = torch.clamp(torch.arange(h) - dy, 0, h - 1)
    cols = torch.clamp(torch.arange(w) - dx, 0, w - 1)
    return x[rows][:, cols]


def augment_guides(source, mode: str, seed: int = 0, count: int = 1, max_shift: int = 20) -> GuideSet:
    """Self-augmented guides built from the source image alone."""
    x = _image(source)
    if mode not in AUGMENTATIONS:
        raise DataError(f"unknown augmentation {mode!r}; expected one of {AUGMENTATIONS}")
    if mode == "none":
        return GuideSet(x.unsqueeze(0), "none", source_used=True, seed=seed)
    if mode == "hflip":
        return GuideSet(torch.stack([x.flip(1)] * count), mode, seed=seed)
    if mode == "vflip":
        return GuideSet(torch.stack([x.flip(0)] * count), mode, seed=seed)
    rng = np.random.default_rng(seed)
    shifts = [tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2)) for _ in range(count)]
    imgs = torch.stack([shift_image(x, dy, dx) for dy, dx in shifts])
    return GuideSet(imgs, mode, seed=seed, shifts=tuple(shifts), max_shift=max_shift)


def resolve_guides(source, guides=None, G: int = 1, augmentation: str = "none", seed: int = 0,
                   max_shift: int = 20) -> GuideSet:
    """Pick the guides actually used for one image.

    Supplied guide photos come first (at most G of them). With none available
    the source is augmented; with augmentation "none" the source itself serves
    as the guide, which is logged as a warning.
    """
    photos = [] if guides is None else list(_image(guides)) if torch.as_tensor(
        np.asarray(guides) if not torch.is_tensor(guides) else guides).dim() == 4 else [_image(guides)]
    if G > 0 and photos:
        return GuideSet(torch.stack(photos[:G]), "none", seed=seed)
    if augmentation != "none":
        return augment_guides(source, augmentation, seed, max(G, 1), max_shift)
    log.warning("no guide images and no augmentation; using the source image as its own guide")
    return augment_guides(source, "none", seed)


class AdversarialObjective:
    """L_adv = lambda_cosi * mean_g CoSi(x_p, guide_g) + lambda_lpips * Perc(x_p, x).

    ``source`` is (B, H, W, 3); ``guides`` is a list of B GuideSets or a
    (B, G, H, W, 3) tensor. Guide embeddings are computed once.
    """

    def __init__(self, source, guides, embedder, perceptual, cfg: AdvConfig):
        self.source = _image(source)
        if self.source.dim() == 3:
            self.source = self.source.unsqueeze(0)
        if isinstance(guides, GuideSet):
            guides = [guides]
        if isinstance(guides, (list, tuple)):
            if any(g.G == 0 for g in guides):
                raise EmptyGuideSet("guide set is empty and no augmentation is configured")
            counts = {g.G for g in guides}
            if len(counts) != 1:
                raise DataError("all images in a batch need the same number of guides")
            guides = torch.stack([g.images for g in guides])
        guides = _image(guides)
        if guides.dim() == 4:
            guides = guides.unsqueeze(0)
        if guides.shape[1] == 0:
            raise EmptyGuideSet("guide set is empty and no augmentation is configured")
        if guides.shape[0] != self.source.shape[0]:
            raise DataError(f"{guides.shape[0]} guide sets for {self.source.shape[0]} images")
        self.embedder = embedder
        self.perceptual = perceptual
        self.cfg = cfg
        b, g = guides.shape[:2]
        with torch.no_grad():
            self.guide_emb = embedder(guides.reshape(b * g, *guides.shape[2:])).reshape(b, g, -1)

    def terms(self, x_p: torch.Tensor):
        e = self.embedder(x_p)
        cosi = (e.unsqueeze(1) * self.guide_emb).sum(-1).mean(1)
        if self.cfg.lambda_lpips != 0:
            perc = self.perceptual(x_p, self.source)
        else:
            perc = torch.zeros_like(cosi)
        return cosi, perc

    def __call__(self, x_p: torch.Tensor) -> torch.Tensor:
        cosi, perc = self.terms(x_p)
        return self.cfg.lambda_cosi * cosi + self.cfg.lambda_lpips * perc


def adversarial_loss(x_p, x, guides, embedder, perceptual, cfg: AdvConfig) -> torch.Tensor:
    """Per-image adversarial loss (a 0-d tensor for a single image)."""
    x_p = _image(x_p) if not torch.is_tensor(x_p) else x_p
    single = x_p.dim() == 3
    obj = AdversarialObjective(x if not single else _image(x).unsqueeze(0), guides, embedder, perceptual, cfg)
    out = obj(x_p.unsqueeze(0) if single else x_p)
    return out[0] if single else out


def guidance_step(z: torch.Tensor, preview, objective, cfg: AdvConfig, latent_mask=None):
    """Up to ``cfg.m_adv`` normalised gradient steps on L_adv(preview(z)).

    ``preview`` maps a (B, C, h, w) latent to the images the loss sees. A step
    that does not lower an image's loss is rejected and that image's step size
    halved, so every per-image trace is non-increasing. Returns
    ``(z, trace)`` with ``trace`` of shape (B, iterations + 1).
    """
    z = z.detach()
    if cfg.m_adv == 0 or (cfg.lambda_cosi == 0 and cfg.lambda_lpips == 0):
        return z, torch.zeros(z.shape[0], 0, dtype=z.dtype)

    def loss_and_grad(z_):
        z_ = z_.detach().requires_grad_(True)
        with torch.enable_grad():
            losses = objective(preview(z_))
            (g,) = torch.autograd.grad(losses.sum(), z_)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("adversarial loss gradient is not finite")
        if latent_mask is not None:
            g = g * latent_mask
        return losses.detach(), g

    loss, grad = loss_and_grad(z)
    trace = [loss]
    step = torch.full((z.shape[0],), float(cfg.step_size), dtype=z.dtype)
    view = (-1,) + (1,) * (z.dim() - 1)
    for _ in range(cfg.m_adv):
        norm = grad.flatten(1).norm(dim=1)
        moving = norm > 0
        if not bool(moving.any()):
            break
        direction = grad / torch.where(moving, norm, torch.ones_like(norm)).view(view)
        cand = z - (step * moving).view(view) * direction
        c_loss, c_grad = loss_and_grad(cand)
        accept = (c_loss < loss) & moving
        z = torch.where(accept.view(view), cand, z)
        grad = torch.where(accept.view(view), c_grad, grad)
        loss = torch.where(accept, c_loss, loss)
        step = torch.where(accept, step, step / 2)
        trace.append(loss)
    return z.detach(), torch.stack(trace, dim=1)


def confidence_score(x_p, gallery, embedder, true_label: str) -> float:
    """Best impostor similarity minus true-identity similarity (> 0: dodged with margin)."""
    from masque.recognition.verification import rank_identities

    if true_label not in gallery:
        raise IdentityNotInGallery(true_label)
    if len(gallery) < 2:
        raise DataError("confidence score needs a gallery with at least two identities")
    with torch.no_grad():
        q = embedder(_image(x_p))
    ranked = rank_identities(q, gallery)
    true = next(s for label, s in ranked if label == true_label)
    other = next(s for label, s in ranked if label != true_label)
    return other - true
