"""The protection loop: dual-branch reverse diffusion with attention fusion,
edit-loss refinement, adversarial guidance and masked blending."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from masque.config import ProtectionConfig
from masque.diffusion.backend import DTYPE, DiffusionBackend
from masque.diffusion.text import normalize
from masque.editor.attention import FusionHook, PromptPair, edit_loss, in_horizon
from masque.editor.regions import RegionMask
from masque.errors import ConfigError, NonFiniteGradient, ShapeMismatch
from masque.guidance import AdversarialObjective, GuideSet, guidance_step
from masque.inversion import LatentTrajectory, invert, stack_trajectories
from masque.perceptual import get_metric

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProvenanceRecord:
    source_prompt: str
    edit_prompt: str
    region: str
    mask: list  # pixel mask rows, 0/1
    dilation: int
    config_digest: str
    seed: int
    inversion_rmse: float
    guides: dict
    edit_trace: dict = field(default_factory=dict)  # tau -> L_edit per refinement iteration
    adv_trace: list = field(default_factory=list)  # one L_adv trace per guided step
    adv_steps: list = field(default_factory=list)  # tau of each guided step
    similarity: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "source_prompt": self.source_prompt, "edit_prompt": self.edit_prompt,
            "region": self.region, "mask": self.mask, "dilation": self.dilation,
            "config_digest": self.config_digest, "seed": self.seed,
            "inversion_rmse": self.inversion_rmse, "guides": self.guides,
            "edit_trace": {str(k): v for k, v in self.edit_trace.items()},
            "adv_trace": self.adv_trace, "adv_steps": self.adv_steps,
            "similarity": self.similarity,
        }


def _mask_tensor(mask, shape) -> torch.Tensor:
    if isinstance(mask, RegionMask):
        mask = mask.latent_tensor()
    elif isinstance(mask, (list, tuple)):
        mask = np.stack([np.asarray(m) for m in mask])
    m = torch.as_tensor(mask, dtype=DTYPE)
    # (h, w) or (B, h, w) -> broadcast over channels
    if m.dim() in (2, 3) and m.dim() < len(shape):
        m = m.unsqueeze(-3)
    try:
        torch.broadcast_shapes(m.shape, shape)
    except RuntimeError:
        raise ShapeMismatch(f"mask {tuple(m.shape)} does not broadcast to latent {tuple(shape)}") from None
    return m


def blend_latents(z_edit: torch.Tensor, z_rec: torch.Tensor, mask) -> torch.Tensor:
    """M * z_edit + (1 - M) * z_rec with the latent mask broadcast over channels."""
    if z_edit.shape != z_rec.shape:
        raise ShapeMismatch(f"latents differ in shape: {tuple(z_edit.shape)} vs {tuple(z_rec.shape)}")
    m = _mask_tensor(mask, z_edit.shape)
    return m * z_edit + (1 - m) * z_rec


def _pixel_composite(x_edit, x_rec, m_pix):
    return m_pix * x_edit + (1 - m_pix) * x_rec


class _Capture:
    """Hook that keeps the (differentiable) edit-branch maps, optionally fusing."""

    def __init__(self, fusion=None):
        self.fusion = fusion
        self.maps = {}

    def __call__(self, layer, probs):
        self.maps[layer] = probs
        return self.fusion(layer, probs) if self.fusion is not None else probs


def refine_latent_for_edit(backend: DiffusionBackend, z_edit: torch.Tensor, tau: int, cond_edit, rec_maps: dict,
                           masks, pair: PromptPair, step_size: float = 0.05, iters: int = 5,
                           fusion=None):
    """Normalised gradient steps on L_edit w.r.t. the edit-branch latent.

    A step that does not lower an image's loss is rejected and its step size
    halved. Returns ``(z, trace)`` with ``trace`` (B, iters + 1), or an empty
    trace when nothing is optimised.
    """
    z = z_edit.detach()
    if iters == 0 or not pair.new_tokens:
        return z, torch.zeros(z.shape[0], 0, dtype=z.dtype)
    ctx = backend._ctx(cond_edit, z.shape[0])
    res = {layer: backend.attention_resolution(layer) for layer in backend.attention_layers}
    m_lat = _mask_tensor([m.latent for m in masks], z.shape)

    def loss_and_grad(z_):
        z_ = z_.detach().requires_grad_(True)
        cap = _Capture(fusion)
        with torch.enable_grad():
            backend.eps(z_, tau, ctx, cap)
            losses = edit_loss(cap.maps, rec_maps, masks, pair, res)
            (g,) = torch.autograd.grad(losses.sum(), z_)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"edit loss gradient is not finite at step {tau}")
        return losses.detach(), g * m_lat

    loss, grad = loss_and_grad(z)
    trace = [loss]
    step = torch.full((z.shape[0],), float(step_size), dtype=z.dtype)
    view = (-1, 1, 1, 1)
    for _ in range(iters):
        norm = grad.flatten(1).norm(dim=1)
        moving = norm > 0
        if not bool(moving.any()):
            trace.append(loss)
            continue
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


@dataclass
class ProtectionResult:
    images: np.ndarray  # (B, H, W, 3) protected, clipped to [0, 1]
    reconstructions: np.ndarray  # reconstruction branch, same clipping
    records: list


def protect_batch(backend: DiffusionBackend, images, edit_prompt: str, masks, guides, cfg: ProtectionConfig,
                  embedder=None, perceptual=None, trajectories=None, source_prompt: str | None = None,
                  progress=None) -> ProtectionResult:
    """Protect a batch of images that share the source and edit prompts.

    ``masks`` holds one RegionMask per image and ``guides`` one GuideSet per
    image. Trajectories are computed when not supplied.
    """
    if cfg.T != backend.schedule.T:
        raise ConfigError(f"config T = {cfg.T} but the backend schedule has T = {backend.schedule.T}")
    x = torch.as_tensor(np.asarray(images), dtype=DTYPE)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    b = x.shape[0]
    masks = list(masks)
    if len(masks) != b:
        raise ShapeMismatch(f"{len(masks)} masks for {b} images")
    source_prompt = source_prompt or cfg.source_prompt
    if trajectories is None:
        trajectories = invert(backend, x, source_prompt, cfg.inversion_steps, cfg.inversion_lr, cfg.guidance_scale)
    if len(trajectories) != b or any(normalize(t.prompt) != normalize(source_prompt) for t in trajectories):
        raise ShapeMismatch("trajectories do not match the images / source prompt")
    latents, nulls = stack_trajectories(trajectories)
    T, s = cfg.T, cfg.guidance_scale

    cond_p = backend.embed_text(source_prompt)
    cond_e = backend.embed_text(edit_prompt)
    pair = PromptPair.build(cond_p, cond_e)
    m_lat = _mask_tensor([m.latent for m in masks], latents[-1].shape)
    m_pix = torch.as_tensor(np.stack([m.pixel for m in masks]), dtype=DTYPE).unsqueeze(-1)

    adv = cfg.adv
    adv_on = adv.m_adv > 0 and (adv.lambda_cosi != 0 or adv.lambda_lpips != 0)
    objective = None
    if adv_on:
        if embedder is None:
            raise ConfigError("adversarial guidance needs an embedder")
        perceptual = perceptual or get_metric(cfg.perceptual)
        objective = AdversarialObjective(x, guides, embedder, perceptual, adv)

    edit_traces = [dict() for _ in range(b)]
    adv_traces = [[] for _ in range(b)]
    adv_steps = []

    z_rec = latents[-1].clone()
    z_edit = latents[-1].clone()
    for tau in range(T, 0, -1):
        null = nulls[tau - 1]
        eps_rec, rec = backend.predict_noise(z_rec, tau, cond_p, null, s, record_attention=True)
        rec_maps = rec.at(tau)
        hook = FusionHook(rec_maps, pair) if in_horizon(tau, T, cfg.tau_attn) else None

        if in_horizon(tau, T, cfg.tau_edit):
            z_edit, tr = refine_latent_for_edit(backend, z_edit, tau, cond_e, rec_maps, masks, pair,
                                                cfg.edit_step, cfg.edit_iters, hook)
            if tr.shape[1]:
                for i in range(b):
                    edit_traces[i][tau] = tr[i].tolist()

        if adv_on and tau <= T - cfg.tau_adv:
            with torch.no_grad():
                x_rec = backend.decode_latent(backend.schedule.predict_z0(z_rec, eps_rec, tau))

            def preview(z, tau=tau, null=null, hook=hook, x_rec=x_rec):
                e, _ = backend.predict_noise(z, tau, cond_e, null, s, hook=hook)
                x0 = backend.decode_latent(backend.schedule.predict_z0(z, e, tau))
                return _pixel_composite(x0, x_rec, m_pix)

            z_edit, tr = guidance_step(z_edit, preview, objective, adv, m_lat)
            adv_steps.append(tau)
            for i in range(b):
                adv_traces[i].append(tr[i].tolist())

        with torch.no_grad():
            eps_edit, _ = backend.predict_noise(z_edit, tau, cond_e, null, s, hook=hook)
            z_rec = backend.ddim_step(z_rec, eps_rec, tau, tau - 1)
            z_edit = backend.ddim_step(z_edit, eps_edit, tau, tau - 1)
            z_edit = blend_latents(z_edit, z_rec, m_lat)
        if progress is not None:
            progress(tau)

    with torch.no_grad():
        x_rec = backend.decode_latent(z_rec)
    if adv_on and 0 <= T - cfg.tau_adv:
        z_edit, tr = guidance_step(z_edit, lambda z: _pixel_composite(backend.decode_latent(z), x_rec, m_pix),
                                   objective, adv, m_lat)
        adv_steps.append(0)
        for i in range(b):
            adv_traces[i].append(tr[i].tolist())
        z_edit = blend_latents(z_edit, z_rec, m_lat)

    with torch.no_grad():
        out = _pixel_composite(backend.decode_latent(z_edit), x_rec, m_pix).clamp(0, 1)
        rec_img = x_rec.clamp(0, 1)
        sims = {}
        if embedder is not None:
            g = torch.stack([gs.images for gs in guides])
            ge = embedder(g.reshape(-1, *g.shape[2:])).reshape(b, g.shape[1], -1)
            for name, img in (("source", x), ("protected", out)):
                sims[name] = ((embedder(img).unsqueeze(1) * ge).sum(-1).mean(1)).tolist()

    digest = cfg.digest()
    records = []
    for i in range(b):
        records.append(ProvenanceRecord(
            source_prompt=cond_p.prompt, edit_prompt=cond_e.prompt, region=masks[i].label,
            mask=masks[i].pixel.astype(int).tolist(), dilation=masks[i].dilation,
            config_digest=digest, seed=cfg.seed, inversion_rmse=float(trajectories[i].rmse),
            guides=guides[i].describe() if isinstance(guides[i], GuideSet) else {},
            edit_trace=edit_traces[i], adv_trace=adv_traces[i], adv_steps=list(adv_steps),
            similarity={"embedder": getattr(embedder, "name", None),
                        "guides_source": sims.get("source", [None] * b)[i],
                        "guides_protected": sims.get("protected", [None] * b)[i]},
        ))
    return ProtectionResult(out.numpy(), rec_img.numpy(), records)


def generate_protected(backend: DiffusionBackend, image, edit_prompt: str, mask: RegionMask, guides: GuideSet,
                       cfg: ProtectionConfig, embedder=None, perceptual=None,
                       trajectory: LatentTrajectory | None = None, source_prompt: str | None = None):
    """Single-image form of :func:`protect_batch`; returns ``(image, ProvenanceRecord)``."""
    res = protect_batch(backend, np.asarray(image)[None], edit_prompt, [mask], [guides], cfg, embedder,
                        perceptual, None if trajectory is None else [trajectory], source_prompt)
    return res.images[0], res.records[0]
