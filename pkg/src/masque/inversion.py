"""DDIM inversion followed by per-step null-text optimisation."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from masque.diffusion.backend import DTYPE, DiffusionBackend, atomic_torch_save
from masque.errors import DataError

log = logging.getLogger(__name__)

TRAJECTORY_FORMAT = "masque-trajectory/v1"


@dataclass
class RawTrajectory:
    """Latents z_0..z_T from plain DDIM inversion (batched over images)."""

    prompt: str
    latents: list  # T+1 tensors of shape (B, C, h, w), index = grid level
    eps: list  # noise estimate used for each inverse step 0->1, ..., T-1->T

    @property
    def T(self):
        return len(self.latents) - 1


@dataclass
class LatentTrajectory:
    """Inverted latents of one image plus the null embedding for each reverse step."""

    prompt: str
    latents: torch.Tensor  # (T+1, C, h, w)
    null_embeddings: torch.Tensor  # (T, tokens, dim); row tau-1 is used by the step tau -> tau-1
    guidance_scale: float
    rmse: float
    metadata: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.latents.shape[0] - 1

    @property
    def z_T(self) -> torch.Tensor:
        return self.latents[-1]

    def null_at(self, tau: int) -> torch.Tensor:
        return self.null_embeddings[tau - 1]

    def save(self, path, config_digest: str | None = None):
        atomic_torch_save({
            "format": TRAJECTORY_FORMAT,
            "prompt": self.prompt,
            "grid": list(range(self.T + 1)),
            "latents": self.latents,
            "null_embeddings": self.null_embeddings,
            "guidance_scale": self.guidance_scale,
            "rmse": self.rmse,
            "metadata": self.metadata,
            "config_digest": config_digest,
        }, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LatentTrajectory":
        try:
            d = torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError, EOFError) as e:
            raise DataError(f"cannot read trajectory {path}: {e}") from e
        if not isinstance(d, dict) or d.get("format") != TRAJECTORY_FORMAT:
            raise DataError(f"{path} is not a {TRAJECTORY_FORMAT} file")
        return cls(d["prompt"], d["latents"], d["null_embeddings"], d["guidance_scale"], d["rmse"],
                   d.get("metadata", {}))


def _batch_images(backend, images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images, dtype=DTYPE)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return x


def _anderson(g, x0: torch.Tensor, iters: int, tol: float, depth: int = 5) -> torch.Tensor:
    """Solve x = g(x) per batch element with Anderson acceleration."""
    xs, gs = [], []
    x = x0
    for _ in range(iters):
        gx = g(x)
        res = (gx - x).flatten(1)
        if float(res.pow(2).mean(1).sqrt().max()) < tol:
            return gx
        xs.append(x.flatten(1))
        gs.append(gx.flatten(1))
        xs, gs = xs[-depth:], gs[-depth:]
        if len(xs) == 1:
            x = gx
            continue
        G = torch.stack(gs, -1)
        F = G - torch.stack(xs, -1)
        # normal equations with a tiny ridge (the batched LAPACK least-squares
        # driver is not bitwise reproducible across memory layouts); the 1e-300
        # term keeps the system solvable once the differences vanish
        dF = F[..., 1:] - F[..., :-1]
        gram = dF.transpose(-1, -2) @ dF
        ridge = 1e-12 * gram.diagonal(dim1=-2, dim2=-1).sum(-1)[..., None, None] / gram.shape[-1]
        eye = torch.eye(gram.shape[-1], dtype=gram.dtype)
        coef = torch.linalg.solve(gram + ridge * eye + 1e-300 * eye, dF.transpose(-1, -2) @ F[..., -1:])
        x = (G[..., -1] - ((G[..., 1:] - G[..., :-1]) @ coef)[..., 0]).view_as(x0)
    return g(x)


@torch.no_grad()
def ddim_invert(backend: DiffusionBackend, images, prompt: str, fixed_point_iters: int = 50,
                fixed_point_tol: float = 1e-10) -> RawTrajectory:
    """Map images to z_T along the deterministic DDIM path.

    Each inverse step tau -> tau+1 uses the unguided conditional noise estimate
    at level tau+1. With ``fixed_point_iters = 0`` that estimate is taken at the
    current latent (the classic approximation); otherwise the step is solved
    implicitly, z_{tau+1} = inverse_step(z_tau, eps(z_{tau+1})), so the forward
    DDIM step from z_{tau+1} lands back on z_tau.
    """
    z = backend.encode_image(_batch_images(backend, images))
    cond = backend.embed_text(prompt)
    null = backend.null_embedding()
    latents, eps_used = [z], []
    for tau in range(backend.schedule.T):
        eps, _ = backend.predict_noise(z, tau + 1, cond, null, 1.0)
        z_next = backend.ddim_inverse_step(z, eps, tau, tau + 1)
        if fixed_point_iters > 0:
            def g(zn, z=z, tau=tau):
                e, _ = backend.predict_noise(zn, tau + 1, cond, null, 1.0)
                return backend.ddim_inverse_step(z, e, tau, tau + 1)

            z_next = _anderson(g, z_next, fixed_point_iters, fixed_point_tol)
            eps, _ = backend.predict_noise(z_next, tau + 1, cond, null, 1.0)
        z = z_next
        latents.append(z)
        eps_used.append(eps)
    return RawTrajectory(prompt, latents, eps_used)


def _reverse_step(backend, z, tau, cond, null_ctx, scale):
    eps, _ = backend.predict_noise(z, tau, cond, null_ctx, scale)
    return backend.ddim_step(z, eps, tau, tau - 1)


def _rmse(backend, z_rec, z_src) -> torch.Tensor:
    diff = backend.decode_latent(z_rec) - backend.decode_latent(z_src)
    return diff.pow(2).flatten(1).mean(dim=1).sqrt()


@torch.no_grad()
def _replay(backend, z_T, cond, nulls, scale):
    """nulls: (T, B, tokens, dim)."""
    z = z_T
    for tau in range(backend.schedule.T, 0, -1):
        z = _reverse_step(backend, z, tau, cond, nulls[tau - 1], scale)
    return z


def null_text_optimize(backend: DiffusionBackend, raw: RawTrajectory, prompt: str | None = None,
                       inner_steps: int = 10, lr: float = 3e-2, guidance_scale: float = 7.5,
                       early_stop: float = 1e-5) -> list[LatentTrajectory]:
    """Optimise one null embedding per reverse step so guided sampling retraces ``raw``.

    For tau = T..1 the null embedding minimises
    ||ddim_step(z_bar, eps(z_bar, tau, c, null, s), tau, tau-1) - z_{tau-1}||^2
    with Adam, warm-started from the previous step's embedding. The best
    iterate is kept, so a step never ends with a higher loss than it started
    with. If the optimised trajectory ends up reconstructing worse than the
    default null embedding, the default is kept.
    """
    prompt = raw.prompt if prompt is None else prompt
    if prompt != raw.prompt:
        raise DataError("null-text optimisation must use the inversion prompt")
    T = raw.T
    cond = backend.embed_text(prompt)
    z_src = raw.latents[0]
    b = z_src.shape[0]
    default = backend.null_embedding().array.to(DTYPE)
    default_b = default.unsqueeze(0).expand(b, -1, -1).clone()

    nulls = []
    stalled: list[list[int]] = [[] for _ in range(b)]
    step_losses = []
    z_bar = raw.latents[T]
    u = default_b.clone()
    for tau in range(T, 0, -1):
        target = raw.latents[tau - 1]
        with torch.no_grad():
            e_c = backend.eps(z_bar, tau, backend._ctx(cond, b))

        def objective(u_):
            # same arithmetic as predict_noise so the replay is bit-identical
            if guidance_scale == 1:
                e = e_c
            elif guidance_scale == 0:
                e = backend.eps(z_bar, tau, u_)
            else:
                e_u = backend.eps(z_bar, tau, u_)
                e = e_u + guidance_scale * (e_c - e_u)
            z_prev = backend.ddim_step(z_bar, e, tau, tau - 1)
            return (z_prev - target).pow(2).flatten(1).sum(dim=1)

        if inner_steps > 0:
            with torch.no_grad():
                best_loss = objective(u)
            start = best_loss.clone()
            best = u.clone()
            param = u.clone().requires_grad_(True)
            opt = torch.optim.Adam([param], lr=lr)
            for i in range(inner_steps + 1):
                active = best_loss >= early_stop
                if not bool(active.any()):
                    break
                with torch.enable_grad():
                    losses = objective(param)
                better = losses.detach() < best_loss
                best = torch.where(better[:, None, None], param.detach(), best)
                best_loss = torch.where(better, losses.detach(), best_loss)
                if i == inner_steps or not losses.requires_grad:
                    break
                opt.zero_grad()
                (losses * active).sum().backward()
                if not torch.isfinite(param.grad).all():
                    break
                opt.step()
            u = best
            for i in range(b):
                if not best_loss[i] < start[i] and start[i] >= early_stop:
                    stalled[i].append(tau)
            step_losses.append((start, best_loss))
        nulls.append(u.detach().clone())
        with torch.no_grad():
            z_bar = _reverse_step(backend, z_bar, tau, cond, nulls[-1], guidance_scale)

    nulls_t = torch.stack(nulls[::-1])  # (T, B, tokens, dim), row tau-1
    with torch.no_grad():
        rmse_opt = _rmse(backend, z_bar, z_src)
        if inner_steps > 0:
            defaults = default_b.unsqueeze(0).expand(T, -1, -1, -1)
            rmse_raw = _rmse(backend, _replay(backend, raw.latents[T], cond, defaults, guidance_scale), z_src)
        else:
            rmse_raw = rmse_opt

    out = []
    for i in range(b):
        fallback = bool(rmse_opt[i] > rmse_raw[i])
        if stalled[i]:
            log.warning("null-text optimisation stalled at steps %s", stalled[i])
        meta = {
            "inner_steps": inner_steps, "lr": lr, "early_stop": early_stop,
            "stalled_steps": stalled[i], "fallback_to_default_null": fallback,
            "rmse_without_optimization": float(rmse_raw[i]),
            "step_loss_before": [float(s[0][i]) for s in step_losses[::-1]],
            "step_loss_after": [float(s[1][i]) for s in step_losses[::-1]],
        }
        ne = default_b[i].unsqueeze(0).expand(T, -1, -1).clone() if fallback else nulls_t[:, i].clone()
        err = float(rmse_raw[i]) if fallback else float(rmse_opt[i])
        lat = torch.stack([z[i] for z in raw.latents])
        out.append(LatentTrajectory(prompt, lat, ne, guidance_scale, err, meta))
    return out


def invert(backend: DiffusionBackend, images, prompt: str, inner_steps: int = 10, lr: float = 3e-2,
           guidance_scale: float = 7.5) -> list[LatentTrajectory]:
    """ddim_invert + null_text_optimize for a batch of images sharing one prompt."""
    raw = ddim_invert(backend, images, prompt)
    return null_text_optimize(backend, raw, prompt, inner_steps, lr, guidance_scale)


@torch.no_grad()
def reconstruct(backend: DiffusionBackend, traj: LatentTrajectory):
    """Replay the guided reverse pass; returns (image, rmse vs the source)."""
    cond = backend.embed_text(traj.prompt)
    z = traj.z_T.unsqueeze(0)
    for tau in range(traj.T, 0, -1):
        z = _reverse_step(backend, z, tau, cond, traj.null_at(tau).unsqueeze(0), traj.guidance_scale)
    image = backend.decode_latent(z[0])
    source = backend.decode_latent(traj.latents[0])
    return image, float((image - source).pow(2).mean().sqrt())


def stack_trajectories(trajs: Sequence[LatentTrajectory]):
    """Batch view: latents (T+1, B, ...) and nulls (T, B, tokens, dim)."""
    lat = torch.stack([t.latents for t in trajs], dim=1)
    nulls = torch.stack([t.null_embeddings for t in trajs], dim=1)
    return lat, nulls
