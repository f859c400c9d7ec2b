"""Noise-prediction training for the toy backend."""
from __future__ import annotations

import logging
import copy
import math

import numpy as np
import torch

from masque.diffusion.backend import DTYPE, ToyBackend, ToyModelSpec
from masque.errors import DataError, TrainingDiverged

log = logging.getLogger(__name__)


def smooth(losses, windows: int = 10) -> list[float]:
    """Window means of a loss history."""
    chunks = np.array_split(np.asarray(losses, dtype=np.float64), windows)
    return [float(c.mean()) for c in chunks if len(c)]


def train_toy_model(dataset, spec: ToyModelSpec, progress: bool = False):
    """Fit eps_theta by minimising E ||eps - eps_theta(z_t, t, c)||^2.

    Timesteps are drawn uniformly from the coarse grid 1..T. Captions are
    replaced by the empty prompt with probability ``spec.cfg_dropout`` so the
    same network serves as the unconditional branch.
    Returns ``(backend, losses)``.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    backend = ToyBackend(spec)
    # float32 for speed; inference runs in float64
    model = copy.deepcopy(backend.model).float()
    model.train()
    model.requires_grad_(True)

    images = torch.as_tensor(dataset.images(), dtype=DTYPE)
    with torch.no_grad():
        latents = backend.encode_image(images).float()
    ctx_ids = torch.tensor([backend.tokenizer.tokenize(r.caption)[1] for r in dataset.renders])
    null_ids = torch.tensor(backend.tokenizer.tokenize("")[1])
    alphas = torch.as_tensor(backend.schedule.alphas_bar, dtype=torch.float32)

    gen = torch.Generator().manual_seed(spec.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
    warmup = max(1, spec.steps // 20)

    def lr_at(step):
        if step < warmup:
            return spec.lr * (step + 1) / warmup
        p = (step - warmup) / max(1, spec.steps - warmup)
        return spec.lr * 0.5 * (1 + math.cos(math.pi * p))

    losses = []
    n = latents.shape[0]
    for step in range(spec.steps):
        idx = torch.randint(0, n, (spec.batch_size,), generator=gen)
        tau = torch.randint(1, spec.T + 1, (spec.batch_size,), generator=gen)
        noise = torch.randn((spec.batch_size, *latents.shape[1:]), generator=gen)
        drop = torch.rand(spec.batch_size, generator=gen) < spec.cfg_dropout
        ids = torch.where(drop[:, None], null_ids[None], ctx_ids[idx])
        ab = alphas[tau].reshape(-1, 1, 1, 1)
        z_t = ab.sqrt() * latents[idx] + (1 - ab).sqrt() * noise
        t_base = torch.as_tensor(backend.schedule.timesteps, dtype=torch.float32)[tau]
        pred = model(z_t, t_base, model.token_embedding(ids))
        loss = ((pred - noise) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        for g in opt.param_groups:
            g["lr"] = lr_at(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if progress and step % 200 == 0:
            log.info("step %d loss %.4f", step, float(np.mean(losses[-200:])))

    backend.model.load_state_dict({k: v.detach().to(DTYPE) for k, v in model.state_dict().items()})
    return backend, losses
