"""Text-conditioned latent diffusion interface and the bundled toy backend."""
from __future__ import annotations

import abc
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from masque.diffusion.denoiser import AttentionHook, ToyUNet
from masque.diffusion.schedule import DDIMSchedule
from masque.diffusion.text import VOCAB, TextEmbedding, Tokenizer, normalize
from masque.errors import CheckpointError, ShapeMismatch, UnknownTokens

DTYPE = torch.float64
Context = Union[TextEmbedding, torch.Tensor]


class AttentionRecord(dict):
    """Cross-attention maps keyed by ``(layer, tau)``.

    Each value has shape ``(batch, positions, tokens)`` and is row-stochastic.
    """

    def layers(self):
        return sorted({k[0] for k in self})

    def at(self, tau: int) -> dict:
        return {layer: v for (layer, t), v in self.items() if t == tau}


class DiffusionBackend(abc.ABC):
    """What the editing pipeline needs from a latent diffusion model."""

    schedule: DDIMSchedule
    latent_shape: tuple
    image_shape: tuple

    @abc.abstractmethod
    def embed_text(self, prompt: str) -> TextEmbedding: ...

    @abc.abstractmethod
    def null_embedding(self) -> TextEmbedding: ...

    @abc.abstractmethod
    def eps(self, z: torch.Tensor, tau: int, ctx: torch.Tensor,
            hook: Optional[AttentionHook] = None) -> torch.Tensor:
        """Single-branch noise prediction with a (B, tokens, dim) context."""

    @abc.abstractmethod
    def encode_image(self, image) -> torch.Tensor: ...

    @abc.abstractmethod
    def decode_latent(self, z: torch.Tensor) -> torch.Tensor: ...

    @property
    def attention_layers(self) -> tuple:
        return ()

    def attention_resolution(self, layer: str) -> tuple:
        raise NotImplementedError

    # -- shared machinery --------------------------------------------------

    def _ctx(self, c: Context, batch: int) -> torch.Tensor:
        arr = c.array if isinstance(c, TextEmbedding) else c
        arr = arr.to(DTYPE)
        if arr.dim() == 2:
            arr = arr.unsqueeze(0)
        if arr.shape[0] == 1 and batch > 1:
            arr = arr.expand(batch, -1, -1)
        return arr

    def check_latent(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[-3:]) != tuple(self.latent_shape) or z.dim() not in (3, 4):
            raise ShapeMismatch(f"latent shape {tuple(z.shape)} does not match backend {self.latent_shape}")
        return z if z.dim() == 4 else z.unsqueeze(0)

    def predict_noise(self, z: torch.Tensor, tau: int, cond: Context, uncond: Context,
                      guidance_scale: float, record_attention: bool = False,
                      hook: Optional[AttentionHook] = None):
        """Classifier-free guided prediction eps_u + s (eps_c - eps_u).

        ``hook`` is applied to the conditional branch only; the recorded maps are
        those the network computed before the hook.
        """
        single = z.dim() == 3
        zb = self.check_latent(z)
        self.schedule.check(tau)
        b = zb.shape[0]
        record = AttentionRecord() if record_attention else None

        def cond_hook(name, probs):
            if record is not None:
                record[(name, tau)] = probs.detach()
            return hook(name, probs) if hook is not None else probs

        if guidance_scale == 0:
            out = self.eps(zb, tau, self._ctx(uncond, b))
            if record is not None:
                self.eps(zb, tau, self._ctx(cond, b), cond_hook)
        else:
            e_c = self.eps(zb, tau, self._ctx(cond, b), cond_hook)
            if guidance_scale == 1:
                out = e_c
            else:
                e_u = self.eps(zb, tau, self._ctx(uncond, b))
                out = e_u + guidance_scale * (e_c - e_u)
        return (out[0] if single else out), record

    def ddim_step(self, z_t, eps, t, t_prev):
        return self.schedule.ddim_step(z_t, eps, t, t_prev)

    def ddim_inverse_step(self, z_t, eps, t, t_next):
        return self.schedule.ddim_inverse_step(z_t, eps, t, t_next)


@dataclass(frozen=True)
class ToyModelSpec:
    image_size: int = 32
    patch: int = 2
    width: int = 32
    mid_width: int = 64
    ctx_dim: int = 32
    attn_dim: int = 32
    max_tokens: int = 12
    vocab: tuple = VOCAB
    T: int = 50
    base_steps: int = 1000
    seed: int = 0
    steps: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    cfg_dropout: float = 0.15
    dataset: dict = field(default_factory=dict)

    @property
    def latent_shape(self):
        return (3 * self.patch ** 2, self.image_size // self.patch, self.image_size // self.patch)

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ToyModelSpec":
        d = dict(d)
        d["vocab"] = tuple(d["vocab"])
        return cls(**d)


def state_digest(spec_json: dict, state: dict) -> str:
    h = hashlib.sha256(json.dumps(spec_json, sort_keys=True).encode())
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ToyBackend(DiffusionBackend):
    """Toy latent diffusion model.

    The autoencoder is a pixel-unshuffle: each 2x2 RGB patch becomes 12 latent
    channels. It is an orthonormal permutation, so encode/decode are exact.
    """

    def __init__(self, spec: ToyModelSpec, model: Optional[ToyUNet] = None):
        self.spec = spec
        self.tokenizer = Tokenizer(spec.vocab, spec.max_tokens)
        self.schedule = DDIMSchedule(spec.T, spec.base_steps)
        self.latent_shape = spec.latent_shape
        self.image_shape = (spec.image_size, spec.image_size, 3)
        if model is None:
            with torch.random.fork_rng():
                torch.manual_seed(spec.seed)
                model = ToyUNet(latent_channels=self.latent_shape[0], width=spec.width,
                                mid_width=spec.mid_width, ctx_dim=spec.ctx_dim,
                                attn_dim=spec.attn_dim, vocab_size=len(spec.vocab))
        self.model = model.to(DTYPE)
        self.model.eval()
        self.model.requires_grad_(False)
        self.config_digest = None

    # text ---------------------------------------------------------------

    def _embed(self, prompt: str) -> TextEmbedding:
        tokens, ids, alignment = self.tokenizer.tokenize(prompt)
        with torch.no_grad():
            arr = self.model.token_embedding(torch.tensor(ids)).to(DTYPE).clone()
        return TextEmbedding(normalize(prompt), tuple(tokens), tuple(ids), arr, tuple(alignment))

    def embed_text(self, prompt: str) -> TextEmbedding:
        if not normalize(prompt):
            raise UnknownTokens("prompt is empty after normalization")
        return self._embed(prompt)

    def null_embedding(self) -> TextEmbedding:
        return self._embed("")

    # network --------------------------------------------------------------

    @property
    def attention_layers(self):
        return ToyUNet.attention_layers

    def attention_resolution(self, layer):
        _, h, w = self.latent_shape
        return {"up": (h, w), "mid": (h // 2, w // 2)}[layer]

    def eps(self, z, tau, ctx, hook=None):
        z = self.check_latent(z)
        t = torch.full((z.shape[0],), float(self.schedule.timesteps[tau]), dtype=DTYPE)
        return self.model(z, t, ctx, hook)

    # autoencoder ------------------------------------------------------------

    def encode_image(self, image) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image).to(DTYPE)
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != tuple(self.image_shape):
            raise ShapeMismatch(f"image shape {tuple(x.shape[1:])} does not match backend {self.image_shape}")
        z = F.pixel_unshuffle(x.permute(0, 3, 1, 2), self.spec.patch)
        return z[0] if single else z

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        single = z.dim() == 3
        zb = self.check_latent(z)
        x = F.pixel_shuffle(zb, self.spec.patch).permute(0, 2, 3, 1)
        return x[0] if single else x

    def latent_mask(self, pixel_mask) -> torch.Tensor:
        """Max-pool a (H, W) pixel mask down to latent resolution."""
        m = torch.as_tensor(np.asarray(pixel_mask, dtype=np.float64))
        return F.max_pool2d(m[None, None], self.spec.patch)[0, 0]

    # persistence ------------------------------------------------------------

    def digest(self) -> str:
        return state_digest(self.spec.to_json(), self.model.state_dict())

    def save(self, path: Union[str, os.PathLike], extra: Optional[dict] = None) -> str:
        payload = {
            "format": "masque-checkpoint/v1",
            "kind": "diffusion",
            "spec": self.spec.to_json(),
            "state": self.model.state_dict(),
            "digest": self.digest(),
            "extra": extra or {},
        }
        atomic_torch_save(payload, path)
        return payload["digest"]

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "ToyBackend":
        payload = load_checkpoint(path, "diffusion")
        spec = ToyModelSpec.from_json(payload["spec"])
        backend = cls(spec)
        backend.model.load_state_dict(payload["state"])
        if backend.digest() != payload["digest"]:
            raise CheckpointError(f"{path}: content digest mismatch")
        backend.extra = payload.get("extra", {})
        return backend


def atomic_torch_save(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, kind: str) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != "masque-checkpoint/v1":
        raise CheckpointError(f"{path} is not a masque checkpoint")
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} model, expected {kind!r}")
    return payload
