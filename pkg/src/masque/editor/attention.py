"""Cross-attention fusion between the reconstruction and edit branches, and the edit loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from masque.diffusion.text import BOS, PAD, TextEmbedding
from masque.errors import EmptyMask, TokenMapMismatch


@dataclass(frozen=True)
class PromptPair:
    """Token classes of the edit prompt relative to the source prompt.

    ``source_index[j]`` is the position in the source prompt whose attention
    column token j of the edit prompt inherits, or -1 for a new token.
    """

    source: TextEmbedding
    edit: TextEmbedding
    kinds: tuple  # per edit-token: "shared" | "new" | "special"
    source_index: tuple

    @classmethod
    def build(cls, source: TextEmbedding, edit: TextEmbedding) -> "PromptPair":
        used = set()
        kinds, index = [], []
        src_pads = [i for i, t in enumerate(source.tokens) if t == PAD]
        for j, tok in enumerate(edit.tokens):
            if tok == BOS:
                kinds.append("special")
                index.append(0)
            elif tok == PAD:
                # pads carry no content; inherit any source pad column
                kinds.append("special" if src_pads else "new")
                index.append(src_pads[min(j, len(src_pads) - 1)] if src_pads else -1)
            else:
                match = next((i for i in source.alignment if source.tokens[i] == tok and i not in used), None)
                if match is None:
                    kinds.append("new")
                    index.append(-1)
                else:
                    used.add(match)
                    kinds.append("shared")
                    index.append(match)
        return cls(source, edit, tuple(kinds), tuple(index))

    @property
    def new_tokens(self) -> list[int]:
        return [j for j, k in enumerate(self.kinds) if k == "new" and self.edit.tokens[j] != PAD]

    @property
    def new_words(self) -> list[str]:
        return [self.edit.tokens[j] for j in self.new_tokens]

    @property
    def shared_source_tokens(self) -> list[int]:
        """Source positions of content words present in both prompts."""
        return [self.source_index[j] for j, k in enumerate(self.kinds) if k == "shared"]

    @property
    def is_identity(self) -> bool:
        return not self.new_tokens and self.source.tokens == self.edit.tokens


def in_horizon(tau: int, T: int, span: int) -> bool:
    """tau within [T, T - span] (reverse-time interval, inclusive)."""
    return T - span <= tau <= T


def fuse_maps(a_rec: torch.Tensor, a_edit: torch.Tensor, pair: PromptPair) -> torch.Tensor:
    """Shared columns from the reconstruction map, new columns from the edit map.

    Maps are (..., positions, tokens). Rows are renormalised to sum to one.
    """
    if a_rec.shape[-1] != len(pair.source.tokens) or a_edit.shape[-1] != len(pair.edit.tokens):
        raise TokenMapMismatch("attention token count does not match the prompt pair")
    if a_rec.shape[:-1] != a_edit.shape[:-1]:
        raise TokenMapMismatch(f"attention shapes differ: {tuple(a_rec.shape)} vs {tuple(a_edit.shape)}")
    if pair.is_identity:
        return a_rec
    idx = torch.tensor([i if i >= 0 else 0 for i in pair.source_index])
    take_rec = torch.tensor([i >= 0 for i in pair.source_index])
    fused = torch.where(take_rec, a_rec.index_select(-1, idx), a_edit)
    return fused / fused.sum(dim=-1, keepdim=True).clamp_min(1e-30)


def fuse_attention(a_rec: dict, a_edit: dict, pair: PromptPair, tau: int, T: int, tau_attn: int) -> dict:
    """Fuse two attention records at step tau; outside [T, T - tau_attn] the edit maps pass through."""
    if set(a_rec) != set(a_edit):
        raise TokenMapMismatch(f"attention records cover different keys: {sorted(a_rec)} vs {sorted(a_edit)}")
    if not in_horizon(tau, T, tau_attn):
        return dict(a_edit)
    return {k: fuse_maps(a_rec[k], a_edit[k], pair) for k in a_edit}


class FusionHook:
    """Attention hook for the edit branch that swaps in fused maps."""

    def __init__(self, rec_maps: dict, pair: PromptPair):
        self.rec_maps = rec_maps  # layer -> (B, positions, tokens)
        self.pair = pair

    def __call__(self, layer, probs):
        return fuse_maps(self.rec_maps[layer], probs, self.pair)


def _layer_mask(mask, positions: int, resolution=None) -> torch.Tensor:
    """Mask flattened to the attention positions: (positions,) or (B, positions) for a list of masks."""
    if resolution is None:
        side = int(round(math.sqrt(positions)))
        resolution = (side, side)
    if isinstance(mask, (list, tuple)):
        return torch.stack([_layer_mask(m, positions, resolution) for m in mask])
    m = mask.at_resolution(*resolution).reshape(-1)
    if m.numel() != positions:
        raise TokenMapMismatch(f"mask resolution {resolution} does not match {positions} attention positions")
    return m


def edit_loss(a_edit: dict, a_rec: dict, mask, pair: PromptPair, resolutions: dict | None = None) -> torch.Tensor:
    """(1 - mean_{i in M} new_i / (new_i + shared_rec_i))^2, averaged over layers.

    ``a_edit`` / ``a_rec`` map layer -> (B, positions, tokens) or (positions, tokens).
    ``mask`` is one RegionMask or a list with one mask per batch element.
    Returns one loss per batch element (a scalar for unbatched maps).
    """
    new = pair.new_tokens
    shared = pair.shared_source_tokens
    losses = []
    for layer in sorted(a_edit):
        ae, ar = a_edit[layer], a_rec[layer]
        m = _layer_mask(mask, ae.shape[-2], (resolutions or {}).get(layer)).to(ae.dtype)
        area = m.sum(-1)
        if bool((area == 0).any()):
            raise EmptyMask(f"mask is empty at layer {layer!r}")
        a_new = ae[..., new].sum(-1) if new else torch.zeros(ae.shape[:-1], dtype=ae.dtype)
        a_shr = ar[..., shared].sum(-1) if shared else torch.zeros(ar.shape[:-1], dtype=ar.dtype)
        denom = a_new + a_shr
        ratio = torch.where(denom > 0, a_new / torch.where(denom > 0, denom, torch.ones_like(denom)),
                            torch.zeros_like(denom))
        score = (ratio * m).sum(-1) / area
        losses.append((1 - score) ** 2)
    return torch.stack(losses).mean(0)
