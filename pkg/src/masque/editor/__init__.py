"""Prompt-driven localized editing: region masks, attention fusion and the protection loop."""
from masque.editor.attention import FusionHook, PromptPair, edit_loss, fuse_attention, fuse_maps, in_horizon
from masque.editor.pipeline import (ProtectionResult, ProvenanceRecord, blend_latents, generate_protected,
                                    protect_batch, refine_latent_for_edit)
from masque.editor.regions import REGION_DESCRIPTORS, RegionMask, SentenceEncoder, build_mask, match_region
