"""
maskbind - mask-gated multi-entity conditioning for toy video diffusion transformers
-------------------------------------------------------------------------------------
Synthetic multi-entity scenes, a patchify latent codec, a dual-stream DiT with
reference injection, per-layer mask predictor heads with cross-step caching,
mask-gated per-entity audio cross-attention, flow-matching training and an
ablation/evaluation harness.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
