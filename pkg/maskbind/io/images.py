"""
images.py - portable image export (PPM frames, PGM masks) via Pillow

Values are clamped to [0, 1] here and nowhere else; 8-bit value = round(255 * x).
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Union

import numpy as np
import torch
from PIL import Image

ArrayLike = Union[np.ndarray, torch.Tensor]


def _as_numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().to(torch.float64).numpy()
    return np.asarray(x, dtype=np.float64)


def to_uint8(x: ArrayLike) -> np.ndarray:
    arr = np.clip(_as_numpy(x), 0.0, 1.0)
    return np.floor(255.0 * arr + 0.5).astype(np.uint8)


def save_frames(frames: ArrayLike, out_dir: Path, prefix: str = "frame") -> List[Path]:
    """frames: (T, H, W, 3) in [0, 1] -> numbered .ppm files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(frames)
    paths = []
    for t in range(pixels.shape[0]):
        path = out_dir / f"{prefix}_{t:04d}.ppm"
        Image.fromarray(pixels[t]).save(path, format="PPM")
        paths.append(path)
    return paths


def save_mask_volume(mask: ArrayLike, out_dir: Path, entity_id: int,
                     prefix: str = "mask") -> List[Path]:
    """mask: (T', H', W') in [0, 1] -> one 8-bit .pgm per latent frame."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(mask)
    paths = []
    for t in range(pixels.shape[0]):
        path = out_dir / f"{prefix}_e{entity_id}_{t:04d}.pgm"
        Image.fromarray(pixels[t]).save(path, format="PPM")  # mode "L" is written as P5 (PGM)
        paths.append(path)
    return paths


def save_mask_trace(trace: ArrayLike, out_dir: Path) -> List[Path]:
    """trace: (S, N, T', H', W') per-step aggregated masks -> step_XXXX/ folders."""
    arr = _as_numpy(trace)
    paths: List[Path] = []
    for step in range(arr.shape[0]):
        for entity in range(arr.shape[1]):
            paths += save_mask_volume(arr[step, entity], Path(out_dir) / f"step_{step:04d}",
                                      entity)
    return paths


__all__ = ["to_uint8", "save_frames", "save_mask_volume", "save_mask_trace"]
