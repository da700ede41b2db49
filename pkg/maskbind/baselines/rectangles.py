"""
rectangles.py - fixed rectangle masks for the fixed_mask binding variant

A user (or, for evaluation, the first valid frame's ground truth) gives one pixel box
per entity. The box is turned into a static token-grid mask: a latent cell is inside
when its centre lies in the box, for every latent frame.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from maskbind.codec import CodecConfig
from maskbind.errors import ConfigError, ShapeError
from maskbind.synthgen.scene import SceneSample

Box = Tuple[float, float, float, float]     # (x0, y0, x1, y1) in pixels, end-exclusive


def parse_box(text: str) -> Box:
    """'x0,y0,x1,y1' -> Box."""
    try:
        x0, y0, x1, y1 = (float(v) for v in text.split(","))
    except ValueError as e:
        raise ConfigError(f"box must be four comma-separated numbers, got {text!r}",
                          "sample.boxes") from e
    if x1 <= x0 or y1 <= y0:
        raise ConfigError(f"empty box {text!r}", "sample.boxes")
    return x0, y0, x1, y1


def box_to_mask(box: Box, grid: Tuple[int, int, int], codec: CodecConfig) -> torch.Tensor:
    """Static (T', H', W') float mask of the cells whose pixel centre is inside `box`."""
    t, h, w = grid
    x0, y0, x1, y1 = box
    cy = (torch.arange(h, dtype=torch.float64) + 0.5) * codec.ch
    cx = (torch.arange(w, dtype=torch.float64) + 0.5) * codec.cw
    inside_y = (cy >= y0) & (cy < y1)
    inside_x = (cx >= x0) & (cx < x1)
    plane = (inside_y[:, None] & inside_x[None, :]).to(torch.float32)
    return plane.expand(t, h, w).clone()


def boxes_to_masks(boxes: Sequence[Box], grid: Tuple[int, int, int],
                   codec: CodecConfig) -> torch.Tensor:
    """(N, T', H', W') for N boxes."""
    if not boxes:
        raise ConfigError("fixed_mask mode needs one box per entity", "sample.boxes")
    return torch.stack([box_to_mask(b, grid, codec) for b in boxes])


def first_valid_frame(sample: SceneSample) -> Optional[int]:
    idx = np.flatnonzero(sample.frame_valid)
    return int(idx[0]) if idx.size else None


def bounding_box(mask: np.ndarray) -> Optional[Box]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def gt_boxes(sample: SceneSample) -> List[Box]:
    """Per-entity bounding box in the first valid frame (whole canvas if empty)."""
    frame = first_valid_frame(sample)
    if frame is None:
        frame = 0
    height, width = sample.frames.shape[1:3]
    boxes = []
    for n in range(sample.n_entities):
        box = bounding_box(sample.gt_masks[n, frame])
        boxes.append(box if box is not None else (0.0, 0.0, float(width), float(height)))
    return boxes


def scene_rectangles(samples: Sequence[SceneSample], codec: CodecConfig) -> torch.Tensor:
    """(B, N, T', H', W') fixed masks from each scene's first-valid-frame boxes."""
    if not samples:
        raise ShapeError("no scenes given")
    grid = codec.latent_grid(*samples[0].frames.shape[:3])
    return torch.stack([boxes_to_masks(gt_boxes(s), grid, codec) for s in samples])


__all__ = [
    "Box", "parse_box", "box_to_mask", "boxes_to_masks", "first_valid_frame", "bounding_box",
    "gt_boxes", "scene_rectangles",
]
