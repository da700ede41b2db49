"""
scene.py - synthetic multi-entity scenes with ground-truth masks and coupled audio
-----------------------------------------------------------------------------------
Each entity is a flat-coloured shape moving on a linear trajectory over a black
canvas. Its radius and brightness pulsate with its own audio signal, so the mean
intensity inside its mask tracks the audio exactly. Entities never overlap:
placement rejects trajectories whose bounding circles come too close.

Everything is a pure function of the scene seed (numpy Generators only).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from maskbind.errors import ConfigError, PlacementError
from maskbind.synthgen import captions

logger = logging.getLogger(__name__)

Color = Tuple[float, float, float]

SHAPES = captions.SHAPE_WORDS
PALETTE: Dict[str, Color] = {
    "red": (1.0, 0.3, 0.3),
    "green": (0.3, 1.0, 0.3),
    "blue": (0.3, 0.3, 1.0),
    "yellow": (1.0, 1.0, 0.3),
    "magenta": (1.0, 0.3, 1.0),
    "cyan": (0.3, 1.0, 1.0),
}
CROPS = ("full", "partial_top", "partial_bottom")


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    frames: int = 16
    ref_size: int = 32
    min_radius: float = 5.0
    max_radius: float = 7.0
    pulse: float = 0.3                 # radius = base * (1 + pulse * a_norm)
    brightness_base: float = 0.65      # colour = base_color * (base + swing * a_norm)
    brightness_swing: float = 0.35
    harmonic_gain: float = 0.5
    fundamentals: Tuple[float, ...] = (1.0, 3.0, 5.0)   # cycles per video
    max_travel: float = 16.0           # pixels between first and last frame
    margin: float = 1.0
    max_placement_tries: int = 500

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0 or self.frames <= 0 or self.ref_size <= 0:
            raise ConfigError("canvas dims must be positive", "data.height")
        if not 0 < self.min_radius <= self.max_radius:
            raise ConfigError("need 0 < min_radius <= max_radius", "data.min_radius")
        if not 0 <= self.pulse < 1:
            raise ConfigError("pulse must be in [0, 1)", "data.pulse")
        if len(self.fundamentals) < 1:
            raise ConfigError("at least one fundamental is required", "data.fundamentals")


@dataclass(frozen=True)
class EntitySpec:
    """Everything needed to re-render one entity bit-exactly."""

    entity_id: int
    shape_kind: str
    base_color: Color
    base_radius: float
    trajectory_seed: int
    audio_fundamental: float
    color_name: str = "red"

    def __post_init__(self) -> None:
        if self.base_radius <= 0:
            raise ConfigError(f"base_radius must be > 0, got {self.base_radius}")
        if self.shape_kind not in SHAPES:
            raise ConfigError(f"unknown shape_kind {self.shape_kind!r}")

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["base_color"] = list(self.base_color)
        return d

    @staticmethod
    def from_dict(data: Dict[str, object]) -> "EntitySpec":
        return EntitySpec(
            entity_id=int(data["entity_id"]),
            shape_kind=str(data["shape_kind"]),
            base_color=tuple(float(c) for c in data["base_color"]),  # type: ignore[arg-type]
            base_radius=float(data["base_radius"]),
            trajectory_seed=int(data["trajectory_seed"]),
            audio_fundamental=float(data["audio_fundamental"]),
            color_name=str(data.get("color_name", "red")),
        )


@dataclass
class Trajectory:
    centers: np.ndarray      # (T, 2) as (x, y) pixel coordinates
    phase: float
    bound: float             # bounding-circle radius at peak pulsation


@dataclass
class SceneSample:
    frames: np.ndarray               # (T, H, W, 3) float32 in [0, 1]
    gt_masks: np.ndarray             # (N, T, H, W) bool
    audio_signals: np.ndarray        # (N, T) float32
    reference_images: np.ndarray     # (N, H_r, W_r, 3) float32, white background
    caption_tokens: np.ndarray       # (L,) int64
    frame_valid: np.ndarray          # (T,) bool
    entities: Tuple[EntitySpec, ...] = field(default_factory=tuple)
    seed: int = 0

    @property
    def n_entities(self) -> int:
        return int(self.gt_masks.shape[0])

    def records(self) -> Dict[str, np.ndarray]:
        """Arrays for the tensor container (float32 / uint8 only)."""
        return {
            "frames": self.frames.astype(np.float32),
            "gt_masks": self.gt_masks.astype(np.uint8),
            "audio_signals": self.audio_signals.astype(np.float32),
            "reference_images": self.reference_images.astype(np.float32),
            "caption_tokens": self.caption_tokens.astype(np.uint8),
            "frame_valid": self.frame_valid.astype(np.uint8),
        }


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return xs, ys


def shape_mask(shape_kind: str, center: Sequence[float], radius: float,
               height: int, width: int) -> np.ndarray:
    """Boolean occupancy of one shape, tested at pixel centres."""
    xs, ys = _pixel_grid(height, width)
    cx, cy = float(center[0]), float(center[1])
    if shape_kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    if shape_kind == "square":
        return (np.abs(xs - cx) <= radius) & (np.abs(ys - cy) <= radius)
    if shape_kind == "triangle":
        # apex at (cx, cy - r), base at y = cy + r with half-width r
        inside_rows = (ys >= cy - radius) & (ys <= cy + radius)
        return inside_rows & (np.abs(xs - cx) <= (ys - (cy - radius)) / 2.0)
    raise ConfigError(f"unknown shape_kind {shape_kind!r}")


def bounding_radius(spec: EntitySpec, cfg: SceneConfig) -> float:
    peak = spec.base_radius * (1.0 + cfg.pulse)
    return peak if spec.shape_kind == "circle" else peak * math.sqrt(2.0)


def entity_trajectory(spec: EntitySpec, cfg: SceneConfig) -> Trajectory:
    """Linear path and audio phase, drawn from the entity's own trajectory seed."""
    rng = np.random.default_rng(spec.trajectory_seed)
    bound = bounding_radius(spec, cfg)
    lo = bound + cfg.margin
    hi_x = cfg.width - bound - cfg.margin
    hi_y = cfg.height - bound - cfg.margin
    if hi_x < lo or hi_y < lo:
        raise PlacementError(
            f"entity {spec.entity_id} (bound {bound:.2f}) does not fit a "
            f"{cfg.height}x{cfg.width} canvas"
        )
    start = np.array([rng.uniform(lo, hi_x), rng.uniform(lo, hi_y)])
    step = rng.uniform(-cfg.max_travel, cfg.max_travel, size=2)
    end = np.clip(start + step, [lo, lo], [hi_x, hi_y])
    phase = float(rng.uniform(0.0, 2.0 * math.pi))

    if cfg.frames > 1:
        frac = np.arange(cfg.frames, dtype=np.float64) / (cfg.frames - 1)
    else:
        frac = np.zeros(1)
    centers = start[None, :] + (end - start)[None, :] * frac[:, None]
    return Trajectory(centers=centers, phase=phase, bound=bound)


def audio_signal(spec: EntitySpec, cfg: SceneConfig, phase: float) -> np.ndarray:
    """Fundamental + 2x harmonic, entity-specific phase. Returns float64 (T,)."""
    t = np.arange(cfg.frames, dtype=np.float64) / cfg.frames
    f = spec.audio_fundamental
    return (np.sin(2.0 * math.pi * f * t + phase)
            + cfg.harmonic_gain * np.sin(2.0 * math.pi * 2.0 * f * t + 2.0 * phase))


def normalized(signal: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(signal))) if signal.size else 0.0
    if peak == 0.0:
        return np.zeros_like(signal)
    return signal / peak


def _direction_word(traj: Trajectory) -> str:
    delta = traj.centers[-1] - traj.centers[0]
    if float(np.hypot(delta[0], delta[1])) < 1.0:
        return "still"
    if abs(delta[0]) >= abs(delta[1]):
        return "right" if delta[0] > 0 else "left"
    return "down" if delta[1] > 0 else "up"


def size_word(spec: EntitySpec, cfg: SceneConfig) -> str:
    span = cfg.max_radius - cfg.min_radius
    if span <= 0:
        return "medium"
    rel = (spec.base_radius - cfg.min_radius) / span
    return captions.SIZE_WORDS[min(2, int(rel * 3))]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_entity(spec: EntitySpec, cfg: SceneConfig
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Masks (T,H,W), per-frame colours (T,3) and raw audio (T,) for one entity."""
    traj = entity_trajectory(spec, cfg)
    signal = audio_signal(spec, cfg, traj.phase)
    a_norm = normalized(signal)

    masks = np.zeros((cfg.frames, cfg.height, cfg.width), dtype=bool)
    colors = np.zeros((cfg.frames, 3), dtype=np.float64)
    base = np.asarray(spec.base_color, dtype=np.float64)
    for t in range(cfg.frames):
        radius = spec.base_radius * (1.0 + cfg.pulse * a_norm[t])
        masks[t] = shape_mask(spec.shape_kind, traj.centers[t], radius, cfg.height, cfg.width)
        colors[t] = base * (cfg.brightness_base + cfg.brightness_swing * a_norm[t])
    return masks, colors, signal


def render_frames(entities: Sequence[EntitySpec], cfg: SceneConfig
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Re-render a scene from its entity specs: frames, gt masks, audio signals."""
    frames = np.zeros((cfg.frames, cfg.height, cfg.width, 3), dtype=np.float32)
    gt = np.zeros((len(entities), cfg.frames, cfg.height, cfg.width), dtype=bool)
    audio = np.zeros((len(entities), cfg.frames), dtype=np.float32)
    for i, spec in enumerate(entities):
        masks, colors, signal = render_entity(spec, cfg)
        gt[i] = masks
        audio[i] = signal.astype(np.float32)
        for t in range(cfg.frames):
            frames[t][masks[t]] = colors[t].astype(np.float32)
    return frames, gt, audio


def render_reference(spec: EntitySpec, crop: str = "full",
                     cfg: Optional[SceneConfig] = None) -> np.ndarray:
    """Entity centred on a white canvas; partial crops whiten one half of the rows."""
    cfg = cfg or SceneConfig()
    if crop not in CROPS:
        raise ConfigError(f"unknown crop {crop!r}, expected one of {CROPS}")
    size = cfg.ref_size
    image = np.ones((size, size, 3), dtype=np.float32)
    mask = shape_mask(spec.shape_kind, (size / 2.0, size / 2.0), spec.base_radius, size, size)
    color = np.asarray(spec.base_color, dtype=np.float64) * cfg.brightness_base
    image[mask] = color.astype(np.float32)

    half = size // 2
    if crop == "partial_top":
        image[half:] = 1.0
    elif crop == "partial_bottom":
        image[:half] = 1.0
    return image


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _separated(a: Trajectory, b: Trajectory, margin: float) -> bool:
    dist = np.hypot(*(a.centers - b.centers).T)
    return bool(np.all(dist > a.bound + b.bound + margin))


def sample_entities(seed: int, n_entities: int, cfg: SceneConfig) -> List[EntitySpec]:
    """Draw distinct (shape, colour) entities and disjoint trajectories."""
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")
    if not 1 <= n_entities <= 3:
        raise ConfigError(f"n_entities must be in 1..3, got {n_entities}", "data.n_entities")
    cfg.validate()

    rng = np.random.default_rng(seed)
    color_names = list(PALETTE)
    colors = rng.choice(len(color_names), size=n_entities, replace=False)
    shapes = rng.integers(0, len(SHAPES), size=n_entities)
    fund_idx = rng.permutation(len(cfg.fundamentals))

    specs: List[EntitySpec] = []
    placed: List[Trajectory] = []
    for i in range(n_entities):
        name = color_names[int(colors[i])]
        radius = float(rng.uniform(cfg.min_radius, cfg.max_radius))
        fundamental = float(cfg.fundamentals[int(fund_idx[i % len(fund_idx)])])
        for _ in range(cfg.max_placement_tries):
            spec = EntitySpec(
                entity_id=i,
                shape_kind=SHAPES[int(shapes[i])],
                base_color=PALETTE[name],
                base_radius=radius,
                trajectory_seed=int(rng.integers(0, 2 ** 31 - 1)),
                audio_fundamental=fundamental,
                color_name=name,
            )
            traj = entity_trajectory(spec, cfg)
            if all(_separated(traj, other, cfg.margin) for other in placed):
                specs.append(spec)
                placed.append(traj)
                break
        else:
            raise PlacementError(
                f"seed {seed}: could not place entity {i} disjointly after "
                f"{cfg.max_placement_tries} tries"
            )
    return specs


def caption_for(entities: Sequence[EntitySpec], cfg: SceneConfig) -> np.ndarray:
    clauses = []
    for spec in entities:
        traj = entity_trajectory(spec, cfg)
        clauses.append(captions.entity_clause(
            size_word(spec, cfg), spec.color_name, spec.shape_kind, _direction_word(traj)
        ))
    return np.asarray(captions.join_clauses(clauses), dtype=np.int64)


def generate_scene(seed: int, n_entities: int, cfg: Optional[SceneConfig] = None) -> SceneSample:
    """Core API: deterministic scene for `seed` with `n_entities` disjoint entities."""
    cfg = cfg or SceneConfig()
    entities = sample_entities(seed, n_entities, cfg)
    frames, gt, audio = render_frames(entities, cfg)
    refs = np.stack([render_reference(spec, "full", cfg) for spec in entities])
    logger.debug("generated scene seed=%d with %d entities", seed, n_entities)
    return SceneSample(
        frames=frames,
        gt_masks=gt,
        audio_signals=audio,
        reference_images=refs,
        caption_tokens=caption_for(entities, cfg),
        frame_valid=np.ones(cfg.frames, dtype=bool),
        entities=tuple(entities),
        seed=seed,
    )


__all__ = [
    "SHAPES", "PALETTE", "CROPS", "SceneConfig", "EntitySpec", "Trajectory", "SceneSample",
    "shape_mask", "bounding_radius", "entity_trajectory", "audio_signal", "normalized",
    "size_word", "render_entity", "render_frames", "render_reference",
    "sample_entities", "caption_for", "generate_scene",
]
