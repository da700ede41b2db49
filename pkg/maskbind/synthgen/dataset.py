"""
dataset.py - seeded scene datasets, split-disjoint seed ranges, container export/import
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from torch.utils.data import Dataset
from tqdm import tqdm

from maskbind.errors import ConfigError, ContainerError
from maskbind.io import container
from maskbind.io.manifest import read_manifest, write_manifest
from maskbind.synthgen.scene import EntitySpec, SceneConfig, SceneSample, generate_scene

logger = logging.getLogger(__name__)

SPLIT_SEED_BASE: Dict[str, int] = {"train": 0, "val": 1_000_000, "test": 2_000_000}
SPLIT_SEED_SPAN = 1_000_000


def split_seeds(split: str, n_scenes: int) -> List[int]:
    if split not in SPLIT_SEED_BASE:
        raise ConfigError(f"unknown split {split!r}, expected one of {list(SPLIT_SEED_BASE)}",
                          "data.split")
    if not 0 < n_scenes <= SPLIT_SEED_SPAN:
        raise ConfigError(f"n_scenes must be in 1..{SPLIT_SEED_SPAN}", "data.n_scenes")
    base = SPLIT_SEED_BASE[split]
    return list(range(base, base + n_scenes))


def invalidate_frames(sample: SceneSample, fraction: float) -> SceneSample:
    """Flip exactly round(fraction * T) frames to invalid, chosen from the scene seed."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"invalid_fraction must be in [0, 1], got {fraction}",
                          "data.invalid_fraction")
    n_frames = sample.frame_valid.shape[0]
    n_invalid = int(round(fraction * n_frames))
    valid = np.ones(n_frames, dtype=bool)
    if n_invalid:
        rng = np.random.default_rng([sample.seed, 7919])
        valid[rng.choice(n_frames, size=n_invalid, replace=False)] = False
    sample.frame_valid = valid
    return sample


class SceneDataset(Dataset):
    """Lazily generated scenes; item i is the scene for seeds[i]."""

    def __init__(self, seeds: Sequence[int], cfg: SceneConfig, n_entities: int = 2,
                 invalid_fraction: float = 0.0, cache: bool = True):
        self.seeds = list(seeds)
        self.cfg = cfg
        self.n_entities = n_entities
        self.invalid_fraction = invalid_fraction
        self._cache: Optional[Dict[int, SceneSample]] = {} if cache else None

    def __len__(self) -> int:
        return len(self.seeds)

    def __getitem__(self, idx: int) -> SceneSample:
        seed = self.seeds[idx]
        if self._cache is not None and seed in self._cache:
            return self._cache[seed]
        sample = generate_scene(seed, self.n_entities, self.cfg)
        if self.invalid_fraction > 0:
            sample = invalidate_frames(sample, self.invalid_fraction)
        if self._cache is not None:
            self._cache[seed] = sample
        return sample

    def __iter__(self) -> Iterator[SceneSample]:
        for i in range(len(self)):
            yield self[i]


def make_dataset(n_scenes: int, split: str = "train", cfg: Optional[SceneConfig] = None,
                 n_entities: int = 2, invalid_fraction: float = 0.0) -> SceneDataset:
    """Dataset handle over the split's seed range (train/val/test never intersect)."""
    cfg = cfg or SceneConfig()
    return SceneDataset(split_seeds(split, n_scenes), cfg, n_entities, invalid_fraction)


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def scene_filename(seed: int) -> str:
    return f"scene_{seed:07d}.itah"


def export_dataset(dataset: SceneDataset, out_dir: Path, config_hash: str,
                   progress: bool = True) -> Path:
    """One container file per scene plus manifest.json (seeds, config hash, entity specs).

    Files already present are kept when the existing manifest carries the same hash.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    previous = None
    manifest_path = out_dir / "manifest.json"
    if manifest_path.is_file():
        previous = read_manifest(manifest_path)
        if previous.get("config_hash") != config_hash:
            logger.warning("config hash changed; regenerating all scenes in %s", out_dir)
            previous = None

    entities: Dict[str, List[Dict[str, object]]] = {}
    files: List[str] = []
    for i in tqdm(range(len(dataset)), desc="make-data", disable=not progress):
        seed = dataset.seeds[i]
        name = scene_filename(seed)
        path = out_dir / name
        sample = dataset[i]
        if previous is None or not path.is_file():
            container.write_records(path, sample.records())
        entities[str(seed)] = [e.to_dict() for e in sample.entities]
        files.append(name)

    write_manifest(
        manifest_path,
        command="make-data",
        config_hash=config_hash,
        seeds=dataset.seeds,
        files=files,
        entities=entities,
    )
    logger.info("exported %d scenes to %s", len(files), out_dir)
    return manifest_path


def load_scene(path: Path, seed: int, entities: Sequence[EntitySpec]) -> SceneSample:
    records = container.read_records(path)
    required = ("frames", "gt_masks", "audio_signals", "reference_images",
                "caption_tokens", "frame_valid")
    missing = [r for r in required if r not in records]
    if missing:
        raise ContainerError(f"{path}: missing records {missing}")
    return SceneSample(
        frames=records["frames"],
        gt_masks=records["gt_masks"].astype(bool),
        audio_signals=records["audio_signals"],
        reference_images=records["reference_images"],
        caption_tokens=records["caption_tokens"].astype(np.int64),
        frame_valid=records["frame_valid"].astype(bool),
        entities=tuple(entities),
        seed=seed,
    )


def load_dataset_dir(data_dir: Path) -> List[SceneSample]:
    manifest = read_manifest(data_dir / "manifest.json")
    samples = []
    for seed, name in zip(manifest["seeds"], manifest.get("files", [])):
        specs = [EntitySpec.from_dict(d) for d in manifest["entities"][str(seed)]]
        samples.append(load_scene(data_dir / name, seed, specs))
    return samples


__all__ = [
    "SPLIT_SEED_BASE", "split_seeds", "invalidate_frames", "SceneDataset", "make_dataset",
    "scene_filename", "export_dataset", "load_scene", "load_dataset_dir",
]
