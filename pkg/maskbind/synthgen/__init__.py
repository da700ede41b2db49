"""Synthetic multi-entity scenes: ground-truth masks, coupled audio, references, captions."""

from maskbind.synthgen.dataset import (
    SceneDataset,
    export_dataset,
    load_dataset_dir,
    make_dataset,
    split_seeds,
)
from maskbind.synthgen.scene import (
    CROPS,
    EntitySpec,
    SceneConfig,
    SceneSample,
    generate_scene,
    render_frames,
    render_reference,
)

__all__ = [
    "CROPS", "EntitySpec", "SceneConfig", "SceneSample", "generate_scene", "render_frames",
    "render_reference", "SceneDataset", "make_dataset", "split_seeds", "export_dataset",
    "load_dataset_dir",
]
