"""Toy dual-stream diffusion transformer.

The model itself lives in `maskbind.backbone.model`; it is not re-exported here because
it depends on the layout and audiocond modules, which in turn import from this package.
"""

from maskbind.backbone.blocks import DualStreamBlock, attention, modulate
from maskbind.backbone.rope import rope_3d
from maskbind.backbone.state import (
    AudioConditions,
    BlockHook,
    Conditions,
    ReferenceSet,
    TokenState,
)

__all__ = [
    "DualStreamBlock", "attention", "modulate", "rope_3d", "AudioConditions", "BlockHook",
    "Conditions", "ReferenceSet", "TokenState",
]
