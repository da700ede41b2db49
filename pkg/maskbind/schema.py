"""
schema.py; Shared JSON schema definitions for maskbind
-------------------------------------------------------
All modules (synthgen export, trainer metrics, sampler manifests, eval reports)
follow these structures so every JSON artifact can be checked with jsonschema.
Human-readable documentation lives in docs/schema.md.
"""

from __future__ import annotations

from typing import Any, Dict, List, Optional, TypedDict

import jsonschema

from maskbind.errors import ContainerError


# ===== Run manifest (every output directory) =====
class Manifest(TypedDict, total=False):
    command: str
    config_hash: str
    code_version: str
    seeds: List[int]
    created: str
    files: List[str]
    checkpoint_hash: Optional[str]
    entities: Dict[str, Any]
    extra: Dict[str, Any]


# ===== One line of metrics.jsonl (trainer) =====
class MetricsLine(TypedDict):
    step: int
    phase: int
    fm_loss: float
    focal_loss: float
    total_loss: float
    grad_norm: float
    dropped: float
    supervised: bool


# ===== Evaluation report (eval) =====
class EvalReportDict(TypedDict):
    mode: str
    n_samples: int
    seeds: List[int]
    mask_iou: List[Optional[float]]
    attribution: List[Optional[float]]
    swap_error: Optional[float]
    distribution_distance: Optional[float]
    attribution_ratio: List[Optional[float]]
    heldout_mask_iou: List[Optional[float]]


_NUMBER_OR_NULL = {"type": ["number", "null"]}

MANIFEST_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["command", "config_hash", "code_version", "seeds", "created"],
    "properties": {
        "command": {"type": "string"},
        "config_hash": {"type": "string", "minLength": 64, "maxLength": 64},
        "code_version": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "created": {"type": "string"},
        "files": {"type": "array", "items": {"type": "string"}},
        "checkpoint_hash": {"type": ["string", "null"]},
        "entities": {"type": "object"},
        "extra": {"type": "object"},
    },
}

METRICS_LINE_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["step", "phase", "fm_loss", "focal_loss", "total_loss", "grad_norm",
                 "dropped", "supervised"],
    "properties": {
        "step": {"type": "integer", "minimum": 0},
        "phase": {"type": "integer", "enum": [1, 2]},
        "fm_loss": {"type": "number", "minimum": 0},
        "focal_loss": {"type": "number", "minimum": 0},
        "total_loss": {"type": "number", "minimum": 0},
        "grad_norm": {"type": "number", "minimum": 0},
        "dropped": {"type": "number", "minimum": 0, "maximum": 1},
        "supervised": {"type": "boolean"},
    },
}

EVAL_REPORT_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["mode", "n_samples", "seeds", "mask_iou", "attribution", "swap_error",
                 "distribution_distance", "attribution_ratio"],
    "properties": {
        "mode": {"type": "string",
                 "enum": ["predicted_mask", "global", "id_embedding", "fixed_mask",
                          "ground_truth"]},
        "n_samples": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "mask_iou": {"type": "array",
                     "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1}},
        "attribution": {"type": "array",
                        "items": {"type": ["number", "null"], "minimum": -1, "maximum": 1}},
        "swap_error": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "distribution_distance": _NUMBER_OR_NULL,
        "attribution_ratio": {"type": "array", "items": _NUMBER_OR_NULL},
        "heldout_mask_iou": {"type": "array",
                             "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1}},
    },
}


def validate_json(instance: Any, schema: Dict[str, Any], what: str = "document") -> None:
    """Validate `instance`; schema violations surface as ContainerError (exit 4)."""
    try:
        jsonschema.validate(instance=instance, schema=schema)
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ContainerError(f"invalid {what} at {path}: {e.message}") from e


__all__ = [
    "Manifest", "MetricsLine", "EvalReportDict",
    "MANIFEST_SCHEMA", "METRICS_LINE_SCHEMA", "EVAL_REPORT_SCHEMA", "validate_json",
]
