"""Pipeline configuration and provenance hashing.

Every artifact written by the pipeline (embedding stores, reports) embeds a
short hash of the resolved configuration so that artifacts produced under
different settings cannot be silently mixed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Any

# Per-channel RGB means subtracted during preprocessing, on the 0..255 pixel
# scale. They are echoed into every embedding-store header.
DEFAULT_MEANS: tuple[float, float, float] = (123.675, 116.28, 103.53)

DEFAULT_PROJECTION_SEED = 1234
DEFAULT_ALPHA = 6.0
DEFAULT_THRESHOLD_STEP = 0.01


@dataclass(frozen=True)
class PipelineConfig:
    """User-facing knobs for the encode/query pipeline.

    ``backbone`` is either a path to a serialized inference graph or a spec
    of the form ``stub:<seed>`` selecting the built-in small test backbone.
    ``input_size`` and ``style_k`` default to the backbone's native input
    size and content dimension respectively when left as None.
    """

    backbone: str = "stub:0"
    input_size: int | None = None
    means: tuple[float, float, float] = DEFAULT_MEANS
    projection_seed: int = DEFAULT_PROJECTION_SEED
    style_k: int | None = None
    metric_kind: str = "combined"
    metric_norm: str = "cos"
    alpha: float = DEFAULT_ALPHA
    threshold_step: float = DEFAULT_THRESHOLD_STEP

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "means" in raw:
            raw = dict(raw)
            raw["means"] = tuple(float(m) for m in raw["means"])
        return cls(**raw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "backbone": self.backbone,
            "input_size": self.input_size,
            "means": list(self.means),
            "projection_seed": self.projection_seed,
            "style_k": self.style_k,
            "metric_kind": self.metric_kind,
            "metric_norm": self.metric_norm,
            "alpha": self.alpha,
            "threshold_step": self.threshold_step,
        }

    def updated(self, **changes: Any) -> "PipelineConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        if "means" in changes:
            changes["means"] = tuple(float(m) for m in changes["means"])
        return replace(self, **changes)


@dataclass(frozen=True)
class ResolvedConfig:
    """Configuration after binding to a concrete backbone.

    The hash covers exactly the fields that determine embedding values, so
    two stores with equal hashes are byte-compatible.
    """

    backbone_id: str
    input_size: int
    means: tuple[float, float, float]
    projection_seed: int
    style_k: int
    content_dim: int
    style_filters: int

    @property
    def style_input_dim(self) -> int:
        """Length of the flattened upper-triangular style vector."""
        n = self.style_filters
        return n * (n + 1) // 2

    def identity(self) -> dict[str, Any]:
        return {
            "backbone_id": self.backbone_id,
            "input_size": self.input_size,
            "means": [float(m) for m in self.means],
            "projection_seed": int(self.projection_seed),
            "style_k": int(self.style_k),
        }

    def hash_bytes(self) -> bytes:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).digest()[:16]

    def hash_hex(self) -> str:
        return self.hash_bytes().hex()
