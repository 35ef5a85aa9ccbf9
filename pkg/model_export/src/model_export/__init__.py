"""One-shot exporter producing a tapped VGG16 inference-graph bundle."""

from .export import (
    CONTENT_TAP,
    GRAPH_FILENAME,
    METADATA_FILENAME,
    REFPACK_DIRNAME,
    STYLE_TAP,
    ExportBundle,
    ExportError,
    export,
    pretrained_weights,
    random_weights,
)
from .refpack import read_array, write_array

__version__ = "0.1.0"

__all__ = [
    "CONTENT_TAP",
    "GRAPH_FILENAME",
    "METADATA_FILENAME",
    "REFPACK_DIRNAME",
    "STYLE_TAP",
    "ExportBundle",
    "ExportError",
    "export",
    "pretrained_weights",
    "random_weights",
    "read_array",
    "write_array",
]
