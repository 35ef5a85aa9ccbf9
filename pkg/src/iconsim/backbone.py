"""Icon preprocessing and feature extraction from a serialized conv network.

The backbone is loaded from a portable inference-graph file so the core
pipeline never depends on a training framework. The file is a NumPy ``.npz``
archive with this layout:

* ``__meta__``: uint8 array holding a UTF-8 JSON document::

      {
        "format": "iconsim-graph",
        "version": 1,
        "input_size": 224,
        "input_channels": 3,
        "layers": [
          {"name": "conv1_1", "kind": "conv2d", "stride": 1, "padding": 1},
          {"name": "relu1_1", "kind": "relu"},
          {"name": "pool1",   "kind": "maxpool2d", "kernel": 2, "stride": 2},
          {"name": "flatten", "kind": "flatten"},
          {"name": "fc6",     "kind": "linear"},
          ...
        ],
        "taps": {"content": "<layer name>", "style": "<layer name>"},
        "provenance": {...}
      }

* ``w:<layer>:weight`` / ``w:<layer>:bias``: float32 parameter arrays for
  every conv2d (weight shaped (out, in, kh, kw)) and linear (weight shaped
  (out, in)) layer. Kernel sizes and feature counts are read from the weight
  shapes; meta carries only what weights cannot express.

``provenance`` is free-form and ignored by the executor. Layer kinds are
conv2d, relu, maxpool2d, flatten (C-order) and linear. Execution is plain
float64 NumPy, so the same file gives bit-identical features on every run.

The content tap must be a 1-d activation (the last fully connected layer
after its ReLU) and the style tap a conv feature map, reported as an
``(N_filters, H*W)`` matrix of post-ReLU activations.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import DEFAULT_MEANS
from .errors import BackboneError, ImageDecodeError

GRAPH_FORMAT = "iconsim-graph"
GRAPH_VERSION = 1

STUB_INPUT_SIZE = 16
STUB_STYLE_FILTERS = 8
STUB_CONTENT_DIM = 32

# Upper bound on the materialized im2col block per matmul call.
_CONV_CHUNK_BYTES = 64 * 1024 * 1024

_LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "flatten", "linear")


@dataclass(frozen=True)
class PreprocessedImage:
    """Channel-first mean-subtracted tensor ready for the backbone."""

    tensor: np.ndarray


def load_image(path: str | Path) -> np.ndarray:
    """Decode an icon file to an RGB float64 array (H, W, 3) in 0..255."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr


def preprocess(
    image: np.ndarray,
    input_size: int = 224,
    means: tuple[float, float, float] = DEFAULT_MEANS,
) -> PreprocessedImage:
    """Resize to input_size², reorder channel-first, subtract channel means.

    Accepts an (H, W, 3) RGB array in the 0..255 range; a 2-d grayscale
    array is replicated across channels. The resize is bilinear and skipped
    entirely when the image is already input_size².
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=-1)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageDecodeError(
            f"expected an RGB image shaped (H, W, 3), got shape {arr.shape}"
        )
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageDecodeError("image has no pixels")
    if not np.isfinite(arr).all():
        raise ImageDecodeError("image contains non-finite values")
    if arr.shape[0] != input_size or arr.shape[1] != input_size:
        arr = cv2.resize(arr, (input_size, input_size), interpolation=cv2.INTER_LINEAR)
    tensor = arr.transpose(2, 0, 1) - np.asarray(means, dtype=np.float64)[:, None, None]
    return PreprocessedImage(tensor=tensor)


def _conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
            stride: int, padding: int) -> np.ndarray:
    out_c, in_c, kh, kw = weight.shape
    if x.shape[0] != in_c:
        raise BackboneError(
            f"conv expects {in_c} input channels, feature map has {x.shape[0]}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (x.shape[1] - kh) // stride + 1
    wo = (x.shape[2] - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise BackboneError("feature map smaller than conv kernel")
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    w2d = weight.reshape(out_c, in_c * kh * kw)
    out = np.empty((out_c, ho, wo), dtype=np.float64)
    row_bytes = wo * in_c * kh * kw * 8
    chunk = max(1, _CONV_CHUNK_BYTES // max(row_bytes, 1))
    for r0 in range(0, ho, chunk):
        r1 = min(ho, r0 + chunk)
        cols = win[:, r0:r1].transpose(1, 2, 0, 3, 4).reshape((r1 - r0) * wo, -1)
        out[:, r0:r1, :] = (cols @ w2d.T).T.reshape(out_c, r1 - r0, wo)
    if bias is not None:
        out += bias[:, None, None]
    return out


def _maxpool2d(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    if x.shape[1] < kernel or x.shape[2] < kernel:
        raise BackboneError("feature map smaller than pooling window")
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    return win.max(axis=(3, 4))


@dataclass(frozen=True)
class GraphLayer:
    name: str
    kind: str
    stride: int = 1
    padding: int = 0
    kernel: int = 0


class InferenceGraph:
    """Sequential conv network executed in float64 with named tap outputs."""

    def __init__(self, meta: dict, weights: dict[str, np.ndarray]):
        if meta.get("format") != GRAPH_FORMAT:
            raise BackboneError(f"not an inference graph (format={meta.get('format')!r})")
        if meta.get("version") != GRAPH_VERSION:
            raise BackboneError(f"unsupported graph version {meta.get('version')!r}")
        self.input_size = int(meta["input_size"])
        self.input_channels = int(meta.get("input_channels", 3))
        self.meta = meta
        self.layers: list[GraphLayer] = []
        names = set()
        for spec in meta["layers"]:
            name, kind = spec["name"], spec["kind"]
            if kind not in _LAYER_KINDS:
                raise BackboneError(f"layer {name!r} has unknown kind {kind!r}")
            if name in names:
                raise BackboneError(f"duplicate layer name {name!r}")
            names.add(name)
            self.layers.append(
                GraphLayer(
                    name=name,
                    kind=kind,
                    stride=int(spec.get("stride", 1)),
                    padding=int(spec.get("padding", 0)),
                    kernel=int(spec.get("kernel", 0)),
                )
            )
        self.taps: dict[str, str] = dict(meta["taps"])
        for tap, layer_name in self.taps.items():
            if layer_name not in names:
                raise BackboneError(f"tap {tap!r} references unknown layer {layer_name!r}")
        self._weights: dict[str, np.ndarray] = {}
        for layer in self.layers:
            if layer.kind not in ("conv2d", "linear"):
                continue
            wkey = f"w:{layer.name}:weight"
            if wkey not in weights:
                raise BackboneError(f"missing weights for layer {layer.name!r}")
            self._weights[wkey] = np.asarray(weights[wkey], dtype=np.float64)
            bkey = f"w:{layer.name}:bias"
            if bkey in weights:
                self._weights[bkey] = np.asarray(weights[bkey], dtype=np.float64)
        self._stored_weights = {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}

    @property
    def graph_id(self) -> str:
        """Stable hex digest of the graph definition and all weights."""
        h = hashlib.sha256()
        h.update(json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode())
        for key in sorted(self._stored_weights):
            arr = self._stored_weights[key]
            h.update(key.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def static_shapes(self) -> dict[str, tuple[int, ...]]:
        """Output shape of every layer, inferred without running the network."""
        shape: tuple[int, ...] = (self.input_channels, self.input_size, self.input_size)
        shapes = {}
        for layer in self.layers:
            if layer.kind == "conv2d":
                w = self._weights[f"w:{layer.name}:weight"]
                out_c, _, kh, kw = w.shape
                h = (shape[1] + 2 * layer.padding - kh) // layer.stride + 1
                wd = (shape[2] + 2 * layer.padding - kw) // layer.stride + 1
                shape = (out_c, h, wd)
            elif layer.kind == "maxpool2d":
                h = (shape[1] - layer.kernel) // layer.stride + 1
                wd = (shape[2] - layer.kernel) // layer.stride + 1
                shape = (shape[0], h, wd)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "linear":
                w = self._weights[f"w:{layer.name}:weight"]
                if w.shape[1] != shape[0]:
                    raise BackboneError(
                        f"linear layer {layer.name!r} expects {w.shape[1]} inputs, "
                        f"gets {shape[0]}"
                    )
                shape = (w.shape[0],)
            shapes[layer.name] = shape
        return shapes

    def run(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Execute the network on one (C, H, W) tensor; return tap outputs."""
        if x.shape != (self.input_channels, self.input_size, self.input_size):
            raise BackboneError(
                f"input shape {x.shape} does not match graph input "
                f"({self.input_channels}, {self.input_size}, {self.input_size})"
            )
        x = np.asarray(x, dtype=np.float64)
        wanted = {layer_name: tap for tap, layer_name in self.taps.items()}
        outputs: dict[str, np.ndarray] = {}
        for layer in self.layers:
            if layer.kind == "conv2d":
                x = _conv2d(
                    x,
                    self._weights[f"w:{layer.name}:weight"],
                    self._weights.get(f"w:{layer.name}:bias"),
                    layer.stride,
                    layer.padding,
                )
            elif layer.kind == "relu":
                x = np.maximum(x, 0.0)
            elif layer.kind == "maxpool2d":
                x = _maxpool2d(x, layer.kernel, layer.stride)
            elif layer.kind == "flatten":
                x = x.reshape(-1)
            elif layer.kind == "linear":
                w = self._weights[f"w:{layer.name}:weight"]
                if x.ndim != 1 or x.shape[0] != w.shape[1]:
                    raise BackboneError(
                        f"linear layer {layer.name!r} expects {w.shape[1]} inputs"
                    )
                b = self._weights.get(f"w:{layer.name}:bias")
                x = w @ x + (b if b is not None else 0.0)
            if layer.name in wanted:
                outputs[wanted[layer.name]] = x
        missing = set(self.taps) - set(outputs)
        if missing:
            raise BackboneError(f"taps {sorted(missing)} were never produced")
        return outputs


def save_graph(path: str | Path, graph: InferenceGraph) -> None:
    arrays = {
        "__meta__": np.frombuffer(
            json.dumps(graph.meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
    }
    arrays.update(graph._stored_weights)
    np.savez(path, **arrays)


def load_graph(path: str | Path) -> InferenceGraph:
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise BackboneError(f"{path} has no __meta__ entry")
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            weights = {k: data[k] for k in data.files if k.startswith("w:")}
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise BackboneError(f"cannot load inference graph {path}: {exc}") from exc
    return InferenceGraph(meta, weights)


def build_stub_graph(seed: int = 0, zero_weights: bool = False) -> InferenceGraph:
    """Small fixed-seed network with the same tap structure as the real one.

    Input 16², style tap of 8 filters over a 4×4 map (M=16), content tap of
    32 values. Weights are He-scaled Philox draws so activations stay well
    inside float range; zero_weights swaps in all-zero parameters.
    """
    meta = {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "input_size": STUB_INPUT_SIZE,
        "input_channels": 3,
        "layers": [
            {"name": "conv1", "kind": "conv2d", "stride": 1, "padding": 1},
            {"name": "relu1", "kind": "relu"},
            {"name": "pool1", "kind": "maxpool2d", "kernel": 2, "stride": 2},
            {"name": "conv2", "kind": "conv2d", "stride": 1, "padding": 1},
            {"name": "relu2", "kind": "relu"},
            {"name": "pool2", "kind": "maxpool2d", "kernel": 2, "stride": 2},
            {"name": "conv3", "kind": "conv2d", "stride": 1, "padding": 1},
            {"name": "relu3", "kind": "relu"},
            {"name": "pool3", "kind": "maxpool2d", "kernel": 2, "stride": 2},
            {"name": "flatten", "kind": "flatten"},
            {"name": "fc", "kind": "linear"},
            {"name": "relu_fc", "kind": "relu"},
        ],
        "taps": {"content": "relu_fc", "style": "relu3"},
        "provenance": {"kind": "stub", "seed": seed},
    }
    dims = [(3, 6), (6, 8), (8, STUB_STYLE_FILTERS)]
    rng = np.random.Generator(np.random.Philox(seed))
    weights: dict[str, np.ndarray] = {}
    for i, (cin, cout) in enumerate(dims, start=1):
        scale = 0.0 if zero_weights else (2.0 / (cin * 9)) ** 0.5
        weights[f"w:conv{i}:weight"] = (
            rng.standard_normal((cout, cin, 3, 3)) * scale
        ).astype(np.float32)
        weights[f"w:conv{i}:bias"] = (
            np.zeros(cout) if zero_weights else rng.standard_normal(cout) * 0.1
        ).astype(np.float32)
    fc_in = STUB_STYLE_FILTERS * 2 * 2
    fc_scale = 0.0 if zero_weights else (2.0 / fc_in) ** 0.5
    weights["w:fc:weight"] = (
        rng.standard_normal((STUB_CONTENT_DIM, fc_in)) * fc_scale
    ).astype(np.float32)
    weights["w:fc:bias"] = (
        np.zeros(STUB_CONTENT_DIM)
        if zero_weights
        else rng.standard_normal(STUB_CONTENT_DIM) * 0.1
    ).astype(np.float32)
    return InferenceGraph(meta, weights)


@dataclass(frozen=True)
class BackboneHandle:
    """Loaded, immutable backbone plus the tap geometry downstream code needs."""

    graph: InferenceGraph
    source: str
    backbone_id: str
    input_size: int
    content_dim: int
    style_filters: int
    style_positions: int


def _handle_from_graph(graph: InferenceGraph, source: str, backbone_id: str) -> BackboneHandle:
    shapes = graph.static_shapes()
    content_shape = shapes[graph.taps["content"]]
    style_shape = shapes[graph.taps["style"]]
    if len(content_shape) != 1:
        raise BackboneError(f"content tap has shape {content_shape}, expected a vector")
    if len(style_shape) != 3:
        raise BackboneError(f"style tap has shape {style_shape}, expected a conv map")
    return BackboneHandle(
        graph=graph,
        source=source,
        backbone_id=backbone_id,
        input_size=graph.input_size,
        content_dim=content_shape[0],
        style_filters=style_shape[0],
        style_positions=style_shape[1] * style_shape[2],
    )


_STUB_RE = re.compile(r"^stub(?:-zero)?:(\d+)$")


def resolve_backbone(source: str | Path) -> BackboneHandle:
    """Load a backbone from "stub:<seed>", "stub-zero:<seed>" or a graph file."""
    text = str(source)
    m = _STUB_RE.match(text)
    if m:
        graph = build_stub_graph(int(m.group(1)), zero_weights=text.startswith("stub-zero:"))
        return _handle_from_graph(graph, source=text, backbone_id=text)
    path = Path(text)
    if not path.exists():
        raise BackboneError(f"backbone source {text!r} is neither a stub spec nor a file")
    graph = load_graph(path)
    return _handle_from_graph(graph, source=text, backbone_id=f"graph:{graph.graph_id}")


def extract(handle: BackboneHandle, img: PreprocessedImage) -> tuple[np.ndarray, np.ndarray]:
    """Run one preprocessed icon through the backbone.

    Returns the content vector and the style feature map flattened to
    (N_filters, M) with positions in row-major order. Both come from
    post-ReLU taps, so every entry is nonnegative; repeat calls on the same
    tensor are bit-identical.
    """
    tensor = np.asarray(img.tensor, dtype=np.float64)
    outputs = handle.graph.run(tensor)
    content = outputs["content"]
    style = outputs["style"]
    if content.ndim != 1 or content.shape[0] != handle.content_dim:
        raise BackboneError(
            f"content tap produced shape {content.shape}, expected ({handle.content_dim},)"
        )
    if style.ndim != 3 or style.shape[0] != handle.style_filters:
        raise BackboneError(
            f"style tap produced shape {style.shape}, expected "
            f"({handle.style_filters}, H, W)"
        )
    style = style.reshape(handle.style_filters, -1)
    if style.shape[1] != handle.style_positions:
        raise BackboneError(
            f"style tap yields {style.shape[1]} positions, expected {handle.style_positions}"
        )
    if not np.isfinite(content).all() or not np.isfinite(style).all():
        raise BackboneError("backbone produced non-finite activations")
    return content, style
