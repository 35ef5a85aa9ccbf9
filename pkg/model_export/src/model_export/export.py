"""Build a tapped VGG16 and export it as a portable inference graph bundle.

The graph file is a NumPy ``.npz`` archive in the format the icon pipeline's
backbone loader documents: a ``__meta__`` uint8 array holding UTF-8 JSON
(format "iconsim-graph", version 1, ordered layer list, tap names) plus
``w:<layer>:weight`` / ``w:<layer>:bias`` float32 arrays for every conv2d
and linear layer. The network is the VGG16 feature stack through pool5,
then flatten, fc6 and fc7 with their ReLUs; fc8 is dropped. Taps sit after
the ReLU in both places: ``content`` at relu7 (4096 values) and ``style``
at relu5_1 (512 maps of 14x14 at input 224).

Alongside the graph the bundle directory gets ``metadata.json`` (variant,
tap names, input size, preprocessing means, weight provenance) and
``refpack/``, ten fixed-seed random inputs with their expected tap
activations computed in the source framework.

The consumer feeds the graph mean-subtracted RGB tensors on the 0..255
scale. Torchvision's VGG16 additionally divides each channel by 255*std,
so that scale is folded into the conv1_1 weights once; the folded float32
set is the single canonical parameter set behind both the exported graph
and the reference activations. Reference forwards run in float64 on those
float32 parameters, which keeps the cross-runtime comparison about layer
wiring rather than accumulation noise.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .refpack import write_array

GRAPH_FORMAT = "iconsim-graph"
GRAPH_VERSION = 1

VARIANT = "vgg16"
INPUT_SIZE = 224
INPUT_CHANNELS = 3
# Per-channel RGB means on the 0..255 scale; must match the consumer's
# preprocessing defaults (255 * the ImageNet unit-scale means).
MEANS = (123.675, 116.28, 103.53)
# Unit-scale ImageNet stds folded into conv1_1 as 1/(255*std).
IMAGENET_STDS = (0.229, 0.224, 0.225)

CONTENT_TAP = "relu7"
STYLE_TAP = "relu5_1"
CONTENT_DIM = 4096
STYLE_SHAPE = (512, 14, 14)

GRAPH_FILENAME = "vgg16_taps.npz"
METADATA_FILENAME = "metadata.json"
REFPACK_DIRNAME = "refpack"
REFPACK_COUNT = 10
REFPACK_SEED = 1207


class ExportError(RuntimeError):
    """Raised when weights cannot be obtained or the network miswires."""


@dataclass(frozen=True)
class _Layer:
    name: str
    kind: str
    # torchvision state_dict prefix for parametrized layers, else None
    source: str | None = None
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


def _vgg16_layers() -> list[_Layer]:
    """Sequential layer table with names, shapes and torchvision keys."""
    widths = (64, 128, 256, 512, 512)
    repeats = (2, 2, 3, 3, 3)
    layers: list[_Layer] = []
    feat = 0
    in_c = INPUT_CHANNELS
    for block, (width, reps) in enumerate(zip(widths, repeats), start=1):
        for conv in range(1, reps + 1):
            layers.append(
                _Layer(
                    name=f"conv{block}_{conv}",
                    kind="conv2d",
                    source=f"features.{feat}",
                    in_dim=in_c,
                    out_dim=width,
                    kernel=3,
                    padding=1,
                )
            )
            feat += 1
            layers.append(_Layer(name=f"relu{block}_{conv}", kind="relu"))
            feat += 1
            in_c = width
        layers.append(_Layer(name=f"pool{block}", kind="maxpool2d", kernel=2, stride=2))
        feat += 1
    # Five stride-2 pools bring 224 down to 7, so fc6 sees 512*7*7 inputs.
    flat = widths[-1] * (INPUT_SIZE // 2 ** len(widths)) ** 2
    layers.append(_Layer(name="flatten", kind="flatten"))
    layers.append(
        _Layer(name="fc6", kind="linear", source="classifier.0", in_dim=flat, out_dim=4096)
    )
    layers.append(_Layer(name="relu6", kind="relu"))
    layers.append(
        _Layer(name="fc7", kind="linear", source="classifier.3", in_dim=4096, out_dim=4096)
    )
    layers.append(_Layer(name="relu7", kind="relu"))
    return layers


Weights = dict[str, tuple[np.ndarray, np.ndarray]]


def pretrained_weights() -> tuple[Weights, dict]:
    """Fetch torchvision's ImageNet VGG16 parameters as float32 arrays.

    Network access (or a local torch hub cache) is required; failure to
    obtain the weights is surfaced as ExportError.
    """
    try:
        from torchvision.models import VGG16_Weights, vgg16

        model = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise ExportError(f"pretrained VGG16 weights unavailable: {exc}") from exc
    state = model.state_dict()
    weights: Weights = {}
    for layer in _vgg16_layers():
        if layer.source is None:
            continue
        w = state[f"{layer.source}.weight"].detach().cpu().numpy().astype(np.float32)
        b = state[f"{layer.source}.bias"].detach().cpu().numpy().astype(np.float32)
        weights[layer.name] = (w, b)
    return weights, {"source": "torchvision", "tag": "IMAGENET1K_V1"}


def random_weights(seed: int = 0) -> tuple[Weights, dict]:
    """He-scaled Philox draws with zero biases, for offline use.

    Generated with numpy's counter-based generator rather than torch's
    init so the same seed gives the same bundle on any torch version.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    weights: Weights = {}
    for layer in _vgg16_layers():
        if layer.source is None:
            continue
        if layer.kind == "conv2d":
            shape = (layer.out_dim, layer.in_dim, layer.kernel, layer.kernel)
            fan_in = layer.in_dim * layer.kernel * layer.kernel
        else:
            shape = (layer.out_dim, layer.in_dim)
            fan_in = layer.in_dim
        std = (2.0 / fan_in) ** 0.5
        w = (rng.standard_normal(shape) * std).astype(np.float32)
        b = np.zeros(layer.out_dim, dtype=np.float32)
        weights[layer.name] = (w, b)
    return weights, {
        "source": "random",
        "init": "he-normal",
        "generator": "philox",
        "seed": int(seed),
        "biases": "zero",
    }


def _fold_input_scale(weights: Weights) -> None:
    """Divide conv1_1 weights per input channel by 255*std, in place.

    After folding, the network accepts mean-subtracted 0..255 tensors
    directly instead of torchvision's fully normalized inputs.
    """
    w, b = weights["conv1_1"]
    folded = w.astype(np.float64)
    for c, std in enumerate(IMAGENET_STDS):
        folded[:, c] /= 255.0 * std
    weights["conv1_1"] = (folded.astype(np.float32), b)


def _weights_digest(weights: Weights) -> str:
    h = hashlib.sha256()
    for name in sorted(weights):
        w, b = weights[name]
        for tag, arr in (("weight", w), ("bias", b)):
            h.update(f"{name}:{tag}:{arr.shape}".encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def _graph_meta(provenance: dict) -> dict:
    specs = []
    for layer in _vgg16_layers():
        spec: dict = {"name": layer.name, "kind": layer.kind}
        if layer.kind == "conv2d":
            spec["stride"] = layer.stride
            spec["padding"] = layer.padding
        elif layer.kind == "maxpool2d":
            spec["kernel"] = layer.kernel
            spec["stride"] = layer.stride
        specs.append(spec)
    return {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "input_size": INPUT_SIZE,
        "input_channels": INPUT_CHANNELS,
        "layers": specs,
        "taps": {"content": CONTENT_TAP, "style": STYLE_TAP},
        "provenance": {"variant": VARIANT, "weights": provenance},
    }


def _write_graph(path: Path, meta: dict, weights: Weights) -> None:
    arrays: dict[str, np.ndarray] = {
        "__meta__": np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
    }
    for name, (w, b) in weights.items():
        arrays[f"w:{name}:weight"] = w
        arrays[f"w:{name}:bias"] = b
    np.savez(path, **arrays)


def _reference_forward(weights: Weights, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run one (3, 224, 224) tensor through torch ops in float64.

    Weights are lifted to float64 one layer at a time to bound peak
    memory; fc6 alone is 800 MB in double precision.
    """
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64)).unsqueeze(0)
    content = style = None
    with torch.no_grad():
        for layer in _vgg16_layers():
            if layer.kind == "conv2d":
                w, b = weights[layer.name]
                t = F.conv2d(
                    t,
                    torch.from_numpy(w.astype(np.float64)),
                    torch.from_numpy(b.astype(np.float64)),
                    stride=layer.stride,
                    padding=layer.padding,
                )
            elif layer.kind == "relu":
                t = F.relu(t)
            elif layer.kind == "maxpool2d":
                t = F.max_pool2d(t, layer.kernel, layer.stride)
            elif layer.kind == "flatten":
                t = torch.flatten(t, 1)
            elif layer.kind == "linear":
                w, b = weights[layer.name]
                t = F.linear(
                    t, torch.from_numpy(w.astype(np.float64)), torch.from_numpy(b.astype(np.float64))
                )
            if layer.name == STYLE_TAP:
                style = t[0].numpy()
            elif layer.name == CONTENT_TAP:
                content = t[0].numpy()
    if content is None or style is None:
        raise ExportError("tap layers were never reached")
    if content.shape != (CONTENT_DIM,) or style.shape != STYLE_SHAPE:
        raise ExportError(
            f"shape mismatch: content {content.shape}, style {style.shape}"
        )
    if not (np.isfinite(content).all() and np.isfinite(style).all()):
        raise ExportError("reference forward produced non-finite activations")
    return content, style


def _reference_inputs(seed: int, count: int) -> list[np.ndarray]:
    """Fixed-seed mean-subtracted random tensors in the graph's input domain."""
    rng = np.random.Generator(np.random.Philox(seed))
    offsets = np.asarray(MEANS, dtype=np.float64)[:, None, None]
    inputs = []
    for _ in range(count):
        raw = rng.uniform(0.0, 255.0, size=(INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE))
        inputs.append((raw - offsets).astype(np.float32))
    return inputs


@dataclass(frozen=True)
class ExportBundle:
    root: Path
    graph_path: Path
    metadata_path: Path
    refpack_dir: Path
    metadata: dict = field(repr=False)


def export(
    output_dir: str | Path,
    weights_source: str = "pretrained",
    init_seed: int = 0,
    refpack_seed: int = REFPACK_SEED,
    refpack_count: int = REFPACK_COUNT,
    progress=None,
) -> ExportBundle:
    """Write the graph, metadata.json and refpack/ under output_dir.

    weights_source is "pretrained" (torchvision download or cache) or
    "random" (seeded offline fallback). progress, if given, receives one
    short string per completed step.
    """
    import torch

    torch.set_num_threads(1)

    def note(msg: str) -> None:
        if progress is not None:
            progress(msg)

    if weights_source == "pretrained":
        weights, provenance = pretrained_weights()
    elif weights_source == "random":
        weights, provenance = random_weights(init_seed)
    else:
        raise ExportError(f"unknown weights source {weights_source!r}")
    _fold_input_scale(weights)
    note(f"weights ready ({provenance['source']})")

    root = Path(output_dir)
    root.mkdir(parents=True, exist_ok=True)
    graph_path = root / GRAPH_FILENAME
    meta = _graph_meta(provenance)
    _write_graph(graph_path, meta, weights)
    note(f"graph written to {graph_path}")

    refpack_dir = root / REFPACK_DIRNAME
    refpack_dir.mkdir(exist_ok=True)
    inputs = _reference_inputs(refpack_seed, refpack_count)
    for i, inp in enumerate(inputs):
        # Forward the float32-quantized input, exactly what consumers read.
        content, style = _reference_forward(weights, inp.astype(np.float64))
        write_array(refpack_dir / f"input_{i:02d}.bin", inp)
        write_array(refpack_dir / f"content_{i:02d}.bin", content)
        write_array(refpack_dir / f"style_{i:02d}.bin", style)
        note(f"refpack {i + 1}/{len(inputs)}")

    metadata = {
        "format": "vgg16-tap-bundle",
        "version": 1,
        "variant": VARIANT,
        "graph": GRAPH_FILENAME,
        "input_size": INPUT_SIZE,
        "input_channels": INPUT_CHANNELS,
        "means": list(MEANS),
        "taps": {"content": CONTENT_TAP, "style": STYLE_TAP},
        "tap_shapes": {"content": [CONTENT_DIM], "style": list(STYLE_SHAPE)},
        "weights": provenance,
        "weights_digest": _weights_digest(weights),
        "input_scale_folded": {
            "layer": "conv1_1",
            "stds": list(IMAGENET_STDS),
            "divisors": [255.0 * s for s in IMAGENET_STDS],
        },
        "refpack": {
            "dir": REFPACK_DIRNAME,
            "count": refpack_count,
            "seed": refpack_seed,
            "dtype": "float32",
            "reference_precision": "float64",
            "files": {
                "input": "input_NN.bin",
                "content": "content_NN.bin",
                "style": "style_NN.bin",
            },
        },
    }
    metadata_path = root / METADATA_FILENAME
    metadata_path.write_text(json.dumps(metadata, indent=2) + "\n")
    note("metadata written")
    return ExportBundle(
        root=root,
        graph_path=graph_path,
        metadata_path=metadata_path,
        refpack_dir=refpack_dir,
        metadata=metadata,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="model-export",
        description="Export a tapped VGG16 inference graph with reference activations",
    )
    parser.add_argument("--out", required=True, help="bundle output directory")
    parser.add_argument(
        "--weights",
        choices=("pretrained", "random"),
        default="pretrained",
        help="parameter source; random is the seeded offline fallback",
    )
    parser.add_argument(
        "--init-seed", type=int, default=0, help="seed for --weights random"
    )
    parser.add_argument(
        "--refpack-seed", type=int, default=REFPACK_SEED, help="seed for reference inputs"
    )
    parser.add_argument(
        "--count", type=int, default=REFPACK_COUNT, help="number of reference inputs"
    )
    args = parser.parse_args(argv)
    started = time.monotonic()
    try:
        bundle = export(
            args.out,
            weights_source=args.weights,
            init_seed=args.init_seed,
            refpack_seed=args.refpack_seed,
            refpack_count=args.count,
            progress=lambda msg: print(msg, file=sys.stderr),
        )
    except ExportError as exc:
        print(f"model-export: error: {exc}", file=sys.stderr)
        return 1
    summary = {
        "graph": str(bundle.graph_path),
        "metadata": str(bundle.metadata_path),
        "refpack": str(bundle.refpack_dir),
        "weights_digest": bundle.metadata["weights_digest"],
        "seconds": round(time.monotonic() - started, 1),
    }
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
