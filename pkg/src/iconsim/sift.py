"""SIFT keypoint baseline and its closest-pair aggregate distance.

Descriptors come from OpenCV's SIFT with the original publication's
parameters (3 octave layers, contrast threshold 0.04, edge threshold 10,
sigma 1.6). The aggregate distance from a query icon to a candidate icon
sums, over every query descriptor, the L2 distance to its closest
candidate descriptor. That sum is deliberately asymmetric in its
arguments; do not symmetrize it.

Descriptor cache file: a flat sequence of per-icon records in corpus row
order, each record a little-endian u32 keypoint count t followed by
t × 128 little-endian float32 values.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np

from .backbone import load_image
from .corpus import Corpus
from .errors import IncomparableDescriptorsError, StoreError

SIFT_PARAMS = dict(
    nfeatures=0,
    nOctaveLayers=3,
    contrastThreshold=0.04,
    edgeThreshold=10.0,
    sigma=1.6,
)

DESCRIPTOR_DIM = 128


def sift_descriptors(image: np.ndarray) -> np.ndarray:
    """Detect SIFT keypoints on an RGB image; (t, 128) float32, t may be 0."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image shaped (H, W, 3), got {arr.shape}")
    pixels = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    gray = cv2.cvtColor(pixels, cv2.COLOR_RGB2GRAY)
    detector = cv2.SIFT_create(**SIFT_PARAMS)
    _, descriptors = detector.detectAndCompute(gray, None)
    if descriptors is None:
        return np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32)
    return descriptors.astype(np.float32)


def sift_distance(query: np.ndarray, candidate: np.ndarray) -> float:
    """Sum over query descriptors of the L2 distance to the closest candidate."""
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(candidate, dtype=np.float64)
    for name, d in (("query", q), ("candidate", c)):
        if d.ndim != 2 or d.shape[1] != DESCRIPTOR_DIM:
            raise ValueError(f"{name} descriptors must be (t, {DESCRIPTOR_DIM})")
    if q.shape[0] == 0 or c.shape[0] == 0:
        raise IncomparableDescriptorsError(
            "cannot compare icons without keypoints "
            f"(query t={q.shape[0]}, candidate t={c.shape[0]})"
        )
    total = 0.0
    for qd in q:
        d2 = ((c - qd) ** 2).sum(axis=1)
        total += math.sqrt(float(d2.min()))
    return total


def sift_corpus(
    corpus: Corpus, progress: Callable[[int, int], None] | None = None
) -> list[np.ndarray]:
    """Descriptor sets for every icon, in manifest row order."""
    sets = []
    n = len(corpus)
    for i, record in enumerate(corpus, start=1):
        sets.append(sift_descriptors(load_image(corpus.resolve_icon_path(record))))
        if progress is not None:
            progress(i, n)
    return sets


def write_descriptor_cache(path: str | Path, sets: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for desc in sets:
            d = np.ascontiguousarray(desc, dtype="<f4")
            if d.ndim != 2 or d.shape[1] != DESCRIPTOR_DIM:
                raise ValueError(f"descriptor set shaped {d.shape} cannot be cached")
            fh.write(struct.pack("<I", d.shape[0]))
            fh.write(d.tobytes(order="C"))


def read_descriptor_cache(path: str | Path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    sets = []
    offset = 0
    while offset < len(raw):
        if offset + 4 > len(raw):
            raise StoreError(f"descriptor cache {path} is truncated")
        (t,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        nbytes = t * DESCRIPTOR_DIM * 4
        if offset + nbytes > len(raw):
            raise StoreError(f"descriptor cache {path} is truncated")
        block = np.frombuffer(raw, dtype="<f4", count=t * DESCRIPTOR_DIM, offset=offset)
        sets.append(block.reshape(t, DESCRIPTOR_DIM).copy())
        offset += nbytes
    return sets
