"""Style and content embeddings plus the on-disk embedding store.

The style path is: backbone feature map F (N filters × M positions) →
Gram matrix G = F·Fᵀ → row-major upper-triangle flattening (diagonal
included) to a vector of length D = N(N+1)/2 → very sparse random
projection down to k values. The content path keeps the backbone's last
fully connected activation as-is.

The projection matrix is never stored. Entries take values
{−D^(1/4), 0, +D^(1/4)} with the nonzero probability 1/√D split evenly
between the two signs, and each column is regenerated on demand from a
counter-based Philox stream keyed by (seed, column index), so any worker
process rebuilds the identical matrix from the seed alone.

Store file layout (little-endian throughout)::

    magic            4 bytes  b"ICNE"
    version          u32      1
    flags            u32      bit 0: header carries a config hash
    content_dim      u32
    style_dim        u32
    row_count        u64
    projection_seed  u64
    input_size       u32
    means            3 × f64  preprocessing channel means
    config_hash      16 bytes (zeros when flag bit 0 is clear)
    rows             row_count × (content_dim + style_dim) × f32,
                     content values first, then style values

A JSON-lines sidecar at ``<store path>.ids.jsonl`` maps row index to
app_id, one ``{"row": i, "app_id": "..."}`` object per line, in row order.
"""
from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .backbone import BackboneHandle, extract, load_image, preprocess, resolve_backbone
from .config import PipelineConfig, ResolvedConfig
from .corpus import Corpus, IconRecord
from .errors import (
    AsymmetricMatrixError,
    ConfigMismatchError,
    DimensionMismatchError,
    StoreError,
)

STORE_MAGIC = b"ICNE"
STORE_VERSION = 1
FLAG_CONFIG_HASH = 0x1

_HEADER = struct.Struct("<4sIIIIQQI3d16s")


def gram(feature_map: np.ndarray) -> np.ndarray:
    """Correlation of filter responses: G_ij = Σ_k F_ik F_jk.

    The product is mirrored from its upper triangle so the result is
    symmetric to the last bit regardless of BLAS blocking.
    """
    f = np.asarray(feature_map, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionMismatchError(f"feature map must be 2-d, got shape {f.shape}")
    if not np.isfinite(f).all():
        raise ValueError("feature map contains non-finite values")
    g = f @ f.T
    upper = np.triu(g)
    return upper + np.triu(g, 1).T


def flatten_upper(g: np.ndarray) -> np.ndarray:
    """Row-major upper triangle of a symmetric matrix, diagonal included."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise DimensionMismatchError(f"expected a square matrix, got shape {g.shape}")
    scale = np.abs(g).max()
    tol = 1e-9 * (scale if scale > 0.0 else 1.0)
    if np.abs(g - g.T).max() > tol:
        raise AsymmetricMatrixError(
            f"matrix is asymmetric beyond tolerance (max |G - Gᵀ| = "
            f"{np.abs(g - g.T).max():.3e})"
        )
    n = g.shape[0]
    return g[np.triu_indices(n)]


def style_vector_length(n_filters: int) -> int:
    return n_filters * (n_filters + 1) // 2


@dataclass
class ProjectionMatrix:
    """Seed-defined sparse projection from dimension D down to k.

    Entries are ±D^(1/4) with probability 1/(2√D) each and 0 otherwise.
    Column j is a pure function of (seed, j), so the matrix never needs to
    be shipped between processes.
    """

    D: int
    k: int
    seed: int
    _cache: sparse.csc_array | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.D < 1 or self.k < 1:
            raise ValueError(f"projection needs D >= 1 and k >= 1, got D={self.D} k={self.k}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("projection seed must fit in an unsigned 64-bit integer")

    @property
    def magnitude(self) -> float:
        return float(np.float64(self.D) ** 0.25)

    def column(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Nonzero row indices and values of column j."""
        rng = np.random.Generator(np.random.Philox(key=[self.seed, j]))
        u = rng.random(self.D)
        p = 1.0 / math.sqrt(self.D)
        rows = np.nonzero(u < p)[0]
        signs = np.where(u[rows] < 0.5 * p, 1.0, -1.0)
        return rows, signs * self.magnitude

    def columns(self, start: int, stop: int) -> sparse.csc_array:
        if not 0 <= start <= stop <= self.k:
            raise ValueError(f"column range [{start}, {stop}) outside 0..{self.k}")
        indices: list[np.ndarray] = []
        data: list[np.ndarray] = []
        indptr = np.zeros(stop - start + 1, dtype=np.int64)
        for idx, j in enumerate(range(start, stop)):
            rows, values = self.column(j)
            indices.append(rows)
            data.append(values)
            indptr[idx + 1] = indptr[idx] + rows.size
        indices_arr = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
        data_arr = np.concatenate(data) if data else np.zeros(0)
        return sparse.csc_array(
            (data_arr, indices_arr, indptr), shape=(self.D, stop - start)
        )

    def matrix(self) -> sparse.csc_array:
        if self._cache is None:
            self._cache = self.columns(0, self.k)
        return self._cache


def project(batch: np.ndarray, projection: ProjectionMatrix) -> np.ndarray:
    """B = (1/√k) · A · R for a batch A of row vectors.

    Row-wise independent, so projecting rows singly matches projecting
    them jointly bit for bit.
    """
    a = np.ascontiguousarray(batch, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatchError(f"batch must be 2-d (n × D), got shape {a.shape}")
    if a.shape[1] != projection.D:
        raise DimensionMismatchError(
            f"batch has {a.shape[1]} columns, projection expects {projection.D}"
        )
    b = np.asarray(a @ projection.matrix())
    return b / math.sqrt(projection.k)


@dataclass(frozen=True)
class IconEmbedding:
    app_id: str
    content: np.ndarray
    style: np.ndarray


def resolve_config(config: PipelineConfig, handle: BackboneHandle) -> ResolvedConfig:
    """Fill config defaults from the backbone and validate compatibility."""
    input_size = config.input_size if config.input_size is not None else handle.input_size
    if input_size != handle.input_size:
        raise ConfigMismatchError(
            f"configured input size {input_size} does not match backbone "
            f"input size {handle.input_size}"
        )
    style_k = config.style_k if config.style_k is not None else handle.content_dim
    return ResolvedConfig(
        backbone_id=handle.backbone_id,
        input_size=input_size,
        means=config.means,
        projection_seed=config.projection_seed,
        style_k=style_k,
        content_dim=handle.content_dim,
        style_filters=handle.style_filters,
    )


def make_projection_for(resolved: ResolvedConfig) -> ProjectionMatrix:
    return ProjectionMatrix(
        D=resolved.style_input_dim, k=resolved.style_k, seed=resolved.projection_seed
    )


def _embed_tensor(
    handle: BackboneHandle, projection: ProjectionMatrix, img
) -> tuple[np.ndarray, np.ndarray]:
    content, fmap = extract(handle, img)
    style = project(flatten_upper(gram(fmap))[None, :], projection)[0]
    return content, style


def encode_icon(
    record: IconRecord,
    icon_path: str | Path,
    handle: BackboneHandle,
    projection: ProjectionMatrix,
    input_size: int,
    means: tuple[float, float, float],
) -> IconEmbedding:
    """Encode one icon file end to end."""
    expected_d = style_vector_length(handle.style_filters)
    if projection.D != expected_d:
        raise DimensionMismatchError(
            f"projection input dimension {projection.D} does not match the "
            f"style tap ({expected_d})"
        )
    img = preprocess(load_image(icon_path), input_size=input_size, means=means)
    content, style = _embed_tensor(handle, projection, img)
    return IconEmbedding(app_id=record.app_id, content=content, style=style)


@dataclass
class EmbeddingStore:
    """All corpus embeddings in row order, plus the header that produced them."""

    app_ids: tuple[str, ...]
    content: np.ndarray
    style: np.ndarray
    projection_seed: int
    input_size: int
    means: tuple[float, float, float]
    config_hash: bytes = b"\x00" * 16
    flags: int = FLAG_CONFIG_HASH
    version: int = STORE_VERSION
    _rows: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.content = np.asarray(self.content, dtype=np.float32)
        self.style = np.asarray(self.style, dtype=np.float32)
        n = len(self.app_ids)
        if self.content.ndim != 2 or self.style.ndim != 2:
            raise StoreError("content and style must be 2-d arrays")
        if self.content.shape[0] != n or self.style.shape[0] != n:
            raise StoreError(
                f"row mismatch: {n} app ids, {self.content.shape[0]} content rows, "
                f"{self.style.shape[0]} style rows"
            )
        if len(set(self.app_ids)) != n:
            raise StoreError("duplicate app_id in store")
        if len(self.config_hash) != 16:
            raise StoreError("config hash must be 16 bytes")
        self._rows = {app_id: i for i, app_id in enumerate(self.app_ids)}

    def __len__(self) -> int:
        return len(self.app_ids)

    @property
    def content_dim(self) -> int:
        return self.content.shape[1]

    @property
    def style_dim(self) -> int:
        return self.style.shape[1]

    def row_of(self, app_id: str) -> int:
        try:
            return self._rows[app_id]
        except KeyError:
            raise StoreError(f"app_id {app_id!r} not present in store") from None

    def __contains__(self, app_id: str) -> bool:
        return app_id in self._rows


_WORKER: dict[str, object] = {}


def _worker_init(backbone_source: str, seed: int, style_k: int, input_size: int,
                 means: tuple[float, float, float]) -> None:
    handle = resolve_backbone(backbone_source)
    _WORKER["handle"] = handle
    _WORKER["projection"] = ProjectionMatrix(
        D=style_vector_length(handle.style_filters), k=style_k, seed=seed
    )
    _WORKER["input_size"] = input_size
    _WORKER["means"] = means


def _worker_encode(task: tuple[int, str]) -> tuple[int, np.ndarray, np.ndarray]:
    row, icon_path = task
    handle = _WORKER["handle"]
    img = preprocess(
        load_image(icon_path), input_size=_WORKER["input_size"], means=_WORKER["means"]
    )
    content, style = _embed_tensor(handle, _WORKER["projection"], img)
    return row, content.astype(np.float32), style.astype(np.float32)


def encode_corpus(
    corpus: Corpus,
    config: PipelineConfig | None = None,
    workers: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> EmbeddingStore:
    """Encode every icon in manifest order into an in-memory store.

    With workers > 1 the icons are distributed over processes; each worker
    regenerates the identical projection matrix from the seed, so the
    result is byte-identical to a single-process run.
    """
    config = config or PipelineConfig()
    handle = resolve_backbone(config.backbone)
    resolved = resolve_config(config, handle)
    n = len(corpus)
    content = np.zeros((n, resolved.content_dim), dtype=np.float32)
    style = np.zeros((n, resolved.style_k), dtype=np.float32)
    tasks = [
        (i, str(corpus.resolve_icon_path(record))) for i, record in enumerate(corpus)
    ]

    if workers <= 1:
        projection = make_projection_for(resolved)
        for done, (row, icon_path) in enumerate(tasks, start=1):
            img = preprocess(
                load_image(icon_path), input_size=resolved.input_size, means=resolved.means
            )
            c, s = _embed_tensor(handle, projection, img)
            content[row] = c.astype(np.float32)
            style[row] = s.astype(np.float32)
            if progress is not None:
                progress(done, n)
    else:
        init_args = (
            str(config.backbone),
            resolved.projection_seed,
            resolved.style_k,
            resolved.input_size,
            resolved.means,
        )
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init, initargs=init_args
        ) as pool:
            done = 0
            for row, c, s in pool.map(_worker_encode, tasks, chunksize=8):
                content[row] = c
                style[row] = s
                done += 1
                if progress is not None:
                    progress(done, n)

    return EmbeddingStore(
        app_ids=tuple(r.app_id for r in corpus),
        content=content,
        style=style,
        projection_seed=resolved.projection_seed,
        input_size=resolved.input_size,
        means=resolved.means,
        config_hash=resolved.hash_bytes(),
    )


def sidecar_path(store_path: str | Path) -> Path:
    return Path(str(store_path) + ".ids.jsonl")


def write_store(path: str | Path, store: EmbeddingStore) -> None:
    path = Path(path)
    header = _HEADER.pack(
        STORE_MAGIC,
        store.version,
        store.flags,
        store.content_dim,
        store.style_dim,
        len(store),
        store.projection_seed,
        store.input_size,
        store.means[0],
        store.means[1],
        store.means[2],
        store.config_hash,
    )
    rows = np.hstack([store.content, store.style]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rows.tobytes(order="C"))
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        for i, app_id in enumerate(store.app_ids):
            fh.write(json.dumps({"row": i, "app_id": app_id}, separators=(",", ":")) + "\n")


def read_store(path: str | Path) -> EmbeddingStore:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise StoreError(f"{path} is too short to be an embedding store")
    (
        magic,
        version,
        flags,
        content_dim,
        style_dim,
        row_count,
        projection_seed,
        input_size,
        mean_r,
        mean_g,
        mean_b,
        config_hash,
    ) = _HEADER.unpack_from(raw)
    if magic != STORE_MAGIC:
        raise StoreError(f"{path} has bad magic {magic!r}")
    if version != STORE_VERSION:
        raise StoreError(f"unsupported store version {version}")
    expected = _HEADER.size + row_count * (content_dim + style_dim) * 4
    if len(raw) != expected:
        raise StoreError(
            f"store size mismatch: header implies {expected} bytes, file has {len(raw)}"
        )
    rows = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(
        row_count, content_dim + style_dim
    )
    ids_file = sidecar_path(path)
    if not ids_file.exists():
        raise StoreError(f"missing sidecar {ids_file}")
    app_ids: list[str] = []
    with open(ids_file, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                row, app_id = obj["row"], obj["app_id"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise StoreError(f"bad sidecar line {line_no + 1}: {exc}") from exc
            if row != len(app_ids):
                raise StoreError(
                    f"sidecar rows out of order: expected {len(app_ids)}, got {row}"
                )
            app_ids.append(app_id)
    if len(app_ids) != row_count:
        raise StoreError(
            f"sidecar lists {len(app_ids)} rows, header says {row_count}"
        )
    if not (flags & FLAG_CONFIG_HASH):
        config_hash = b"\x00" * 16
    return EmbeddingStore(
        app_ids=tuple(app_ids),
        content=rows[:, :content_dim].copy(),
        style=rows[:, content_dim:].copy(),
        projection_seed=projection_seed,
        input_size=input_size,
        means=(mean_r, mean_g, mean_b),
        config_hash=config_hash,
        flags=flags,
        version=version,
    )
