"""Distance metrics over icon embeddings.

Six metrics: {content, style, combined} crossed with {L2, cosine}. The
combined form is content distance plus alpha times style distance, with
alpha defaulting to 6. Cosine distance is 1 minus the cosine similarity;
because content vectors are non-negative it stays in [0, 1], and the
combined cosine distance stays in [0, 1+alpha]. Projected style vectors
can carry negative entries, so their cosine distance may poke slightly
above 1; normalize_distance clips the normalized value back into [0, 1].

distance() is the scalar reference implementation; distances_to_all() is
the vectorized batch form used by retrieval. They are kept as separate
code paths so either can check the other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import DEFAULT_ALPHA
from .errors import DimensionMismatchError, UnsupportedNormalizationError

KINDS = ("content", "style", "combined")
NORMS = ("l2", "cos")


@dataclass(frozen=True)
class MetricConfig:
    kind: str
    norm: str
    alpha: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.kind == "combined":
            if self.alpha is None:
                raise ValueError("combined metric requires alpha")
            if self.alpha < 0:
                raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError(f"{self.kind} metric takes no alpha")

    @classmethod
    def from_flags(cls, kind: str, norm: str, alpha: float = DEFAULT_ALPHA) -> "MetricConfig":
        """Build a config from CLI-style flags; alpha applies to combined only."""
        return cls(kind=kind, norm=norm, alpha=alpha if kind == "combined" else None)

    @property
    def label(self) -> str:
        return f"{self.kind}_{self.norm}"


def all_metrics(alpha: float = DEFAULT_ALPHA) -> tuple[MetricConfig, ...]:
    """The six metric configurations in a stable reporting order."""
    return (
        MetricConfig("content", "l2"),
        MetricConfig("content", "cos"),
        MetricConfig("style", "l2"),
        MetricConfig("style", "cos"),
        MetricConfig("combined", "l2", alpha),
        MetricConfig("combined", "cos", alpha),
    )


def _l2(u: np.ndarray, v: np.ndarray) -> float:
    d = u - v
    return math.sqrt(float(np.dot(d, d)))


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 and nv == 0.0:
        return 0.0
    if nu == 0.0 or nv == 0.0:
        return 1.0
    return max(0.0, 1.0 - float(np.dot(u, v)) / (nu * nv))


def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionMismatchError(
            f"{what} vectors must be 1-d and equally sized, got {a.shape} and {b.shape}"
        )
    return a, b


def distance(a, b, cfg: MetricConfig) -> float:
    """Distance between two embeddings under one metric configuration.

    a and b carry .content and .style vectors (IconEmbedding or any
    equivalent pair of attributes).
    """
    base = _l2 if cfg.norm == "l2" else _cos
    if cfg.kind == "content":
        return base(*_check_pair(a.content, b.content, "content"))
    if cfg.kind == "style":
        return base(*_check_pair(a.style, b.style, "style"))
    c = base(*_check_pair(a.content, b.content, "content"))
    s = base(*_check_pair(a.style, b.style, "style"))
    return c + cfg.alpha * s


def _l2_to_all(q: np.ndarray, m: np.ndarray) -> np.ndarray:
    diff = m - q
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _cos_to_all(q: np.ndarray, m: np.ndarray) -> np.ndarray:
    qn = math.sqrt(float(np.dot(q, q)))
    mn = np.sqrt(np.einsum("ij,ij->i", m, m))
    if qn == 0.0:
        return np.where(mn == 0.0, 0.0, 1.0)
    out = np.ones(m.shape[0])
    nz = mn > 0.0
    out[nz] = 1.0 - (m[nz] @ q) / (mn[nz] * qn)
    return np.maximum(out, 0.0)


def distances_to_all(
    query_content: np.ndarray,
    query_style: np.ndarray,
    contents: np.ndarray,
    styles: np.ndarray,
    cfg: MetricConfig,
) -> np.ndarray:
    """Distances from one query embedding to every row of a store."""
    qc = np.asarray(query_content, dtype=np.float64)
    qs = np.asarray(query_style, dtype=np.float64)
    mc = np.asarray(contents, dtype=np.float64)
    ms = np.asarray(styles, dtype=np.float64)
    if mc.ndim != 2 or ms.ndim != 2 or mc.shape[0] != ms.shape[0]:
        raise DimensionMismatchError(
            f"store matrices must be 2-d with equal row counts, got {mc.shape} and {ms.shape}"
        )
    if qc.shape != (mc.shape[1],) or qs.shape != (ms.shape[1],):
        raise DimensionMismatchError(
            f"query dims {qc.shape}/{qs.shape} do not match store dims "
            f"{mc.shape[1]}/{ms.shape[1]}"
        )
    base = _l2_to_all if cfg.norm == "l2" else _cos_to_all
    if cfg.kind == "content":
        return base(qc, mc)
    if cfg.kind == "style":
        return base(qs, ms)
    return base(qc, mc) + cfg.alpha * base(qs, ms)


def max_distance(cfg: MetricConfig) -> float:
    """Largest possible distance under a cosine metric; L2 is unbounded."""
    if cfg.norm != "cos":
        raise UnsupportedNormalizationError(
            f"{cfg.label} has no finite maximum distance"
        )
    return 1.0 + cfg.alpha if cfg.kind == "combined" else 1.0


def normalize_distance(d: float, cfg: MetricConfig) -> float:
    """Map a cosine-family distance into [0, 1] by its maximum value.

    Combined-cosine divides by 1+alpha (7 at the default alpha of 6); the
    pure cosine metrics are already unit-bounded. L2 metrics have no finite
    maximum and are rejected.
    """
    scaled = d / max_distance(cfg)
    return min(1.0, max(0.0, scaled))
