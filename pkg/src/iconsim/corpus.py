"""Icon corpus ingestion and candidate labelled-group generation.

A corpus is described by a UTF-8 JSON-lines manifest, one object per icon
with keys ``app_id``, ``icon_path``, ``app_name``, ``developer``,
``category`` and ``downloads``. Record order in the manifest is stable and
defines the row order of every embedding store built from the corpus.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import DuplicateAppIdError, ManifestError

_REQUIRED_KEYS = ("app_id", "icon_path", "app_name", "developer", "category", "downloads")

DEFAULT_NAME_THRESHOLD = 0.8
DEFAULT_MIN_BASE_DOWNLOADS = 500_000
DEFAULT_MIN_APPS_PER_DEVELOPER = 3


@dataclass(frozen=True)
class IconRecord:
    """One icon plus its app-store metadata."""

    app_id: str
    icon_path: str
    app_name: str
    developer: str
    category: str
    downloads: int


@dataclass
class Corpus:
    """Ordered collection of icon records loaded from one manifest."""

    records: list[IconRecord]
    source_manifest: Path | None = None
    _by_id: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._by_id:
            self._by_id = {r.app_id: i for i, r in enumerate(self.records)}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[IconRecord]:
        return iter(self.records)

    def row_of(self, app_id: str) -> int:
        return self._by_id[app_id]

    def get(self, app_id: str) -> IconRecord:
        return self.records[self._by_id[app_id]]

    def __contains__(self, app_id: str) -> bool:
        return app_id in self._by_id

    def resolve_icon_path(self, record: IconRecord) -> Path:
        """Resolve a record's icon path relative to the manifest location."""
        p = Path(record.icon_path)
        if p.is_absolute() or self.source_manifest is None:
            return p
        return self.source_manifest.parent / p


@dataclass(frozen=True)
class LabelledGroup:
    """A base app and the same-developer apps proposed as visually similar."""

    base_app_id: str
    member_app_ids: tuple[str, ...]

    def all_ids(self) -> tuple[str, ...]:
        return (self.base_app_id,) + self.member_app_ids


def _parse_record(obj: object, line_no: int) -> IconRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record is not a JSON object", line_no)
    missing = [k for k in _REQUIRED_KEYS if k not in obj]
    if missing:
        raise ManifestError(f"missing keys {missing}", line_no)
    downloads = obj["downloads"]
    if isinstance(downloads, bool) or not isinstance(downloads, int) or downloads < 0:
        raise ManifestError("downloads must be a nonnegative integer", line_no)
    for key in ("app_id", "icon_path", "app_name", "developer", "category"):
        if not isinstance(obj[key], str):
            raise ManifestError(f"{key} must be a string", line_no)
    if not obj["app_id"]:
        raise ManifestError("app_id must be nonempty", line_no)
    return IconRecord(
        app_id=obj["app_id"],
        icon_path=obj["icon_path"],
        app_name=obj["app_name"],
        developer=obj["developer"],
        category=obj["category"],
        downloads=downloads,
    )


def load_manifest(path: str | Path) -> Corpus:
    """Load a JSON-lines manifest into a Corpus, preserving line order.

    Raises ManifestError (with the offending line number) for malformed
    records and DuplicateAppIdError when an app_id repeats. Blank lines are
    ignored; an empty file yields an empty corpus.
    """
    path = Path(path)
    records: list[IconRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", line_no) from exc
            record = _parse_record(obj, line_no)
            if record.app_id in seen:
                raise DuplicateAppIdError(f"duplicate app_id {record.app_id!r}", line_no)
            seen.add(record.app_id)
            records.append(record)
    return Corpus(records=records, source_manifest=path)


def char_cosine_similarity(a: str, b: str) -> float:
    """Cosine similarity of lowercase character-frequency vectors.

    Whitespace counts like any other character. Returns 1.0 when both
    strings are empty, 0.0 when exactly one is empty. Symmetric, bounded in
    [0, 1], and exactly 1.0 for proportional frequency vectors (integer
    counts keep the computation exact in those cases).
    """
    ca = Counter(a.lower())
    cb = Counter(b.lower())
    if not ca and not cb:
        return 1.0
    if not ca or not cb:
        return 0.0
    dot = sum(count * cb.get(ch, 0) for ch, count in ca.items())
    norm_sq_a = sum(c * c for c in ca.values())
    norm_sq_b = sum(c * c for c in cb.values())
    sim = dot / math.sqrt(norm_sq_a * norm_sq_b)
    return min(1.0, max(0.0, sim))


def propose_labelled_groups(
    corpus: Corpus,
    name_threshold: float = DEFAULT_NAME_THRESHOLD,
    min_base_downloads: int = DEFAULT_MIN_BASE_DOWNLOADS,
    min_apps_per_developer: int = DEFAULT_MIN_APPS_PER_DEVELOPER,
) -> list[LabelledGroup]:
    """Propose candidate groups of visually similar apps per developer.

    A developer qualifies when it has at least ``min_apps_per_developer``
    apps and its most-downloaded app has at least ``min_base_downloads``
    downloads. The most-downloaded app becomes the group base (download ties
    broken by smallest app_id); the developer's other apps join the group
    when they share the base's category and their name has character-level
    cosine similarity >= ``name_threshold`` to the base name. Groups left
    without members are dropped. Output order follows the developers' first
    appearance in the corpus.
    """
    if not 0.0 <= name_threshold <= 1.0:
        raise ValueError(f"name_threshold must be in [0, 1], got {name_threshold}")

    by_developer: dict[str, list[IconRecord]] = {}
    for record in corpus:
        by_developer.setdefault(record.developer, []).append(record)

    groups: list[LabelledGroup] = []
    for apps in by_developer.values():
        if len(apps) < min_apps_per_developer:
            continue
        base = min(apps, key=lambda r: (-r.downloads, r.app_id))
        if base.downloads < min_base_downloads:
            continue
        members = tuple(
            r.app_id
            for r in apps
            if r.app_id != base.app_id
            and r.category == base.category
            and char_cosine_similarity(r.app_name, base.app_name) >= name_threshold
        )
        if members:
            groups.append(LabelledGroup(base_app_id=base.app_id, member_app_ids=members))
    return groups


def write_groups(path: str | Path, groups: list[LabelledGroup]) -> None:
    """Write groups as JSON lines: {"base_app_id": ..., "member_app_ids": [...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(
                json.dumps(
                    {"base_app_id": g.base_app_id, "member_app_ids": list(g.member_app_ids)},
                    separators=(",", ":"),
                )
                + "\n"
            )


def read_groups(path: str | Path) -> list[LabelledGroup]:
    groups = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                groups.append(
                    LabelledGroup(
                        base_app_id=obj["base_app_id"],
                        member_app_ids=tuple(obj["member_app_ids"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"invalid group record ({exc})", line_no) from exc
    return groups
