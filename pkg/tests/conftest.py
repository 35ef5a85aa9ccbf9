import json

import numpy as np
import pytest
from PIL import Image

_CRITERION_RESULTS: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, title): acceptance criterion behind this test",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    if report.when == "call":
        _CRITERION_RESULTS[num] = (title, report.passed)
    elif report.failed:
        # setup or teardown blew up before the check could run
        _CRITERION_RESULTS[num] = (title, False)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERION_RESULTS):
        title, passed = _CRITERION_RESULTS[num]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {num:>2} {status}  {title}")


@pytest.fixture
def icon_factory(tmp_path):
    """Write small deterministic icon files and return their paths."""

    def make(name, size=24, color=None, seed=None, mode="RGB"):
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        if seed is not None:
            rng = np.random.Generator(np.random.Philox(seed))
            pixels = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        else:
            pixels = np.zeros((size, size, 3), dtype=np.uint8)
            pixels[:, :] = color if color is not None else (200, 60, 30)
        img = Image.fromarray(pixels, mode="RGB").convert(mode)
        img.save(path)
        return path

    return make


@pytest.fixture
def manifest_factory(tmp_path):
    """Write a JSON-lines manifest from row dicts and return its path."""

    counter = {"n": 0}

    def make(rows, name=None):
        counter["n"] += 1
        path = tmp_path / (name or f"manifest_{counter['n']}.jsonl")
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        return path

    return make


def manifest_row(app_id, icon_path, **overrides):
    row = dict(
        app_id=app_id,
        icon_path=str(icon_path),
        app_name=app_id.replace(".", " "),
        developer="dev.default",
        category="GAME",
        downloads=1000,
    )
    row.update(overrides)
    return row


def synthetic_corpus_store(entries):
    """Corpus plus in-memory store built straight from embedding vectors.

    Each entry is a dict with app_id, content and style (array-likes), and
    optional app_name / developer / category / downloads metadata. Icon
    paths are fabricated and never touched.
    """
    from iconsim.corpus import Corpus, IconRecord
    from iconsim.embeddings import EmbeddingStore

    records = []
    contents = []
    styles = []
    for e in entries:
        records.append(
            IconRecord(
                app_id=e["app_id"],
                icon_path=f"{e['app_id']}.png",
                app_name=e.get("app_name", e["app_id"]),
                developer=e.get("developer", "dev.default"),
                category=e.get("category", "GAME"),
                downloads=e.get("downloads", 1000),
            )
        )
        contents.append(np.asarray(e["content"], dtype=np.float32))
        styles.append(np.asarray(e["style"], dtype=np.float32))
    store = EmbeddingStore(
        app_ids=tuple(r.app_id for r in records),
        content=np.stack(contents),
        style=np.stack(styles),
        projection_seed=0,
        input_size=16,
        means=(123.675, 116.28, 103.53),
    )
    return Corpus(records=records), store
