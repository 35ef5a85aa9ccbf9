"""End-to-end acceptance checks, one test per numbered criterion.

Each test carries a `criterion` marker; the conftest hook turns the results
into a one-line-per-criterion summary at the end of the run. Tolerances and
runtime budgets are pinned here and nowhere else, so this file is the
contract the rest of the package is held to.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from scipy.spatial.distance import pdist

from iconsim.backbone import resolve_backbone
from iconsim.cli import main as cli_main
from iconsim.corpus import LabelledGroup
from iconsim.embeddings import (
    IconEmbedding,
    ProjectionMatrix,
    flatten_upper,
    gram,
    project,
    style_vector_length,
)
from iconsim.evaluation import retrieval_rate
from iconsim.metrics import MetricConfig, all_metrics, distance, max_distance
from iconsim.retrieval import QueryFilter, build_index, knee_threshold, query_top_k
from tests.conftest import manifest_row, synthetic_corpus_store


def rng_for(seed):
    return np.random.Generator(np.random.Philox(seed))


def emb(content, style):
    return IconEmbedding(
        app_id="pair",
        content=np.asarray(content, dtype=np.float64),
        style=np.asarray(style, dtype=np.float64),
    )


@pytest.mark.criterion(1, "gram matches a triple-loop oracle on 1,000 maps (<= 1e-6, < 5 s)")
def test_c1_gram_oracle_equivalence():
    rng = rng_for(1001)
    start = time.monotonic()
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 33))
        f = rng.normal(size=(n, m))
        g = gram(f)
        oracle = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for t in range(m):
                    acc += f[i, t] * f[j, t]
                oracle[i, j] = acc
        assert np.max(np.abs(g - oracle)) <= 1e-6
    assert time.monotonic() - start < 5.0


@pytest.mark.criterion(2, "style vector length is N(N+1)/2; N=512 gives 131,328")
def test_c2_style_vector_dimension_law():
    rng = rng_for(1002)
    for n in range(1, 65):
        a = rng.normal(size=n)
        g = np.outer(a, a)
        assert flatten_upper(g).shape == (n * (n + 1) // 2,)
    assert style_vector_length(512) == 131_328
    a = rng.normal(size=512)
    assert flatten_upper(np.outer(a, a)).shape == (131_328,)


@pytest.mark.criterion(3, "projection nonzero fraction near 1/sqrt(D), magnitudes exactly D**0.25")
def test_c3_projection_distribution():
    d = 131_328
    k = 1024
    projection = ProjectionMatrix(D=d, k=k, seed=77)
    matrix = projection.columns(0, k)
    fraction = matrix.nnz / (d * k)
    expected = 1.0 / np.sqrt(d)
    assert abs(fraction - expected) <= 0.1 * expected
    magnitudes = np.unique(np.abs(matrix.data))
    assert magnitudes.shape == (1,)
    assert magnitudes[0] == d ** 0.25


@pytest.mark.criterion(4, "projection preserves >= 95% of pairwise distances within 15% (< 30 s)")
def test_c4_distance_preservation():
    start = time.monotonic()
    rng = rng_for(1004)
    n, d, k = 200, 10_000, 1024
    vectors = rng.normal(size=(n, d))
    before = pdist(vectors)
    projection = ProjectionMatrix(D=d, k=k, seed=4)
    after = pdist(project(vectors, projection))
    relative_error = np.abs(after - before) / before
    assert np.mean(relative_error <= 0.15) >= 0.95
    assert time.monotonic() - start < 30.0


def _write_fixture_manifest(root: Path, count: int = 8) -> Path:
    rng = rng_for(1005)
    rows = []
    for i in range(count):
        app_id = f"com.fixture.{i}"
        pixels = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
        Image.fromarray(pixels).save(root / f"{app_id}.png")
        rows.append(manifest_row(app_id, f"{app_id}.png", developer=f"dev.{i}"))
    manifest = root / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return manifest


@pytest.mark.criterion(5, "encode runs with one config/seed are byte-identical")
def test_c5_encode_determinism(tmp_path, capsys):
    manifest = _write_fixture_manifest(tmp_path)
    stores = []
    for name, workers in (("first.bin", "1"), ("second.bin", "1"), ("pooled.bin", "2")):
        code = cli_main(
            [
                "encode",
                "--manifest", str(manifest),
                "--out", str(tmp_path / name),
                "--seed", "42",
                "--workers", workers,
            ]
        )
        assert code == 0
        stores.append((tmp_path / name).read_bytes())
    capsys.readouterr()
    assert stores[0] == stores[1]
    assert stores[0] == stores[2]


def _naive_scan(store, metric, query_id, k):
    """Pure-python rescan of every row, used as the retrieval oracle."""
    target_row = store.row_of(query_id)
    query = emb(store.content[target_row], store.style[target_row])
    scored = []
    for row, app_id in enumerate(store.app_ids):
        if app_id == query_id:
            continue
        d = distance(query, emb(store.content[row], store.style[row]), metric)
        scored.append((d, app_id))
    scored.sort()
    return scored[:k]


@pytest.mark.criterion(6, "100 planted duplicates in 10,000 rows all retrieved at rank 1")
def test_c6_planted_duplicate_recall():
    rng = rng_for(1006)
    n_base, n_dup, dim = 10_000, 100, 64
    entries = [
        {
            "app_id": f"app.{i:05d}",
            "content": rng.random(dim),
            "style": rng.normal(size=dim),
            "developer": f"dev.{i % 97}",
        }
        for i in range(n_base)
    ]
    sources = rng.choice(n_base, size=n_dup, replace=False)
    for j, src in enumerate(sources):
        entries.append(
            {
                "app_id": f"dup.{j:03d}",
                "content": entries[src]["content"],
                "style": entries[src]["style"],
                "developer": "dev.dup",
            }
        )
    corpus, store = synthetic_corpus_store(entries)
    for metric in all_metrics():
        index = build_index(store, corpus, metric)
        is_cos = metric.norm == "cos"
        for j, src in enumerate(sources):
            results = query_top_k(
                index,
                index.embedding_of(f"dup.{j:03d}"),
                1,
                QueryFilter(exclude_self=True),
            )
            top = results[0]
            assert top.app_id == f"app.{src:05d}"
            assert top.rank == 1
            measured = top.normalized_distance if is_cos else top.raw_distance
            assert measured < 1e-6

    # exact-scan backend equals a naive python rescan on a 500-row subsample
    subsample = entries[:450] + entries[n_base : n_base + 50]
    sub_corpus, sub_store = synthetic_corpus_store(subsample)
    for metric in all_metrics():
        index = build_index(sub_store, sub_corpus, metric)
        for query_id in ("dup.000", "app.00007", "app.00440"):
            got = query_top_k(
                index, index.embedding_of(query_id), 10, QueryFilter(exclude_self=True)
            )
            want = _naive_scan(sub_store, metric, query_id, 10)
            assert [r.app_id for r in got] == [app_id for _, app_id in want]
            for r, (d, _) in zip(got, want):
                assert r.raw_distance == pytest.approx(d, rel=1e-9, abs=1e-12)


@pytest.mark.criterion(7, "position-permuted maps: style_cos ~ 0, content_cos > 0.5, combined ranks style first")
def test_c7_style_content_separation():
    handle = resolve_backbone("stub:0")
    filters, positions = handle.style_filters, handle.style_positions
    content_dim = handle.content_dim
    rng = rng_for(1007)

    projection = ProjectionMatrix(
        D=style_vector_length(filters), k=content_dim, seed=7
    )

    def embed_style(feature_map):
        return project(flatten_upper(gram(feature_map))[None, :], projection)[0]

    def subset_map(active_filters):
        # responses confined to one filter subset keep the gram blocks of
        # different subsets disjoint, so their style vectors are orthogonal
        m = np.zeros((filters, positions))
        m[list(active_filters)] = np.abs(
            rng.normal(size=(len(active_filters), positions))
        )
        return m

    base_map = subset_map((0, 1, 2))
    permuted = base_map[:, rng.permutation(positions)]
    other_map = subset_map((3, 4, 5))

    style_a = embed_style(base_map)
    style_b = embed_style(permuted)
    style_d = embed_style(other_map)
    content_a = np.zeros(content_dim)
    content_a[0] = 1.0
    content_b = np.zeros(content_dim)
    content_b[1] = 1.0

    # permuting positions leaves the gram statistics, and so the style
    # embedding, unchanged up to rounding
    a = emb(content_a, style_a)
    b = emb(content_b, style_b)
    assert distance(a, b, MetricConfig("style", "cos")) <= 1e-6
    assert distance(a, b, MetricConfig("content", "cos")) > 0.5

    # b shares a's look but not its content; d shares a's content exactly
    entries = [
        {"app_id": "query.app", "content": content_a, "style": style_a},
        {"app_id": "style.twin", "content": content_b, "style": style_b},
        {"app_id": "content.twin", "content": content_a, "style": style_d},
    ]
    filler_subsets = ((3, 4), (4, 5), (5, 6), (6, 7), (3, 7))
    for i, subset in enumerate(filler_subsets):
        entries.append(
            {
                "app_id": f"filler.{i}",
                "content": rng.random(content_dim),
                "style": embed_style(subset_map(subset)),
            }
        )
    corpus, store = synthetic_corpus_store(entries)
    for norm in ("cos", "l2"):
        index = build_index(store, corpus, MetricConfig("combined", norm, alpha=6.0))
        results = query_top_k(
            index, index.embedding_of("query.app"), 3, QueryFilter(exclude_self=True)
        )
        assert results[0].app_id == "style.twin"


@pytest.mark.criterion(8, "metric laws hold over 1,000-case property sweeps")
def test_c8_metric_laws():
    rng = rng_for(1008)
    dim = 24
    content_cos = MetricConfig("content", "cos")
    style_cos = MetricConfig("style", "cos")
    combined_cos = MetricConfig("combined", "cos", alpha=6.0)
    combined_l2 = MetricConfig("combined", "l2", alpha=6.0)
    assert max_distance(combined_cos) == 7.0

    for _ in range(1000):
        u = emb(rng.random(dim), rng.random(dim))
        v = emb(rng.random(dim), rng.random(dim))
        w = emb(rng.random(dim), rng.random(dim))
        # cosine distances of non-negative vectors stay inside [0, 1]
        assert 0.0 <= distance(u, v, content_cos) <= 1.0
        assert 0.0 <= distance(u, v, style_cos) <= 1.0
        # the combined form is bounded by 1 + alpha
        assert distance(u, v, combined_cos) <= 7.0
        # scale invariance of the cosine form
        scale = float(rng.uniform(0.1, 50.0))
        scaled_v = emb(scale * v.content, scale * v.style)
        assert distance(u, scaled_v, combined_cos) == pytest.approx(
            distance(u, v, combined_cos), abs=1e-9
        )
        # triangle inequality of the L2 form, combined parts included
        assert distance(u, w, combined_l2) <= (
            distance(u, v, combined_l2) + distance(v, w, combined_l2) + 1e-9
        )

    # the bound is achievable: orthogonal content and orthogonal style
    e0 = np.zeros(dim)
    e0[0] = 1.0
    e1 = np.zeros(dim)
    e1[1] = 1.0
    assert distance(emb(e0, e0), emb(e1, e1), combined_cos) == 7.0


@pytest.mark.criterion(9, "knee of a sqrt curve sits at 0.25 +/- 0.01; linear curve has none")
def test_c9_knee_detection():
    thresholds = np.linspace(0.0, 1.0, 101)
    sqrt_curve = [(float(t), float(100.0 * np.sqrt(t))) for t in thresholds]
    knee = knee_threshold(sqrt_curve)
    assert knee == pytest.approx(0.25, abs=0.01)
    linear = [(float(t), float(100.0 * t)) for t in thresholds]
    assert knee_threshold(linear) is None


@pytest.mark.criterion(10, "duplicate groups score 100% for every k >= 2; rate monotone in k")
def test_c10_retrieval_rate_protocol():
    rng = rng_for(1010)
    dim = 16
    entries = []
    groups = []
    for g in range(4):
        proto_c = rng.random(dim)
        proto_s = rng.normal(size=dim)
        ids = [f"grp{g}.m{i}" for i in range(3)]
        for app_id in ids:
            entries.append({"app_id": app_id, "content": proto_c, "style": proto_s})
        groups.append(LabelledGroup(ids[0], tuple(ids[1:])))
    for i in range(20):
        entries.append(
            {
                "app_id": f"far.{i}",
                "content": rng.random(dim) + 10.0 * (i + 1),
                "style": rng.normal(size=dim) + 10.0 * (i + 1),
            }
        )
    corpus, store = synthetic_corpus_store(entries)
    for metric in all_metrics():
        index = build_index(store, corpus, metric)
        for k in range(2, 11):
            assert retrieval_rate(index, groups, k) == 100.0

    # random corpora: monotone non-decreasing in k
    for seed in (3, 4):
        rng = rng_for(seed)
        entries = [
            {
                "app_id": f"r.{i}",
                "content": rng.random(dim),
                "style": rng.normal(size=dim),
            }
            for i in range(40)
        ]
        corpus, store = synthetic_corpus_store(entries)
        groups = [
            LabelledGroup("r.0", ("r.1", "r.2", "r.3")),
            LabelledGroup("r.10", ("r.11", "r.12")),
            LabelledGroup("r.20", ("r.21", "r.22", "r.23", "r.24")),
        ]
        index = build_index(store, corpus, MetricConfig("combined", "cos", 6.0))
        rates = [retrieval_rate(index, groups, k) for k in range(1, 11)]
        assert all(a <= b for a, b in zip(rates, rates[1:]))


@pytest.mark.criterion(11, "production-scale figures are documented as out of reach, not asserted")
def test_c11_desk_scale_limits_are_stated():
    from iconsim.cli import DEFAULT_THRESHOLD

    readme = Path(__file__).resolve().parent.parent / "README.md"
    text = readme.read_text(encoding="utf-8")
    # the operating threshold ships as a documented default, not a measured fact
    assert DEFAULT_THRESHOLD == 0.27
    assert "0.27" in text
    prose = " ".join(text.lower().replace("*", "").split())
    assert "not reproducible" in prose or "cannot be reproduced" in prose
