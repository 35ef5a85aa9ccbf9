import numpy as np
import pytest

from iconsim.corpus import LabelledGroup, load_manifest
from iconsim.errors import EvaluationError
from iconsim.evaluation import (
    counterfeit_report,
    evaluate_grid,
    format_rate_table,
    retrieval_rate,
    sift_retrieval_rate,
    threshold_curve,
)
from iconsim.metrics import MetricConfig, all_metrics
from iconsim.retrieval import build_index, knee_threshold
from tests.conftest import manifest_row, synthetic_corpus_store

COMBINED_COS = MetricConfig("combined", "cos", 6.0)


def entry(app_id, content, style, **meta):
    return dict(app_id=app_id, content=content, style=style, **meta)


def duplicate_groups_fixture(n_groups=3, rng_seed=0):
    """Groups of three exact-duplicate embeddings plus unrelated filler."""
    rng = np.random.Generator(np.random.Philox(rng_seed))
    entries = []
    groups = []
    for g in range(n_groups):
        proto_c = rng.random(6) + 0.5
        proto_s = rng.standard_normal(5)
        ids = [f"g{g}.m{m}" for m in range(3)]
        for app_id in ids:
            entries.append(entry(app_id, proto_c, proto_s))
        groups.append(LabelledGroup(base_app_id=ids[0], member_app_ids=tuple(ids[1:])))
    for i in range(8):
        entries.append(
            entry(f"filler.{i}", rng.random(6) * 40 + 10, rng.standard_normal(5) * 30)
        )
    corpus, store = synthetic_corpus_store(entries)
    return corpus, store, groups


class TestRetrievalRate:
    def test_duplicate_groups_fully_retrieved(self):
        corpus, store, groups = duplicate_groups_fixture()
        index = build_index(store, corpus, COMBINED_COS)
        for k in (2, 3, 5, 10):
            assert retrieval_rate(index, groups, k) == 100.0

    def test_monotone_in_k(self):
        rng = np.random.Generator(np.random.Philox(7))
        entries = []
        groups = []
        for g in range(4):
            proto_c = rng.random(6)
            proto_s = rng.standard_normal(5)
            ids = [f"g{g}.m{m}" for m in range(4)]
            for app_id in ids:
                entries.append(
                    entry(
                        app_id,
                        proto_c + rng.random(6) * 0.8,
                        proto_s + rng.standard_normal(5) * 0.8,
                    )
                )
            groups.append(LabelledGroup(ids[0], tuple(ids[1:])))
        corpus, store = synthetic_corpus_store(entries)
        index = build_index(store, corpus, COMBINED_COS)
        rates = [retrieval_rate(index, groups, k) for k in (1, 2, 4, 8, 16)]
        assert all(b >= a for a, b in zip(rates, rates[1:]))

    def test_invariant_to_row_order(self):
        corpus, store, groups = duplicate_groups_fixture()
        index = build_index(store, corpus, COMBINED_COS)
        want = retrieval_rate(index, groups, 2)

        order = list(range(len(store)))
        rng = np.random.Generator(np.random.Philox(3))
        rng.shuffle(order)
        entries = []
        for i in order:
            record = corpus.records[i]
            entries.append(
                entry(
                    record.app_id,
                    store.content[i],
                    store.style[i],
                    developer=record.developer,
                    category=record.category,
                )
            )
        corpus2, store2 = synthetic_corpus_store(entries)
        index2 = build_index(store2, corpus2, COMBINED_COS)
        assert retrieval_rate(index2, groups, 2) == want

    def test_missing_member_rejected(self):
        corpus, store, groups = duplicate_groups_fixture()
        index = build_index(store, corpus, COMBINED_COS)
        bad = groups + [LabelledGroup("ghost", ("g0.m1",))]
        with pytest.raises(EvaluationError):
            retrieval_rate(index, bad, 5)

    def test_no_groups_rejected(self):
        corpus, store, _ = duplicate_groups_fixture()
        index = build_index(store, corpus, COMBINED_COS)
        with pytest.raises(EvaluationError):
            retrieval_rate(index, [], 5)

    def test_k_validation(self):
        corpus, store, groups = duplicate_groups_fixture()
        index = build_index(store, corpus, COMBINED_COS)
        with pytest.raises(ValueError):
            retrieval_rate(index, groups, 0)

    def test_style_signal_beats_content_when_groups_share_style(self):
        rng = np.random.Generator(np.random.Philox(11))
        entries = []
        groups = []
        n_groups, size = 4, 3
        for g in range(n_groups):
            proto_s = rng.standard_normal(6) * 2
            ids = [f"g{g}.m{m}" for m in range(size)]
            for j, app_id in enumerate(ids):
                content = np.zeros(n_groups * size)
                content[g * size + j] = 1.0
                entries.append(entry(app_id, content, proto_s))
            groups.append(LabelledGroup(ids[0], tuple(ids[1:])))
        corpus, store = synthetic_corpus_store(entries)
        style_rate = retrieval_rate(
            build_index(store, corpus, MetricConfig("style", "cos")), groups, 2
        )
        content_rate = retrieval_rate(
            build_index(store, corpus, MetricConfig("content", "cos")), groups, 2
        )
        assert style_rate == 100.0
        assert style_rate > content_rate


class TestEvaluateGrid:
    def test_full_grid_shape_and_monotonicity(self):
        corpus, store, groups = duplicate_groups_fixture()
        report = evaluate_grid(store, corpus, groups, ks=(2, 5, 10))
        assert report.ks == (2, 5, 10)
        assert len(report.metric_labels) == 6
        assert set(report.rates) == {
            (label, k) for label in report.metric_labels for k in report.ks
        }
        for label in report.metric_labels:
            series = [report.rate(label, k) for k in report.ks]
            assert all(b >= a for a, b in zip(series, series[1:]))
            assert all(0.0 <= r <= 100.0 for r in series)
        assert report.group_count == 3
        assert report.labelled_total == 9

    def test_agrees_with_single_rate_calls(self):
        corpus, store, groups = duplicate_groups_fixture(rng_seed=5)
        report = evaluate_grid(store, corpus, groups, ks=(2, 4))
        for metric in all_metrics():
            index = build_index(store, corpus, metric)
            for k in (2, 4):
                assert report.rate(metric.label, k) == retrieval_rate(index, groups, k)

    def test_hits_are_group_members(self):
        corpus, store, groups = duplicate_groups_fixture()
        report = evaluate_grid(store, corpus, groups, ks=(3,))
        members = {g.base_app_id: set(g.all_ids()) for g in groups}
        for (label, k), per_group in report.hits.items():
            for base, hit_ids in per_group.items():
                assert set(hit_ids) <= members[base]

    def test_duplicate_base_rejected(self):
        corpus, store, groups = duplicate_groups_fixture()
        bad = groups + [groups[0]]
        with pytest.raises(EvaluationError):
            evaluate_grid(store, corpus, bad)

    def test_table_rendering(self):
        corpus, store, groups = duplicate_groups_fixture()
        report = evaluate_grid(store, corpus, groups, ks=(2, 5))
        table = format_rate_table(report)
        lines = table.splitlines()
        assert len(lines) == 7
        assert "top-2" in lines[0] and "top-5" in lines[0]
        assert lines[1].startswith("content_l2")
        assert "100.00" in table


class TestThresholdCurve:
    def test_monotone_and_bounded(self):
        corpus, store, groups = duplicate_groups_fixture()
        index = build_index(store, corpus, COMBINED_COS)
        curve = threshold_curve(index, groups, k=5, step=0.01)
        assert len(curve) == 101
        rates = [r for _, r in curve]
        assert all(b >= a for a, b in zip(rates, rates[1:]))
        assert all(0.0 <= r <= 100.0 for r in rates)
        assert curve[-1][1] == 100.0

    def test_tight_clusters_produce_an_early_knee(self):
        # Jittered (not identical) clusters: the rate is 0 at threshold 0 and
        # saturates within a grid step or two, so a knee exists near zero.
        rng = np.random.Generator(np.random.Philox(17))
        entries = []
        groups = []
        for g in range(3):
            proto_c = rng.random(6) + 0.5
            proto_s = rng.standard_normal(5)
            ids = [f"g{g}.m{m}" for m in range(3)]
            for app_id in ids:
                entries.append(
                    entry(
                        app_id,
                        proto_c + rng.random(6) * 1e-3,
                        proto_s + rng.standard_normal(5) * 1e-3,
                    )
                )
            groups.append(LabelledGroup(ids[0], tuple(ids[1:])))
        corpus, store = synthetic_corpus_store(entries)
        index = build_index(store, corpus, COMBINED_COS)
        curve = threshold_curve(index, groups, k=5)
        assert curve[0][1] == 0.0
        knee = knee_threshold(curve)
        assert knee is not None
        assert knee <= 0.05

    def test_l2_rejected(self):
        corpus, store, groups = duplicate_groups_fixture()
        index = build_index(store, corpus, MetricConfig("content", "l2"))
        with pytest.raises(EvaluationError):
            threshold_curve(index, groups)


class TestSiftRate:
    def test_duplicates_retrieved_and_blank_excluded(self, tmp_path, manifest_factory):
        import cv2
        from PIL import Image

        from iconsim.sift import sift_corpus

        rng = np.random.Generator(np.random.Philox(21))
        def texture(seed):
            r = np.random.Generator(np.random.Philox(seed))
            base = r.integers(0, 256, (32, 32), dtype=np.uint8)
            img = cv2.resize(base, (128, 128), interpolation=cv2.INTER_CUBIC)
            img = cv2.GaussianBlur(img, (0, 0), 1.0)
            return np.stack([img] * 3, axis=-1).astype(np.uint8)

        tex_a = texture(100)
        tex_b = texture(200)
        paths = {}
        for name, arr in [
            ("a0", tex_a),
            ("a1", tex_a),
            ("a2", tex_a),
            ("b0", tex_b),
            ("b1", tex_b),
            ("blank", np.full((64, 64, 3), 140, dtype=np.uint8)),
        ]:
            p = tmp_path / f"{name}.png"
            Image.fromarray(arr).save(p)
            paths[name] = p

        manifest = manifest_factory(
            [manifest_row(name, paths[name]) for name in paths]
        )
        corpus = load_manifest(manifest)
        sets = sift_corpus(corpus)
        groups = [
            LabelledGroup("a0", ("a1", "a2")),
            LabelledGroup("b0", ("b1", "blank")),
        ]
        rate, excluded = sift_retrieval_rate(corpus, sets, groups, k=3)
        assert excluded == ["blank"]
        assert rate == 100.0

    def test_count_mismatch_rejected(self):
        corpus, store, groups = duplicate_groups_fixture()
        with pytest.raises(EvaluationError):
            sift_retrieval_rate(corpus, [], groups, k=3)


class TestCounterfeitReport:
    def planted_fixture(self):
        """Three popular targets, seven planted near-duplicates, far fillers.

        Target styles occupy the first three axes and noise styles the
        remaining axes, so noise sits at the maximal style distance from
        every target rather than merely a probably-large one.
        """
        rng = np.random.Generator(np.random.Philox(13))
        style_dim = 8
        entries = []
        protos = {}
        for t in range(3):
            c = rng.random(6) + 1.0
            s = np.zeros(style_dim)
            s[t] = 1.0
            protos[t] = (c, s)
            entries.append(
                entry(
                    f"target.{t}",
                    c,
                    s,
                    developer=f"dev.target{t}",
                    app_name=f"big app {t}",
                    downloads=1_000_000,
                )
            )
        plan = [(0, 3), (1, 2), (2, 2)]
        fake_n = 0
        for t, count in plan:
            c, s = protos[t]
            for _ in range(count):
                entries.append(
                    entry(
                        f"fake.{fake_n}",
                        c + rng.random(6) * 1e-4,
                        s + np.concatenate([rng.random(3) * 1e-4, np.zeros(style_dim - 3)]),
                        developer=f"dev.fake{fake_n}",
                        app_name=f"big app {t}",
                        downloads=100,
                    )
                )
                fake_n += 1
        for i in range(90):
            noise_style = np.concatenate([np.zeros(3), rng.random(style_dim - 3) + 0.1])
            entries.append(
                entry(
                    f"noise.{i}",
                    rng.random(6) * 50 + 30,
                    noise_style,
                    developer=f"dev.noise{i}",
                    app_name=f"unrelated thing {i}",
                )
            )
        corpus, store = synthetic_corpus_store(entries)
        return corpus, store

    def test_planted_candidates_found_exactly(self):
        corpus, store = self.planted_fixture()
        index = build_index(store, corpus, COMBINED_COS)
        report = counterfeit_report(
            index, corpus, ["target.0", "target.1", "target.2"], k=10, threshold=0.27
        )
        assert set(report.unique_candidates) == {f"fake.{i}" for i in range(7)}
        by_target = {t.app_id: t for t in report.targets}
        assert len(by_target["target.0"].candidates) == 3
        assert len(by_target["target.1"].candidates) == 2
        assert len(by_target["target.2"].candidates) == 2
        for t in report.targets:
            for cand in t.candidates:
                assert cand.normalized_distance <= 0.27
                assert cand.name_similarity == 1.0
                assert cand.downloads == 100

    def test_shared_candidate_counted_once(self):
        entries = [
            entry("target.a", [1, 0], [1, 0], developer="dev.a", downloads=900_000),
            entry("target.b", [1, 1e-4], [1, 1e-4], developer="dev.b", downloads=800_000),
            entry("shared", [1, 5e-5], [1, 5e-5], developer="dev.c"),
            entry("far", [40, 0.5], [0.1, 30], developer="dev.d"),
        ]
        corpus, store = synthetic_corpus_store(entries)
        index = build_index(store, corpus, COMBINED_COS)
        report = counterfeit_report(
            index, corpus, ["target.a", "target.b"], k=5, threshold=0.1
        )
        listed = [c.app_id for t in report.targets for c in t.candidates]
        assert listed.count("shared") == 2
        assert report.unique_candidates.count("shared") == 1
        assert report.total_hits >= len(report.unique_candidates)

    def test_no_candidates_still_lists_target(self):
        entries = [
            entry("target.a", [1, 0], [1, 0], developer="dev.a"),
            entry("far", [0, 50], [50, 0], developer="dev.b"),
        ]
        corpus, store = synthetic_corpus_store(entries)
        index = build_index(store, corpus, COMBINED_COS)
        report = counterfeit_report(index, corpus, ["target.a"], k=5, threshold=0.05)
        assert len(report.targets) == 1
        assert report.targets[0].candidates == ()
        assert report.unique_candidates == ()

    def test_same_developer_and_other_category_excluded(self):
        entries = [
            entry("target.a", [1, 0], [1, 0], developer="dev.a", category="GAME"),
            entry("own.clone", [1, 0], [1, 0], developer="dev.a", category="GAME"),
            entry("cat.clone", [1, 0], [1, 0], developer="dev.b", category="TOOLS"),
            entry("real.clone", [1, 0], [1, 0], developer="dev.c", category="GAME"),
        ]
        corpus, store = synthetic_corpus_store(entries)
        index = build_index(store, corpus, COMBINED_COS)
        report = counterfeit_report(index, corpus, ["target.a"], k=5, threshold=0.27)
        assert [c.app_id for c in report.targets[0].candidates] == ["real.clone"]

    def test_missing_target_rejected(self):
        corpus, store = self.planted_fixture()
        index = build_index(store, corpus, COMBINED_COS)
        with pytest.raises(EvaluationError):
            counterfeit_report(index, corpus, ["ghost"], k=5, threshold=0.27)
