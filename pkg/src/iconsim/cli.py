"""Command-line pipeline driver.

Subcommands map onto the library one-to-one: encode (manifest to embedding
store), groups (manifest to labelled groups), index (store validation and
summary), query (nearest neighbours of one app), eval (retrieval-rate grid),
knee (operating threshold from a rate curve), report (flag lookalike apps).

Conventions shared by every subcommand:
  - data goes to stdout, or to a file named with --out
  - progress and throughput go to stderr
  - failures print one JSON object {"error": {"type", "message"}} to stderr
    and exit nonzero
  - artifacts that depend on the encoding configuration carry its 16-byte
    hash; consumers compare hashes and refuse mixed inputs
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

from .config import (
    DEFAULT_ALPHA,
    DEFAULT_THRESHOLD_STEP,
    PipelineConfig,
)
from .corpus import (
    Corpus,
    load_manifest,
    propose_labelled_groups,
    read_groups,
    write_groups,
)
from .embeddings import EmbeddingStore, encode_corpus, read_store, write_store
from .errors import ConfigMismatchError, IconsimError
from .evaluation import (
    counterfeit_report,
    evaluate_grid,
    sift_retrieval_rate,
    threshold_curve,
)
from .metrics import MetricConfig
from .retrieval import QueryFilter, build_index, knee_threshold, query_top_k
from .sift import read_descriptor_cache, sift_corpus, write_descriptor_cache

DEFAULT_THRESHOLD = 0.27


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors come out machine readable."""

    def error(self, message: str) -> None:  # noqa: A003 - argparse API
        _print_error("UsageError", message)
        raise SystemExit(2)


def _print_error(err_type: str, message: str) -> None:
    payload = {"error": {"type": err_type, "message": message}}
    print(json.dumps(payload), file=sys.stderr)


def _emit(text: str, out: str | None) -> None:
    if out is None:
        print(text)
    else:
        Path(out).write_text(text + "\n", encoding="utf-8")


def _progress(total: int, label: str) -> Callable[[int, int], None]:
    """Progress callback that reports to stderr at ~20 checkpoints."""
    start = time.monotonic()
    step = max(1, total // 20)

    def callback(done: int, n: int) -> None:
        if done % step == 0 or done == n:
            elapsed = time.monotonic() - start
            rate = done / elapsed if elapsed > 0 else float("inf")
            print(f"{label}: {done}/{n} ({rate:.1f} icons/s)", file=sys.stderr)

    return callback


def _parse_ints(text: str, flag: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"{flag} expects comma-separated integers, got {text!r}")
    if not values:
        raise ValueError(f"{flag} must list at least one value")
    return values


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"{flag} expects comma-separated numbers, got {text!r}")
    if not values:
        raise ValueError(f"{flag} must list at least one value")
    return values


def _check_store_hash(store: EmbeddingStore, expected_hex: str | None) -> None:
    if expected_hex is None:
        return
    try:
        expected = bytes.fromhex(expected_hex)
    except ValueError:
        raise ValueError(f"--expect-config-hash is not hex: {expected_hex!r}")
    if expected != store.config_hash:
        raise ConfigMismatchError(
            f"store was encoded under config {store.config_hash.hex()}, "
            f"expected {expected_hex}"
        )


def _metric_from_args(args: argparse.Namespace) -> MetricConfig:
    return MetricConfig.from_flags(args.metric, args.norm, args.alpha)


def _load_store_and_corpus(args: argparse.Namespace) -> tuple[EmbeddingStore, Corpus]:
    store = read_store(args.store)
    _check_store_hash(store, getattr(args, "expect_config_hash", None))
    corpus = load_manifest(args.manifest)
    return store, corpus


# ---------------------------------------------------------------------------
# subcommands


def _cmd_encode(args: argparse.Namespace) -> int:
    config = PipelineConfig()
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        config = PipelineConfig.from_dict(raw)
    means = tuple(_parse_floats(args.means, "--means")) if args.means else None
    if means is not None and len(means) != 3:
        raise ValueError(f"--means expects three values, got {len(means)}")
    config = config.updated(
        backbone=args.backbone,
        projection_seed=args.seed,
        style_k=args.style_k,
        input_size=args.input_size,
        means=means,
    )
    corpus = load_manifest(args.manifest)
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    store = encode_corpus(
        corpus, config, workers=workers, progress=_progress(len(corpus), "encode")
    )
    write_store(args.out, store)
    summary = {
        "out": str(args.out),
        "rows": len(store),
        "content_dim": store.content_dim,
        "style_dim": store.style_dim,
        "projection_seed": store.projection_seed,
        "input_size": store.input_size,
        "config_hash": store.config_hash.hex(),
    }
    if args.sift_out is not None:
        sets = sift_corpus(corpus, progress=_progress(len(corpus), "sift"))
        write_descriptor_cache(args.sift_out, sets)
        summary["sift_out"] = str(args.sift_out)
    print(json.dumps(summary))
    return 0


def _cmd_groups(args: argparse.Namespace) -> int:
    corpus = load_manifest(args.manifest)
    groups = propose_labelled_groups(
        corpus,
        name_threshold=args.name_threshold,
        min_base_downloads=args.min_base_downloads,
        min_apps_per_developer=args.min_apps,
    )
    total = sum(len(g.all_ids()) for g in groups)
    print(f"groups: {len(groups)} groups, {total} labelled apps", file=sys.stderr)
    if args.out is not None:
        write_groups(args.out, groups)
    else:
        for g in groups:
            line = {"base_app_id": g.base_app_id, "member_app_ids": list(g.member_app_ids)}
            print(json.dumps(line, separators=(",", ":")))
    return 0


def _cmd_index(args: argparse.Namespace) -> int:
    store, corpus = _load_store_and_corpus(args)
    index = build_index(store, corpus, _metric_from_args(args))
    summary = {
        "rows": len(index),
        "content_dim": store.content_dim,
        "style_dim": store.style_dim,
        "metric": index.metric.label,
        "developers": len(set(index.developers)),
        "categories": len(set(index.categories)),
        "projection_seed": store.projection_seed,
        "input_size": store.input_size,
        "config_hash": store.config_hash.hex(),
    }
    _emit(json.dumps(summary), args.out)
    return 0


def _cmd_query(args: argparse.Namespace) -> int:
    store, corpus = _load_store_and_corpus(args)
    index = build_index(store, corpus, _metric_from_args(args))
    if args.target not in corpus:
        raise ValueError(f"target {args.target!r} is not in the manifest")
    record = corpus.get(args.target)
    query_filter = QueryFilter(
        exclude_developer=record.developer if args.exclude_developer else None,
        require_category=record.category if args.same_category else None,
        exclude_self=args.exclude_self,
    )
    results = query_top_k(
        index,
        index.embedding_of(args.target),
        args.k,
        query_filter,
        max_normalized_distance=args.threshold,
    )
    payload = {
        "target": args.target,
        "metric": index.metric.label,
        "k": args.k,
        "threshold": args.threshold,
        "config_hash": store.config_hash.hex(),
        "results": [
            {
                "app_id": r.app_id,
                "rank": r.rank,
                "raw_distance": r.raw_distance,
                "normalized_distance": r.normalized_distance,
            }
            for r in results
        ],
    }
    _emit(json.dumps(payload, indent=2), args.out)
    return 0


def _eval_rows(
    store: EmbeddingStore,
    corpus: Corpus,
    groups,
    ks: Sequence[int],
    alphas: Sequence[float] | None,
    default_alpha: float,
) -> list[dict]:
    """Rate-table rows: the four single-part metrics, then combined rows.

    With --alphas the combined rows repeat per alpha, largest first, so the
    table reads as a sweep from style-dominated down to content-dominated.
    """
    rows: list[dict] = []
    base = tuple(
        MetricConfig.from_flags(kind, norm)
        for kind in ("content", "style")
        for norm in ("l2", "cos")
    )
    base_report = evaluate_grid(store, corpus, groups, ks, base)
    for label in base_report.metric_labels:
        rows.append(
            {
                "metric": label,
                "alpha": None,
                "rates": {k: base_report.rate(label, k) for k in base_report.ks},
            }
        )
    sweep = sorted(alphas, reverse=True) if alphas else [default_alpha]
    tag = alphas is not None
    for alpha in sweep:
        combined = tuple(
            MetricConfig.from_flags("combined", norm, alpha) for norm in ("l2", "cos")
        )
        rep = evaluate_grid(store, corpus, groups, ks, combined)
        for label in rep.metric_labels:
            name = f"{label} alpha={alpha:g}" if tag else label
            rows.append(
                {
                    "metric": name,
                    "alpha": alpha,
                    "rates": {k: rep.rate(label, k) for k in rep.ks},
                }
            )
    return rows


def _format_rows(rows: list[dict], ks: Sequence[int]) -> str:
    header = ["metric"] + [f"top-{k}" for k in ks]
    table = [header]
    for row in rows:
        table.append([row["metric"]] + [f"{row['rates'][k]:.2f}" for k in ks])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table
    ]
    return "\n".join(lines)


def _cmd_eval(args: argparse.Namespace) -> int:
    store, corpus = _load_store_and_corpus(args)
    groups = read_groups(args.groups)
    ks = sorted(set(_parse_ints(args.k, "--k")))
    alphas = _parse_floats(args.alphas, "--alphas") if args.alphas else None
    rows = _eval_rows(store, corpus, groups, ks, alphas, args.alpha)
    excluded: list[str] = []
    if args.sift_cache is not None:
        sets = read_descriptor_cache(args.sift_cache)
        rates = {}
        for k in ks:
            rate, excluded = sift_retrieval_rate(corpus, sets, groups, k)
            rates[k] = rate
        rows.append({"metric": "sift", "alpha": None, "rates": rates})
        if excluded:
            print(
                f"eval: {len(excluded)} icons had no SIFT keypoints and were "
                "excluded from the baseline",
                file=sys.stderr,
            )
    if args.json:
        payload = {
            "config_hash": store.config_hash.hex(),
            "ks": ks,
            "groups": len(groups),
            "labelled_total": sum(len(g.all_ids()) for g in groups),
            "rows": [
                {
                    "metric": r["metric"],
                    "alpha": r["alpha"],
                    "rates": {str(k): v for k, v in r["rates"].items()},
                }
                for r in rows
            ],
            "sift_excluded": excluded,
        }
        _emit(json.dumps(payload, indent=2), args.out)
    else:
        _emit(_format_rows(rows, ks), args.out)
    return 0


def _cmd_knee(args: argparse.Namespace) -> int:
    if args.curve is None and args.store is None:
        raise ValueError("knee needs either --curve or --store/--manifest/--groups")
    config_hash: str | None = None
    source_k = args.k
    source_metric = f"{args.metric}_{args.norm}"
    if args.curve is not None:
        raw = json.loads(Path(args.curve).read_text(encoding="utf-8"))
        if isinstance(raw, dict):
            entries = raw.get("points")
            config_hash = raw.get("config_hash")
            source_k = raw.get("k", source_k)
            source_metric = raw.get("metric", source_metric)
            if (
                args.expect_config_hash is not None
                and config_hash is not None
                and config_hash != args.expect_config_hash
            ):
                raise ConfigMismatchError(
                    f"curve was computed under config {config_hash}, "
                    f"expected {args.expect_config_hash}"
                )
        else:
            entries = raw
        try:
            points = [(float(t), float(r)) for t, r in entries]
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{args.curve} is not a threshold/rate curve: {exc}")
    else:
        if args.manifest is None or args.groups is None:
            raise ValueError("computing a curve needs --manifest and --groups")
        store, corpus = _load_store_and_corpus(args)
        groups = read_groups(args.groups)
        index = build_index(store, corpus, _metric_from_args(args))
        points = threshold_curve(index, groups, k=args.k, step=args.step)
        config_hash = store.config_hash.hex()
    knee = knee_threshold(points)
    if args.curve_out is not None:
        curve_doc = {
            "config_hash": config_hash,
            "k": source_k,
            "metric": source_metric,
            "points": [[t, r] for t, r in points],
        }
        Path(args.curve_out).write_text(
            json.dumps(curve_doc, indent=2) + "\n", encoding="utf-8"
        )
    payload = {"knee": knee, "points": len(points), "config_hash": config_hash}
    _emit(json.dumps(payload), args.out)
    return 0


def _read_targets(args: argparse.Namespace) -> list[str]:
    targets: list[str] = []
    if args.targets:
        targets.extend(part.strip() for part in args.targets.split(",") if part.strip())
    if args.targets_file:
        for line in Path(args.targets_file).read_text(encoding="utf-8").splitlines():
            if line.strip():
                targets.append(line.strip())
    if not targets:
        raise ValueError("report needs --targets or --targets-file")
    return targets


def _cmd_report(args: argparse.Namespace) -> int:
    store, corpus = _load_store_and_corpus(args)
    index = build_index(store, corpus, _metric_from_args(args))
    targets = _read_targets(args)
    report = counterfeit_report(
        index, corpus, targets, k=args.k, threshold=args.threshold
    )
    payload = {
        "config_hash": store.config_hash.hex(),
        "k": report.k,
        "threshold": report.threshold,
        "metric": index.metric.label,
        "total_hits": report.total_hits,
        "unique_candidates": list(report.unique_candidates),
        "targets": [
            {
                "app_id": t.app_id,
                "developer": t.developer,
                "category": t.category,
                "downloads": t.downloads,
                "candidates": [
                    {
                        "app_id": c.app_id,
                        "rank": c.rank,
                        "raw_distance": c.raw_distance,
                        "normalized_distance": c.normalized_distance,
                        "name_similarity": c.name_similarity,
                        "downloads": c.downloads,
                    }
                    for c in t.candidates
                ],
            }
            for t in report.targets
        ],
    }
    _emit(json.dumps(payload, indent=2), args.out)
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_metric_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--metric", choices=("content", "style", "combined"),
                   default="combined")
    p.add_argument("--norm", choices=("l2", "cos"), default="cos")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)


def _add_store_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--store", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--expect-config-hash", default=None,
                   help="reject the store unless its config hash matches")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iconsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", parents=[], help="manifest -> embedding store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", default=None)
    p.add_argument("--seed", type=int, default=None, help="projection seed")
    p.add_argument("--style-k", type=int, default=None)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--means", default=None, help="R,G,B preprocessing means")
    p.add_argument("--workers", type=int, default=None,
                   help="encoder processes (default: logical CPU count)")
    p.add_argument("--config", default=None, help="JSON file of pipeline settings")
    p.add_argument("--sift-out", default=None,
                   help="also write a SIFT descriptor cache here")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("groups", help="manifest -> labelled similarity groups")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--name-threshold", type=float, default=0.8)
    p.add_argument("--min-base-downloads", type=int, default=500_000)
    p.add_argument("--min-apps", type=int, default=3)
    p.set_defaults(func=_cmd_groups)

    p = sub.add_parser("index", help="validate a store against its manifest")
    _add_store_flags(p)
    _add_metric_flags(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("query", help="nearest neighbours of one app")
    _add_store_flags(p)
    _add_metric_flags(p)
    p.add_argument("--target", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--threshold", type=float, default=None,
                   help="drop results above this normalized distance")
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--exclude-developer", action="store_true",
                   help="drop apps by the target's developer")
    p.add_argument("--same-category", action="store_true",
                   help="keep only apps in the target's category")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("eval", help="retrieval-rate grid over labelled groups")
    _add_store_flags(p)
    p.add_argument("--groups", required=True)
    p.add_argument("--k", default="5,10,15,20", help="comma-separated top-k values")
    p.add_argument("--alphas", default=None,
                   help="sweep the combined metric over these weights")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA,
                   help="combined weight when --alphas is not given")
    p.add_argument("--sift-cache", default=None,
                   help="descriptor cache for the SIFT baseline row")
    p.add_argument("--json", action="store_true",
                   help="machine-readable report instead of a table")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("knee", help="operating threshold from a rate curve")
    p.add_argument("--curve", default=None, help="JSON curve file to analyse")
    p.add_argument("--store", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--groups", default=None)
    p.add_argument("--expect-config-hash", default=None)
    _add_metric_flags(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--step", type=float, default=DEFAULT_THRESHOLD_STEP)
    p.add_argument("--curve-out", default=None, help="save the computed curve here")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_knee)

    p = sub.add_parser("report", help="flag lookalike apps near popular targets")
    _add_store_flags(p)
    _add_metric_flags(p)
    p.add_argument("--targets", default=None, help="comma-separated app ids")
    p.add_argument("--targets-file", default=None, help="one app id per line")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IconsimError as exc:
        _print_error(type(exc).__name__, str(exc))
        return 1
    except (ValueError, OSError) as exc:
        _print_error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
