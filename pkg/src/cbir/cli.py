"""Command-line entry point tying the store, engine, and evaluators together.

Subcommands: ingest, build-index, query, evaluate, probe, ablate. Runtime
settings come from a JSON config file plus ``--set key=value`` overrides
(dotted keys, JSON-parsed values); ``--workers``, ``--seed``, ``--output``
flags take precedence over the config, which takes precedence over the
CBIR_WORKERS environment variable.

Reports are JSON documents of the form {"meta": ..., "payload": ...}:
everything run-dependent but result-irrelevant (timestamp, worker count)
lives in meta, so payloads from identical configs are byte-identical
regardless of parallelism. Payloads embed a provenance block (config
hash, input digests, seed). Errors print a machine-readable record
{"error": {"code", "message"}} to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import ablation as ablation_mod
from . import engine, formats, metrics, probes, store
from .errors import CbirError, MissingInput, UnknownRecordId, InvalidManifest

DEFAULT_QUERY_HITS = 6


class RunConfig:
    """Resolved settings for one command invocation."""

    def __init__(self, raw: dict, workers: int, seed: int, output: Path):
        self.raw = raw
        self.workers = workers
        self.seed = seed
        self.output = output

    def get(self, key: str, default=None):
        return self.raw.get(key, default)

    def input_path(self, key: str) -> Path:
        value = self.raw.get(key)
        if not value:
            raise MissingInput(f"config key {key!r} (an input path) is required")
        path = Path(value)
        if not path.exists():
            raise MissingInput(f"{key} path {path} does not exist")
        return path

    def config_hash(self) -> str:
        """Digest of the effective config, excluding the worker count."""
        scrubbed = {k: v for k, v in self.raw.items() if k != "workers"}
        canon = json.dumps(scrubbed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _parse_set_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_override(config: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ValueError(f"--set expects KEY=VALUE, got {assignment!r}")
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = _parse_set_value(raw)


def _resolve_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise MissingInput(f"config file {cfg_path} does not exist")
        raw = json.loads(cfg_path.read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
    for assignment in args.set or []:
        _apply_override(raw, assignment)

    if args.workers is not None:
        workers = args.workers
    elif "workers" in raw:
        workers = int(raw["workers"])
    elif os.environ.get("CBIR_WORKERS"):
        workers = int(os.environ["CBIR_WORKERS"])
    else:
        workers = 1
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")

    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    output = Path(args.output) if args.output else Path(raw.get("output", "."))
    return RunConfig(raw, workers, seed, output)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _provenance(cfg: RunConfig, inputs: dict[str, Path]) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "inputs": {name: _sha256(path) for name, path in sorted(inputs.items())},
        "seed": cfg.seed,
    }


def _write_report(cfg: RunConfig, name: str, payload: dict) -> Path:
    report = {
        "meta": {
            "created_at": datetime.now(timezone.utc).isoformat(),
            "workers": cfg.workers,
        },
        "payload": payload,
    }
    path = cfg.output / name
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", "utf-8")
    return path


def _write_csv(path: Path, header: tuple, rows) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _preparation_rules(cfg: RunConfig) -> store.PreparationRules:
    prep = cfg.get("preparation", {}) or {}
    split = prep.get("patient_split", {}) or {}
    return store.PreparationRules(
        dedup_datasets=frozenset(prep.get("dedup_datasets", [])),
        multilabel_exclude_datasets=frozenset(
            prep.get("multilabel_exclude_datasets", [])
        ),
        label_aliases=dict(prep.get("label_aliases", {})),
        patient_split_datasets=frozenset(split.get("datasets", [])),
        val_fraction=float(split.get("val_fraction", 0.1)),
    )


def _n_values(cfg: RunConfig) -> list[int]:
    values = cfg.get("n_values", list(metrics.REPORT_NS))
    values = [int(v) for v in values]
    if not values or any(v < 1 for v in values):
        raise ValueError(f"n_values must be non-empty positive ints, got {values}")
    return values


def _split_queries(
    manifest: list[store.ManifestEntry],
    emb: formats.EmbeddingFile,
    table: store.ClassTable,
    split: str,
) -> tuple[list[tuple[int, np.ndarray]], list[int]]:
    """Normalized (record_id, vector) pairs plus class ids for one split."""
    vec_by_id = {int(rid): i for i, rid in enumerate(emb.record_ids)}
    queries: list[tuple[int, np.ndarray]] = []
    classes: list[int] = []
    for entry in manifest:
        if entry.split != split:
            continue
        row = vec_by_id.get(entry.record_id)
        if row is None:
            raise UnknownRecordId(
                f"record {entry.record_id} ({split} split) has no embedding"
            )
        queries.append((entry.record_id, store.l2_normalize(emb.vectors[row])))
        classes.append(store.single_label_id(entry, table))
    return queries, classes


def _load_index_checked(cfg: RunConfig, manifest) -> store.VectorIndex:
    index = formats.load_index(cfg.input_path("index"))
    table = store.ClassTable.from_entries(manifest)
    if index.class_table != table:
        raise InvalidManifest(
            "index class table does not match the manifest; rebuild the index "
            "from this manifest"
        )
    return index


def cmd_ingest(cfg: RunConfig) -> int:
    manifest_path = cfg.input_path("manifest")
    raw = formats.read_manifest(manifest_path)
    rules = _preparation_rules(cfg)
    prepared, log = store.prepare_manifest(raw, rules)

    moved = 0
    for dataset in sorted(rules.patient_split_datasets):
        subset = [e for e in prepared if e.dataset == dataset]
        if not subset:
            continue
        replaced = store.patient_wise_split(subset, rules.val_fraction, cfg.seed)
        by_id = {e.record_id: e for e in replaced}
        moved += sum(
            1 for old, new in zip(subset, replaced) if old.split != new.split
        )
        prepared = [by_id.get(e.record_id, e) for e in prepared]

    cfg.output.mkdir(parents=True, exist_ok=True)
    out_manifest = cfg.output / "prepared_manifest.csv"
    formats.write_manifest(out_manifest, prepared)
    payload = {
        "preparation": log.as_dict(),
        "patient_split": {
            "datasets": sorted(rules.patient_split_datasets),
            "val_fraction": rules.val_fraction,
            "samples_moved_to_val": moved,
        },
        "provenance": _provenance(cfg, {"manifest": manifest_path}),
    }
    report = _write_report(cfg, "ingest_log.json", payload)
    print(f"wrote {out_manifest} ({log.retained_count} records) and {report}")
    return 0


def cmd_build_index(cfg: RunConfig) -> int:
    emb_path = cfg.input_path("embeddings")
    manifest_path = cfg.input_path("manifest")
    split = cfg.get("index_split", "train")
    manifest = formats.read_manifest(manifest_path)
    emb = formats.read_embedding_file(emb_path)
    index = store.build_index(
        emb.records(), manifest, split, dimension=emb.dimension
    )
    cfg.output.mkdir(parents=True, exist_ok=True)
    index_path = Path(cfg.get("index") or cfg.output / f"{split}.idx")
    index_path.parent.mkdir(parents=True, exist_ok=True)
    formats.save_index(index, index_path)
    print(
        f"wrote {index_path}: {index.count} vectors, dimension {index.dimension}, "
        f"{len(index.class_table)} classes"
    )
    return 0


def _query_vectors(cfg: RunConfig, args) -> list[tuple[int, np.ndarray]]:
    if (args.record_id is None) == (args.vector_file is None):
        raise ValueError("pass exactly one of --record-id or --vector-file")
    if args.record_id is not None:
        emb = formats.read_embedding_file(cfg.input_path("embeddings"))
        rows = np.flatnonzero(emb.record_ids == np.uint64(args.record_id))
        if rows.size == 0:
            raise UnknownRecordId(
                f"record {args.record_id} is not in the embedding file"
            )
        return [(args.record_id, store.l2_normalize(emb.vectors[int(rows[0])]))]
    path = Path(args.vector_file)
    if not path.exists():
        raise MissingInput(f"vector file {path} does not exist")
    emb = formats.read_embedding_file(path)
    return [
        (int(rid), store.l2_normalize(vec))
        for rid, vec in zip(emb.record_ids, emb.vectors)
    ]


def cmd_query(cfg: RunConfig, args) -> int:
    manifest = formats.read_manifest(cfg.input_path("manifest"))
    index = _load_index_checked(cfg, manifest)
    queries = _query_vectors(cfg, args)
    n = args.n if args.n is not None else int(cfg.get("query_hits", DEFAULT_QUERY_HITS))
    results = engine.batch_top_n(
        queries, index, n, exclude_self=True, workers=cfg.workers
    )
    entries = {e.record_id: e for e in manifest}
    table = index.class_table
    for result in results:
        print(f"query {result.query_record_id}: top {len(result.hits)} hits")
        for rank, hit in enumerate(result.hits, start=1):
            entry = entries.get(hit.record_id)
            source = entry.source_path if entry else "?"
            label = table.name_of(index.label_of(hit.record_id))
            print(
                f"  {rank:2d}. record {hit.record_id}  sim {hit.similarity:.4f}  "
                f"{label}  {source}"
            )
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    emb_path = cfg.input_path("embeddings")
    manifest_path = cfg.input_path("manifest")
    manifest = formats.read_manifest(manifest_path)
    index = _load_index_checked(cfg, manifest)
    emb = formats.read_embedding_file(emb_path)
    split = cfg.get("query_split", "test")
    queries, classes = _split_queries(manifest, emb, index.class_table, split)
    n_values = _n_values(cfg)
    n_max = max(set(n_values) | set(metrics.REPORT_NS))
    results = engine.batch_top_n(
        queries, index, n_max, exclude_self=True, workers=cfg.workers
    )
    report = metrics.evaluate_retrieval(results, classes, index, n_values)

    cfg.output.mkdir(parents=True, exist_ok=True)
    inputs = {
        "embeddings": emb_path,
        "manifest": manifest_path,
        "index": cfg.input_path("index"),
    }
    payload = {
        "metrics": report.as_dict(),
        "query_split": split,
        "query_count": len(queries),
        "provenance": _provenance(cfg, inputs),
    }
    report_path = _write_report(cfg, "metrics.json", payload)
    _write_csv(
        cfg.output / "metrics.csv",
        ("metric", "n", "averaging", "value"),
        report.metric_rows(),
    )
    _write_csv(
        cfg.output / "per_class.csv",
        ("class_id", "class_name", "class_kind", "query_count", "index_count", "p_at_1"),
        [
            (r.class_id, r.class_name, r.class_kind, r.query_count, r.index_count, r.p_at_1)
            for r in report.per_class
        ],
    )
    print(f"wrote {report_path}, metrics.csv, per_class.csv")
    return 0


def _knn_config(cfg: RunConfig) -> probes.KnnConfig:
    section = cfg.get("knn", {}) or {}
    if "k_grid" in section:
        return probes.KnnConfig(k_grid=tuple(int(k) for k in section["k_grid"]))
    return probes.KnnConfig()


def _probe_config(cfg: RunConfig) -> probes.LinearProbeConfig:
    section = dict(cfg.get("probe", {}) or {})
    section.setdefault("seed", cfg.seed)
    return probes.LinearProbeConfig(**section)


def cmd_probe(cfg: RunConfig) -> int:
    emb_path = cfg.input_path("embeddings")
    manifest_path = cfg.input_path("manifest")
    manifest = formats.read_manifest(manifest_path)
    index = _load_index_checked(cfg, manifest)
    emb = formats.read_embedding_file(emb_path)
    val_queries, val_classes = _split_queries(manifest, emb, index.class_table, "val")
    test_queries, test_classes = _split_queries(
        manifest, emb, index.class_table, "test"
    )
    report = probes.run_probe_suite(
        index,
        np.array([v for _, v in val_queries], dtype=np.float32),
        val_classes,
        np.array([v for _, v in test_queries], dtype=np.float32),
        test_classes,
        _knn_config(cfg),
        _probe_config(cfg),
        workers=cfg.workers,
    )
    cfg.output.mkdir(parents=True, exist_ok=True)
    inputs = {
        "embeddings": emb_path,
        "manifest": manifest_path,
        "index": cfg.input_path("index"),
    }
    payload = {
        "probe": report.as_dict(),
        "provenance": _provenance(cfg, inputs),
    }
    report_path = _write_report(cfg, "probe.json", payload)
    _write_csv(
        cfg.output / "probe_history.csv",
        ("epoch", "train_loss", "val_loss"),
        report.history.rows(),
    )
    print(f"wrote {report_path} and probe_history.csv (best k = {report.knn_best_k})")
    return 0


def _ablation_config(cfg: RunConfig) -> ablation_mod.AblationConfig:
    section = dict(cfg.get("ablation", {}) or {})
    section.setdefault("seed", cfg.seed)
    if "n_schedule" in section:
        section["n_schedule"] = tuple(int(n) for n in section["n_schedule"])
    return ablation_mod.AblationConfig(**section)


def cmd_ablate(cfg: RunConfig) -> int:
    emb_path = cfg.input_path("embeddings")
    manifest_path = cfg.input_path("manifest")
    manifest = formats.read_manifest(manifest_path)
    emb = formats.read_embedding_file(emb_path)
    train = store.build_index(emb.records(), manifest, "train", dimension=emb.dimension)
    test = store.build_index(emb.records(), manifest, "test", dimension=emb.dimension)
    curve = ablation_mod.run_ablation(
        train, test, _ablation_config(cfg), workers=cfg.workers
    )
    cfg.output.mkdir(parents=True, exist_ok=True)
    payload = {
        "ablation": curve.as_dict(),
        "provenance": _provenance(
            cfg, {"embeddings": emb_path, "manifest": manifest_path}
        ),
    }
    report_path = _write_report(cfg, "ablation.json", payload)
    _write_csv(cfg.output / "ablation.csv", ("n", "seed", "p_at_1"), curve.csv_rows())
    print(f"wrote {report_path} and ablation.csv ({len(curve.rows)} rows)")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a JSON config file")
    common.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a config entry (dotted keys, JSON-parsed values)",
    )
    common.add_argument("--workers", type=int, help="parallel worker count")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--output", help="report output directory")

    parser = argparse.ArgumentParser(
        prog="cbir",
        description="Exact cosine-similarity retrieval and evaluation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="prepare a manifest")
    sub.add_parser("build-index", parents=[common], help="build and save an index")
    query = sub.add_parser("query", parents=[common], help="rank similar records")
    query.add_argument("--record-id", type=int, help="query by embedding record id")
    query.add_argument("--vector-file", help="embedding file of query vectors")
    query.add_argument("--n", type=int, help=f"hits to show (default {DEFAULT_QUERY_HITS})")
    sub.add_parser("evaluate", parents=[common], help="score retrieval precision")
    sub.add_parser("probe", parents=[common], help="run kNN and linear probes")
    sub.add_parser("ablate", parents=[common], help="trace P@1 vs index size")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "build-index":
            return cmd_build_index(cfg)
        if args.command == "query":
            return cmd_query(cfg, args)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "probe":
            return cmd_probe(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise ValueError(f"unknown command {args.command!r}")
    except CbirError as exc:
        record = {"error": {"code": exc.code, "message": str(exc)}}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        record = {"error": {"code": "invalid_input", "message": str(exc)}}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
