"""End-to-end command-line tests driven through in-process main()."""

import csv
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from cbir.ablation import AblationConfig, run_ablation
from cbir.cli import main
from cbir.formats import (
    load_index,
    read_embedding_file,
    read_manifest,
    write_embedding_file,
)
from cbir.store import build_index, l2_normalize

from reference_impl import (
    naive_top_n,
    precision_at_n_macro_oracle,
    precision_at_n_micro_oracle,
)
from synthetic import corpus_on_disk


def run_cli(*argv):
    return main([str(a) for a in argv])


def read_payload(path):
    report = json.loads(path.read_text("utf-8"))
    return report["meta"], report["payload"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Default corpus with its train index already built."""
    info = corpus_on_disk(tmp_path_factory.mktemp("corpus"))
    assert run_cli("build-index", "--config", info["config"]) == 0
    return info


@pytest.fixture(scope="module")
def tight_corpus(tmp_path_factory):
    """Nearly noise-free clusters: every retrieval metric should hit 1.0."""
    info = corpus_on_disk(tmp_path_factory.mktemp("tight"), seed=3, sigma=0.02)
    assert run_cli("build-index", "--config", info["config"]) == 0
    return info


class TestIngest:
    def test_no_rules_is_identity(self, tmp_path):
        info = corpus_on_disk(tmp_path)
        assert run_cli("ingest", "--config", info["config"]) == 0
        prepared = read_manifest(info["output"] / "prepared_manifest.csv")
        assert prepared == info["entries"]
        meta, payload = read_payload(info["output"] / "ingest_log.json")
        assert payload["preparation"]["retained_count"] == len(info["entries"])
        assert payload["patient_split"]["samples_moved_to_val"] == 0
        assert meta["workers"] == 1

    def test_patient_split_moves_whole_patients(self, tmp_path):
        info = corpus_on_disk(tmp_path)
        override = (
            'preparation={"patient_split": {"datasets": ["synthetic"], '
            '"val_fraction": 0.2}}'
        )
        assert run_cli("ingest", "--config", info["config"], "--set", override) == 0
        prepared = read_manifest(info["output"] / "prepared_manifest.csv")
        by_patient: dict[str, set[str]] = {}
        for entry in prepared:
            by_patient.setdefault(entry.patient_id, set()).add(entry.split)
        for splits in by_patient.values():
            assert not ({"train", "val"} <= splits), "patient straddles the split"
        _, payload = read_payload(info["output"] / "ingest_log.json")
        moved = payload["patient_split"]["samples_moved_to_val"]
        assert moved > 0
        changed = sum(
            1 for old, new in zip(info["entries"], prepared) if old.split != new.split
        )
        assert moved == changed

    def test_reruns_are_byte_identical(self, tmp_path):
        info = corpus_on_disk(tmp_path)
        override = 'preparation={"patient_split": {"datasets": ["synthetic"]}}'
        run_cli("ingest", "--config", info["config"], "--set", override)
        first = (info["output"] / "prepared_manifest.csv").read_bytes()
        run_cli("ingest", "--config", info["config"], "--set", override)
        assert (info["output"] / "prepared_manifest.csv").read_bytes() == first


class TestErrors:
    def test_missing_input_key(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text("{}", "utf-8")
        assert run_cli("evaluate", "--config", config) == 1
        record = json.loads(capsys.readouterr().err)
        assert record["error"]["code"] == "missing_input"
        assert "embeddings" in record["error"]["message"]

    def test_missing_config_file(self, tmp_path, capsys):
        assert run_cli("ingest", "--config", tmp_path / "nope.json") == 1
        assert json.loads(capsys.readouterr().err)["error"]["code"] == "missing_input"

    def test_malformed_set_flag(self, tmp_path, capsys):
        info = corpus_on_disk(tmp_path)
        assert run_cli("ingest", "--config", info["config"], "--set", "oops") == 1
        assert json.loads(capsys.readouterr().err)["error"]["code"] == "invalid_input"

    def test_query_needs_exactly_one_source(self, corpus, capsys):
        assert run_cli("query", "--config", corpus["config"]) == 1
        assert json.loads(capsys.readouterr().err)["error"]["code"] == "invalid_input"

    def test_query_unknown_record(self, corpus, capsys):
        code = run_cli(
            "query", "--config", corpus["config"], "--record-id", "999999"
        )
        assert code == 1
        record = json.loads(capsys.readouterr().err)
        assert record["error"]["code"] == "unknown_record_id"

    def test_index_built_from_other_manifest_rejected(self, corpus, tmp_path, capsys):
        other = corpus_on_disk(tmp_path / "other", n_classes=2)
        code = run_cli(
            "evaluate",
            "--config", corpus["config"],
            "--set", f"manifest={other['manifest']}",
        )
        assert code == 1
        assert json.loads(capsys.readouterr().err)["error"]["code"] == "invalid_manifest"


class TestBuildIndex:
    def test_index_contents(self, corpus):
        index = load_index(corpus["index"])
        train_entries = [e for e in corpus["entries"] if e.split == "train"]
        assert index.count == len(train_entries)
        assert index.dimension == 8
        assert sorted(index.record_ids.tolist()) == sorted(
            e.record_id for e in train_entries
        )
        assert index.class_table.names == ("class00", "class01", "class02")
        norms = np.linalg.norm(index.vectors.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_other_split(self, tmp_path):
        info = corpus_on_disk(tmp_path)
        code = run_cli(
            "build-index", "--config", info["config"],
            "--set", "index_split=val",
            "--set", f"index={tmp_path / 'val.idx'}",
        )
        assert code == 0
        index = load_index(tmp_path / "val.idx")
        assert index.count == sum(1 for e in info["entries"] if e.split == "val")


class TestQuery:
    def test_record_id_query_output(self, corpus, capsys):
        assert run_cli("query", "--config", corpus["config"], "--record-id", 0) == 0
        out = capsys.readouterr().out
        lines = out.strip().splitlines()
        assert lines[0] == "query 0: top 6 hits"
        assert len(lines) == 7
        hit_re = re.compile(
            r"^\s+\d+\. record (\d+)  sim (-?[01]\.\d{4})  (\w+)  (\S+)$"
        )
        seen = []
        for line in lines[1:]:
            match = hit_re.match(line)
            assert match, line
            seen.append(int(match.group(1)))
            assert -1.0 <= float(match.group(2)) <= 1.0
        assert 0 not in seen, "query record must be excluded from its own hits"

    def test_hit_count_flag(self, corpus, capsys):
        run_cli("query", "--config", corpus["config"], "--record-id", 0, "--n", 3)
        assert len(capsys.readouterr().out.strip().splitlines()) == 4

    def test_vector_file_query(self, corpus, tmp_path, capsys):
        vecs = corpus["vectors"][:2]
        path = tmp_path / "queries.bin"
        write_embedding_file(path, np.array([900, 901], dtype=np.uint64), vecs)
        code = run_cli(
            "query", "--config", corpus["config"], "--vector-file", path
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "query 900: top 6 hits" in out
        assert "query 901: top 6 hits" in out

    def test_duplicate_of_indexed_vector_ranks_it_first(self, corpus, tmp_path, capsys):
        # query record 0's own vector under a fresh id: nothing is excluded
        # and record 0 itself must come back with similarity 1.0
        path = tmp_path / "probe.bin"
        write_embedding_file(
            path, np.array([555], dtype=np.uint64), corpus["vectors"][:1]
        )
        run_cli("query", "--config", corpus["config"], "--vector-file", path)
        lines = capsys.readouterr().out.strip().splitlines()
        assert re.match(r"^\s+1\. record 0  sim 1\.0000  ", lines[1])


class TestEvaluate:
    def test_tight_clusters_score_one_everywhere(self, tight_corpus, capsys):
        assert run_cli("evaluate", "--config", tight_corpus["config"]) == 0
        _, payload = read_payload(tight_corpus["output"] / "metrics.json")
        for averaging in ("p_at_n_micro", "p_at_n_macro"):
            for n in ("1", "3", "5", "10"):
                assert payload["metrics"][averaging][n] == 1.0
        assert payload["query_count"] == 36
        per_class = list(
            csv.DictReader((tight_corpus["output"] / "per_class.csv").open())
        )
        assert len(per_class) == 3
        for row in per_class:
            assert float(row["p_at_1"]) == 1.0
            assert row["query_count"] == "12"
            assert row["index_count"] == "30"

    def test_report_matches_naive_recomputation(self, corpus):
        assert run_cli("evaluate", "--config", corpus["config"]) == 0
        _, payload = read_payload(corpus["output"] / "metrics.json")

        index = load_index(corpus["index"])
        test_entries = [e for e in corpus["entries"] if e.split == "test"]
        label_by_rid = {
            int(rid): int(lbl)
            for rid, lbl in zip(index.record_ids, index.labels)
        }
        rel_lists, classes = [], []
        for entry in test_entries:
            query = l2_normalize(corpus["vectors"][entry.record_id])
            hits = naive_top_n(query, index.vectors, index.record_ids, 10)
            cls = corpus["table"].id_for(entry.labels[0])
            rel_lists.append([int(label_by_rid[rid] == cls) for rid, _ in hits])
            classes.append(cls)
        for n in (1, 3, 5, 10):
            want_micro = precision_at_n_micro_oracle(rel_lists, n)
            want_macro = precision_at_n_macro_oracle(rel_lists, classes, n)
            assert payload["metrics"]["p_at_n_micro"][str(n)] == pytest.approx(
                want_micro, abs=1e-12
            )
            assert payload["metrics"]["p_at_n_macro"][str(n)] == pytest.approx(
                want_macro, abs=1e-12
            )

    def test_payload_identical_across_worker_counts(self, corpus):
        run_cli("evaluate", "--config", corpus["config"], "--workers", 1)
        meta1, payload1 = read_payload(corpus["output"] / "metrics.json")
        run_cli("evaluate", "--config", corpus["config"], "--workers", 8)
        meta8, payload8 = read_payload(corpus["output"] / "metrics.json")
        assert payload1 == payload8
        assert meta1["workers"] == 1 and meta8["workers"] == 8

    def test_query_split_override(self, corpus):
        run_cli(
            "evaluate", "--config", corpus["config"], "--set", 'query_split="val"'
        )
        _, payload = read_payload(corpus["output"] / "metrics.json")
        assert payload["query_split"] == "val"
        assert payload["query_count"] == 24

    def test_extra_n_values_merged_into_report(self, corpus):
        run_cli("evaluate", "--config", corpus["config"], "--set", "n_values=[2,20]")
        _, payload = read_payload(corpus["output"] / "metrics.json")
        ns = set(payload["metrics"]["p_at_n_micro"])
        assert {"1", "2", "3", "5", "10", "20"} <= ns
        rows = list(csv.reader((corpus["output"] / "metrics.csv").open()))
        assert rows[0] == ["metric", "n", "averaging", "value"]
        assert len(rows) == 1 + 2 * 6

    def test_provenance_block(self, corpus):
        run_cli("evaluate", "--config", corpus["config"])
        _, payload = read_payload(corpus["output"] / "metrics.json")
        prov = payload["provenance"]
        assert set(prov["inputs"]) == {"embeddings", "manifest", "index"}
        assert all(re.fullmatch(r"[0-9a-f]{64}", v) for v in prov["inputs"].values())
        assert re.fullmatch(r"[0-9a-f]{64}", prov["config_hash"])
        assert prov["seed"] == 0


class TestWorkerResolution:
    def test_env_variable_applies_without_flag(self, corpus, monkeypatch):
        monkeypatch.setenv("CBIR_WORKERS", "5")
        run_cli("evaluate", "--config", corpus["config"])
        meta, _ = read_payload(corpus["output"] / "metrics.json")
        assert meta["workers"] == 5

    def test_flag_beats_env_and_config(self, corpus, monkeypatch):
        monkeypatch.setenv("CBIR_WORKERS", "5")
        run_cli(
            "evaluate", "--config", corpus["config"],
            "--set", "workers=3", "--workers", 2,
        )
        meta, _ = read_payload(corpus["output"] / "metrics.json")
        assert meta["workers"] == 2

    def test_config_beats_env(self, corpus, monkeypatch):
        monkeypatch.setenv("CBIR_WORKERS", "5")
        run_cli("evaluate", "--config", corpus["config"], "--set", "workers=3")
        meta, _ = read_payload(corpus["output"] / "metrics.json")
        assert meta["workers"] == 3


class TestProbeCommand:
    def test_report_and_history(self, tight_corpus):
        code = run_cli(
            "probe", "--config", tight_corpus["config"],
            "--set", "knn={\"k_grid\": [1, 3]}",
            "--set", "probe={\"epochs\": 8, \"early_stopping_patience\": 3}",
        )
        assert code == 0
        _, payload = read_payload(tight_corpus["output"] / "probe.json")
        knn = payload["probe"]["knn"]
        assert knn["best_k"] in (1, 3)
        assert knn["f1_micro"] == 1.0
        assert payload["probe"]["linear"]["best_epoch"] >= 1
        history = list(
            csv.reader((tight_corpus["output"] / "probe_history.csv").open())
        )
        assert history[0] == ["epoch", "train_loss", "val_loss"]
        stopped = payload["probe"]["linear"]["stopped_epoch"]
        assert len(history) == 1 + stopped


class TestAblateCommand:
    CONFIG = (
        'ablation={"min_class_size": 25, "queries_per_class": 6, '
        '"n_schedule": [5, 10, 25], "repetitions": 2}'
    )

    def test_matches_library_run(self, corpus):
        code = run_cli(
            "ablate", "--config", corpus["config"], "--set", self.CONFIG
        )
        assert code == 0
        emb = read_embedding_file(corpus["embeddings"])
        train = build_index(
            emb.records(), corpus["entries"], "train", dimension=emb.dimension
        )
        test = build_index(
            emb.records(), corpus["entries"], "test", dimension=emb.dimension
        )
        curve = run_ablation(
            train, test,
            AblationConfig(
                min_class_size=25, queries_per_class=6,
                n_schedule=(5, 10, 25), repetitions=2,
            ),
        )
        rows = list(csv.reader((corpus["output"] / "ablation.csv").open()))
        assert rows[0] == ["n", "seed", "p_at_1"]
        got = [(int(n), int(s), float(p)) for n, s, p in rows[1:]]
        assert got == curve.csv_rows()
        _, payload = read_payload(corpus["output"] / "ablation.json")
        assert payload["ablation"]["eligible_class_ids"] == [0, 1, 2]
        assert payload["ablation"] == curve.as_dict()


class TestEntryPoints:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "cbir", "--help"],
            capture_output=True, text=True, timeout=60,
        )
        assert proc.returncode == 0
        assert "evaluate" in proc.stdout

    def test_console_script(self):
        proc = subprocess.run(
            ["cbir", "query", "--help"], capture_output=True, text=True, timeout=60
        )
        assert proc.returncode == 0
        assert "--record-id" in proc.stdout
