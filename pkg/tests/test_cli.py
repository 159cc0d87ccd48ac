import json
import re

import pytest

from graphre import evaluation, gnn
from graphre.cli import main

from conftest import MILLER_RECORD


def run(config, *argv):
    return main([argv[0], "--config", str(config), *argv[1:]])


def client_calls(out: str) -> int:
    return int(re.search(r"client calls: (\d+)", out).group(1))


def test_ingest_prints_stats(workspace, capsys):
    assert run(workspace, "ingest") == 0
    out = capsys.readouterr().out
    assert re.search(r"News\s+20\s+8\s+8\s+72", out)
    work = workspace.parent / "work" / "corpus"
    assert sorted(p.name for p in work.glob("*.jsonl")) == ["news-dev.jsonl", "news-test.jsonl", "news-train.jsonl"]
    assert (work / "stats.tsv").read_text().splitlines()[1] == "News\t20\t8\t8\t72"
    meta = json.loads((work / "ingest.meta.json").read_text())
    assert meta["command"] == "ingest" and meta["seed"] == 7 and "code_version" in meta


def test_ingest_empty_file(tmp_path, capsys):
    empty = tmp_path / "news-train.json"
    empty.write_text("")
    assert main(["ingest", str(empty), "--domain", "news", "--out", str(tmp_path / "out")]) == 0
    assert re.search(r"News\s+0\s+0\s+0\s+0", capsys.readouterr().out)
    assert (tmp_path / "out" / "news-train.jsonl").read_text() == ""


def test_ingest_dangling_reference(tmp_path, capsys):
    bad = tmp_path / "ai-train.jsonl"
    bad.write_text(json.dumps(dict(MILLER_RECORD, relations=[[0, 7, ["ROLE"]]])) + "\n")
    code = main(["ingest", str(bad), "--domain", "ai", "--format", "canonical", "--out", str(tmp_path / "out")])
    assert code == 2
    err = capsys.readouterr().err
    assert "DanglingEntityRef" in err
    assert main(["ingest", str(bad), "--domain", "ai", "--format", "canonical", "--lenient", "--out", str(tmp_path / "o2")]) == 0


def test_ingest_missing_file(tmp_path):
    assert main(["ingest", str(tmp_path / "nope.json"), "--domain", "news", "--out", str(tmp_path)]) == 3


def test_ingest_missing_raw_dir(tmp_path):
    assert main(["ingest", "--crossre-dir", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 3


def test_augment_rerun_is_all_cache_hits(workspace, capsys):
    run(workspace, "ingest")
    capsys.readouterr()
    assert run(workspace, "augment") == 0
    assert client_calls(capsys.readouterr().out) == 36
    first = {p.name: p.read_bytes() for p in (workspace.parent / "work" / "augmented").glob("*.jsonl")}
    assert run(workspace, "augment") == 0
    out = capsys.readouterr().out
    assert client_calls(out) == 0 and '"cached": 36' in out
    second = {p.name: p.read_bytes() for p in (workspace.parent / "work" / "augmented").glob("*.jsonl")}
    assert first == second
    record = json.loads(first["news-train.jsonl"].splitlines()[0])
    assert record["support"].count(".") >= 4
    meta = json.loads((workspace.parent / "work" / "augmented" / "augment.meta.json").read_text())
    assert meta["generation"] == {"model": "gpt-3.5-turbo", "temperature": None, "system_prompt": None}


def test_augment_partial_cache(workspace, capsys):
    run(workspace, "ingest")
    run(workspace, "augment")
    capsys.readouterr()
    cache = sorted((workspace.parent / "work" / "cache").glob("*.json"))
    for p in cache[:5]:
        p.unlink()
    assert run(workspace, "augment") == 0
    assert client_calls(capsys.readouterr().out) == 5


def test_augment_needs_credential_online(workspace, monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    run(workspace, "ingest")
    assert run(workspace, "augment", "--set", "augment.offline=false") == 4


def test_augment_without_fallback_exits_4(workspace, tmp_path):
    run(workspace, "ingest")
    empty = tmp_path / "nothing.json"
    empty.write_text("{}")
    assert run(workspace, "augment", "--fixtures", str(empty), "--no-fallback") == 4


def test_augment_without_corpus(workspace):
    assert run(workspace, "augment") == 5


def test_build_graphs(workspace, capsys):
    run(workspace, "ingest")
    assert run(workspace, "build-graphs") == 0
    rows = (workspace.parent / "work" / "graphs" / "graphs.tsv").read_text().splitlines()
    assert rows[0] == "doc_id\tnodes\tedges\tentities" and len(rows) == 37


def test_flags_override_config(workspace, capsys):
    run(workspace, "ingest")
    assert run(workspace, "train", "--fusion", "none", "--set", "training.seed=3", "--seed", "11") == 0
    meta = json.loads((workspace.parent / "work" / "runs" / "train.meta.json").read_text())
    assert meta["config"]["training"]["seed"] == 11
    assert meta["config"]["training"]["fusions"] == ["none"]


def test_train_eval_report(workspace, capsys, monkeypatch):
    root = workspace.parent
    run(workspace, "ingest")
    run(workspace, "augment")
    assert run(workspace, "train") == 0
    out = capsys.readouterr().out
    assert "tiny/none/news" in out and "tiny/tanh/news" in out
    meta = json.loads((root / "work" / "runs" / "train.meta.json").read_text())
    assert meta["corpus"].endswith("augmented")

    # fusion=none never touches the graph stage
    def boom(*a, **k):
        raise AssertionError("graph stage used")

    monkeypatch.setattr(gnn, "gcn_layer", boom)
    monkeypatch.setattr(gnn, "gat_aggregate", boom)
    cell = root / "work" / "runs" / "tiny" / "none" / "news"
    assert run(workspace, "eval", "--run", str(cell)) == 0
    ev = json.loads((cell / "eval.test.json").read_text())
    metrics = json.loads((cell / "metrics.json").read_text())
    assert ev["test_macro_f1"] == metrics["test_macro_f1"]
    with pytest.raises(AssertionError, match="graph stage used"):
        run(workspace, "eval", "--run", str(root / "work" / "runs" / "tiny" / "tanh" / "news"))
    monkeypatch.undo()

    capsys.readouterr()
    assert run(workspace, "report") == 0
    text = capsys.readouterr().out
    assert "Base Model" in text and "%Δ" in text
    reports = root / "work" / "reports"
    assert {"results.txt", "results.tsv", "results.json", "results.png", "report.meta.json"} <= {
        p.name for p in reports.iterdir()
    }
    tsv = (reports / "results.tsv").read_text().splitlines()
    assert [r.split("\t")[1] for r in tsv[1:]] == ["None", "tanh"]


def test_eval_reproduces_training_predictions(workspace, capsys):
    run(workspace, "ingest")
    run(workspace, "train", "--fusion", "tanh")
    cell = workspace.parent / "work" / "runs" / "tiny" / "tanh" / "news"
    before = (cell / "predictions.test.jsonl").read_bytes()
    assert run(workspace, "eval", "--run", str(cell)) == 0
    assert (cell / "predictions.test.jsonl").read_bytes() == before


def test_eval_missing_run(workspace, tmp_path):
    assert run(workspace, "eval", "--run", str(tmp_path / "nowhere")) == 5


def test_train_non_finite_loss(workspace, monkeypatch):
    run(workspace, "ingest")
    monkeypatch.setattr(evaluation, "batch_loss", lambda logits, targets, multi_label=True: (logits * float("nan")).sum())
    assert run(workspace, "train", "--fusion", "none") == 6


def test_train_without_corpus(workspace):
    assert run(workspace, "train") == 5


def test_report_incomplete_grid(tmp_path, capsys):
    cells = tmp_path / "cells.tsv"
    cells.write_text("encoder\tfusion\tdomain\tmacro_f1\nbert-base-cased\tnone\tnews\t14.09\nbert-base-cased\ttanh\tnews\t26.91\n")
    code = main(["report", "--cells", str(cells), "--out", str(tmp_path / "rep"), "--domains", "news,politics", "--fusions", "none,tanh"])
    assert code == 5
    err = capsys.readouterr().err
    assert "bert-base-cased/none/politics" in err and "bert-base-cased/tanh/politics" in err


def test_report_no_runs(tmp_path):
    assert main(["report", "--runs", str(tmp_path / "none"), "--out", str(tmp_path / "rep")]) == 5


def test_bad_config_path(tmp_path):
    assert main(["report", "--config", str(tmp_path / "missing.yaml")]) == 3


def test_bad_override_is_rejected(tmp_path):
    assert main(["report", "--set", "no-equals-sign", "--out", str(tmp_path)]) == 3


@pytest.mark.parametrize("argv", [[], ["frobnicate"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2
