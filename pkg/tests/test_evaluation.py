import json
import math
import random
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from sklearn.metrics import f1_score
from sklearn.preprocessing import MultiLabelBinarizer

from graphre import evaluation
from graphre.augment import SupportDocument
from graphre.corpus import LABELS, parse_upstream_record
from graphre.evaluation import (
    MissingCell,
    NonFiniteLoss,
    ResultsTable,
    RunConfig,
    arrow,
    macro_f1,
    per_label_f1,
    read_metric_records,
    run_matrix,
    train,
)
from graphre.synthetic import make_split, support_paragraph

from conftest import tiny_run_config

# Table 2 rows for bert-base-cased, domains in News..AI order.
BERT_ROWS = {
    "none": (14.09, 21.90, 24.24, 40.43, 36.54, 30.94),
    "mean": (23.66, 20.70, 24.35, 39.15, 40.64, 29.84),
    "max": (23.73, 18.83, 23.93, 37.54, 36.20, 29.38),
    "tanh": (26.91, 19.65, 25.89, 39.21, 33.76, 33.93),
    "times": (6.29, 19.83, 14.41, 34.45, 30.21, 25.56),
}
DOMAIN_ORDER = ("news", "politics", "science", "music", "literature", "ai")


def bert_table(rows=BERT_ROWS):
    records = [("bert-base-cased", f, d, v) for f, vals in rows.items() for d, v in zip(DOMAIN_ORDER, vals)]
    return ResultsTable.from_records(records)


def oracle_macro_f1(preds, golds, labels):
    """Per-label confusion counts by direct enumeration, F1 = 2PR/(P+R)."""
    keys = sorted(set(preds) | set(golds), key=repr)
    total = Fraction(0)
    for lab in labels:
        tp = sum(1 for k in keys if lab in preds.get(k, ()) and lab in golds.get(k, ()))
        fp = sum(1 for k in keys if lab in preds.get(k, ()) and lab not in golds.get(k, ()))
        fn = sum(1 for k in keys if lab not in preds.get(k, ()) and lab in golds.get(k, ()))
        if tp == 0:
            continue
        p, r = Fraction(tp, tp + fp), Fraction(tp, tp + fn)
        total += 2 * p * r / (p + r)
    return float(100 * total / len(labels))


# --- macro F1 ------------------------------------------------------------------


def test_macro_f1_perfect_and_wrong():
    golds = {(0, i, i + 1): {lab} for i, lab in enumerate(LABELS)}
    assert macro_f1(golds, golds) == 100.0
    wrong = {k: {LABELS[(LABELS.index(next(iter(v))) + 1) % 17]} for k, v in golds.items()}
    assert macro_f1(wrong, golds) == 0.0


def test_macro_f1_one_hit_one_miss():
    golds = {("d", 0, 1): {"ROLE"}, ("d", 1, 2): {"USAGE"}}
    preds = {("d", 0, 1): {"ROLE"}, ("d", 1, 2): set()}
    assert macro_f1(preds, golds, labels=("ROLE", "USAGE")) == 50.0
    # over all 17 labels the zero-support ones count as 0
    assert math.isclose(macro_f1(preds, golds), 100 / 17)


def test_per_label_report():
    golds = {1: {"ROLE"}, 2: {"ROLE"}}
    preds = {1: {"ROLE"}, 2: {"USAGE"}}
    rep = per_label_f1(preds, golds)
    assert rep["ROLE"] == {"precision": 1.0, "recall": 0.5, "f1": 2 / 3, "support": 2}
    assert rep["USAGE"]["f1"] == 0.0


@st.composite
def pred_gold_sets(draw):
    labels = tuple(LABELS[: draw(st.integers(1, 5))])
    n = draw(st.integers(0, 50))
    label_sets = st.sets(st.sampled_from(labels), max_size=len(labels))
    golds = {("d", i, i + 1): draw(label_sets) for i in range(n)}
    preds = {k: draw(label_sets) for k in golds}
    return preds, golds, labels


@settings(max_examples=300, deadline=None)
@given(pred_gold_sets())
def test_macro_f1_matches_oracle(case):
    preds, golds, labels = case
    assert macro_f1(preds, golds, labels) == oracle_macro_f1(preds, golds, labels)


@settings(max_examples=100, deadline=None)
@given(pred_gold_sets(), st.randoms(use_true_random=False))
def test_macro_f1_ignores_pair_order(case, rnd):
    preds, golds, labels = case
    keys = list(golds)
    rnd.shuffle(keys)
    assert macro_f1({k: preds[k] for k in keys}, {k: golds[k] for k in keys}, labels) == macro_f1(preds, golds, labels)


@settings(max_examples=100, deadline=None)
@given(pred_gold_sets())
def test_macro_f1_agrees_with_sklearn(case):
    preds, golds, labels = case
    if not golds:
        return
    keys = list(golds)
    mlb = MultiLabelBinarizer(classes=list(labels))
    y_true = mlb.fit_transform([golds[k] for k in keys])
    y_pred = mlb.transform([preds[k] for k in keys])
    per_label = np.array(
        [f1_score(y_true[:, j], y_pred[:, j], labels=[1], average=None, zero_division=0)[0] for j in range(len(labels))]
    )
    # labels absent from both sides score 0 here, whatever sklearn's convention
    per_label[(y_true.sum(0) + y_pred.sum(0)) == 0] = 0.0
    ref = 100 * per_label.mean()
    assert math.isclose(macro_f1(preds, golds, labels), ref, rel_tol=1e-9, abs_tol=1e-9)


# --- results table ---------------------------------------------------------------


def test_average_of_six():
    t = bert_table()
    assert round(t.average("bert-base-cased", "none"), 2) == 28.02
    assert round(t.average("bert-base-cased", "tanh"), 2) == 29.89


def test_delta_from_unrounded_averages():
    t = bert_table()
    assert f"{t.delta('bert-base-cased', 'tanh'):+.2f}" == "+6.67"
    assert f"{t.delta('bert-base-cased', 'times'):+.2f}" == "-22.24"
    # these two recompute one hundredth below the printed +6.08 / +0.88
    assert f"{t.delta('bert-base-cased', 'mean'):+.2f}" == "+6.07"
    assert f"{t.delta('bert-base-cased', 'max'):+.2f}" == "+0.87"


def test_zero_delta_row():
    rows = dict(BERT_ROWS, max=BERT_ROWS["none"])
    t = bert_table(rows)
    assert t.delta("bert-base-cased", "max") == 0.0
    line = [r for r in t.to_tsv().splitlines() if r.split("\t")[1] == "max"][0]
    assert line.endswith("\t28.02\t0.00")
    assert arrow(0.0) == "-"


def test_arrows_follow_sign():
    t = bert_table()
    for row in t.rows():
        if row["fusion"] == "none":
            continue
        assert arrow(row["delta"]) == ("↑" if row["delta"] > 0 else "↓")


def test_table_outputs_have_table_shape():
    t = bert_table()
    tsv = t.to_tsv().splitlines()
    assert tsv[0].split("\t") == [
        "Base Model", "GNN Improvement", "News", "Politics", "Science", "Music", "Literature", "AI", "Average", "%Δ",
    ]
    assert len(tsv) == 6
    assert tsv[1].split("\t")[1:] == ["None", "14.09", "21.90", "24.24", "40.43", "36.54", "30.94", "28.02", "0.00"]
    assert tsv[4].split("\t")[-2:] == ["29.89", "+6.67"]
    text = t.to_text()
    assert "+6.67" in text and "↑" in text and "↓" in text
    payload = json.loads(t.to_json())
    assert [r["fusion"] for r in payload["rows"]] == ["none", "mean", "max", "tanh", "times"]


def test_incomplete_grid():
    rows = dict(BERT_ROWS)
    t = bert_table(rows)
    del t.cells[("bert-base-cased", "max", "music")]
    with pytest.raises(MissingCell) as err:
        t.to_tsv()
    assert err.value.missing == [("bert-base-cased", "max", "music")]


def test_repeated_cells_are_averaged():
    t = ResultsTable.from_records([("e", "none", "news", 10.0), ("e", "none", "news", 20.0)], ["news"], ["none"])
    assert t.cells[("e", "none", "news")] == 15.0


def test_run_matrix_requires_full_grid():
    with pytest.raises(MissingCell):
        run_matrix([tiny_run_config(fusion="none")], lambda d: {}, domains=["news"], fusions=["none", "tanh"])


# --- training --------------------------------------------------------------------


def test_run_config_roundtrip():
    cfg = tiny_run_config(fusion="tanh")
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.cell == ("tiny", "tanh", "news")


@pytest.mark.parametrize("fusion", ["none", "tanh"])
def test_training_is_deterministic(synthetic_news, fusion):
    splits = synthetic_news(sizes=(16, 6, 6))
    a = train(tiny_run_config(fusion=fusion, epochs=2), splits).metrics
    b = train(tiny_run_config(fusion=fusion, epochs=2), splits).metrics
    assert a["history"] == b["history"]
    assert a["test_macro_f1"] == b["test_macro_f1"]


def test_one_epoch_on_news_sized_train(synthetic_news, tmp_path):
    splits = synthetic_news(sizes=(164, 20, 20))
    res = train(tiny_run_config(epochs=1, fusion="mean"), splits, out_dir=tmp_path)
    m = res.metrics
    assert m["num_pairs"]["train"] == 2 * 164
    assert len(m["history"]) == 1 and math.isfinite(m["history"][0]["train_loss"])
    assert 0.0 <= m["test_macro_f1"] <= 100.0
    assert {p.name for p in tmp_path.iterdir()} == {"metrics.json", "predictions.test.jsonl", "checkpoint"}
    rows = [json.loads(x) for x in (tmp_path / "predictions.test.jsonl").read_text().splitlines()]
    assert len(rows) == 40 and len(rows[0]["probabilities"]) == 17
    assert read_metric_records(tmp_path) == [("tiny", "mean", "news", m["test_macro_f1"])]


@pytest.mark.parametrize("fusion", ["none", "tanh"])
def test_overfits_ten_sentences(fusion):
    docs = [parse_upstream_record(r, "news", "train") for r in make_split(10, 3, "news", "train", all_labels=True)]
    assert {lab for d in docs for r in d.relations for lab in r.labels} == set(LABELS)
    cfg = tiny_run_config(fusion=fusion, epochs=25, batch_size=2)
    res = train(cfg, {"train": docs, "dev": docs, "test": docs})
    assert res.metrics["test_macro_f1"] >= 90.0


def test_training_uses_support_when_augmented(synthetic_news):
    splits = synthetic_news(sizes=(6, 3, 3))
    augmented = {
        k: [d.with_support(SupportDocument.from_text(support_paragraph(d.sentence), "mock")) for d in v]
        for k, v in splits.items()
    }
    with_sup = train(tiny_run_config(fusion="tanh", epochs=1), augmented).metrics
    without = train(tiny_run_config(fusion="tanh", epochs=1, augmented=False), augmented).metrics
    plain = train(tiny_run_config(fusion="tanh", epochs=1), splits).metrics
    assert without["history"] == plain["history"]
    assert with_sup["history"] != plain["history"]


def test_non_finite_loss_aborts(synthetic_news, monkeypatch):
    def broken(logits, targets, multi_label=True):
        return (logits * float("nan")).sum()

    monkeypatch.setattr(evaluation, "batch_loss", broken)
    with pytest.raises(NonFiniteLoss, match="epoch 1"):
        train(tiny_run_config(epochs=1), synthetic_news(sizes=(4, 2, 2)))


def test_seeded_shuffle_differs_by_seed(synthetic_news):
    splits = synthetic_news(sizes=(12, 4, 4))
    a = train(tiny_run_config(epochs=1, seed=1), splits).metrics["history"]
    b = train(tiny_run_config(epochs=1, seed=2), splits).metrics["history"]
    assert a != b


def test_random_state_is_reset_per_run():
    evaluation.seed_everything(5)
    x = (random.random(), np.random.rand(), torch.rand(1).item())
    evaluation.seed_everything(5)
    assert x == (random.random(), np.random.rand(), torch.rand(1).item())


def test_run_matrix_is_deterministic(synthetic_news, tmp_path):
    splits = synthetic_news(sizes=(8, 4, 4))
    configs = [tiny_run_config(fusion=f, epochs=1) for f in ("none", "tanh")]

    def grid(out):
        return run_matrix(configs, lambda d: splits, out, domains=["news"], fusions=["none", "tanh"])

    a, b = grid(tmp_path / "a"), grid(tmp_path / "b")
    assert a.to_tsv() == b.to_tsv()
    assert len(a.to_tsv().splitlines()) == 3
    assert sorted(read_metric_records(tmp_path / "a")) == sorted(read_metric_records(tmp_path / "b"))
