"""Training, Macro-F1 scoring and the encoder x fusion x domain results grid."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from graphre.corpus import DOMAIN_TITLES, DOMAINS, LABELS, Document, label_counts
from graphre.encode import EncoderConfig
from graphre.gnn import FUSION_METHODS
from graphre.graph import assemble_minidoc
from graphre.model import GraphConfig, build_model, featurize_all, save_checkpoint
from graphre.relclf import DecodePolicy, batch_loss, decode_labels, sigmoid

log = logging.getLogger(__name__)

PairKey = tuple  # (doc key, head, tail)


class NonFiniteLoss(RuntimeError):
    pass


class MissingCell(KeyError):
    def __init__(self, missing: Sequence[tuple]):
        self.missing = list(missing)
        super().__init__(", ".join("/".join(map(str, m)) for m in self.missing))


# --- metrics -----------------------------------------------------------------


def per_label_counts(predictions: Mapping, golds: Mapping, labels: Sequence[str] = LABELS) -> dict[str, tuple[int, int, int]]:
    """``label -> (tp, fp, fn)`` over the union of pair keys."""
    counts = {lab: [0, 0, 0] for lab in labels}
    for key in set(predictions) | set(golds):
        pred = predictions.get(key, ())
        gold = golds.get(key, ())
        for lab in labels:
            p, g = lab in pred, lab in gold
            if p and g:
                counts[lab][0] += 1
            elif p:
                counts[lab][1] += 1
            elif g:
                counts[lab][2] += 1
    return {lab: tuple(c) for lab, c in counts.items()}


def macro_f1(predictions: Mapping, golds: Mapping, labels: Sequence[str] = LABELS) -> float:
    """Unweighted mean of per-label F1, in percent.

    Labels never predicted nor annotated score 0. The mean is computed in
    exact rational arithmetic and rounded once.
    """
    if not labels:
        return 0.0
    total = Fraction(0)
    for tp, fp, fn in per_label_counts(predictions, golds, labels).values():
        if tp:
            total += Fraction(2 * tp, 2 * tp + fp + fn)
    return float(100 * total / len(labels))


def per_label_f1(predictions: Mapping, golds: Mapping, labels: Sequence[str] = LABELS) -> dict[str, dict]:
    out = {}
    for lab, (tp, fp, fn) in per_label_counts(predictions, golds, labels).items():
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        out[lab] = {
            "precision": p,
            "recall": r,
            "f1": 2 * tp / (2 * tp + fp + fn) if tp else 0.0,
            "support": tp + fn,
        }
    return out


def label_distribution_report(documents: Iterable[Document], domain: str) -> Counter:
    """Per-label relation counts for one domain (all splits)."""
    return label_counts(d for d in documents if d.domain == domain)


# --- configuration -----------------------------------------------------------


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    domain: str = "news"
    train_domain: Optional[str] = None  # cross-domain transfer when set
    seed: int = 42
    epochs: int = 10
    lr_encoder: float = 2e-5
    lr_head: float = 1e-3
    batch_size: int = 16
    augmented: bool = True
    threshold: float = 0.5
    multi_label: bool = True
    max_grad_norm: float = 1.0

    @property
    def fusion(self) -> str:
        return self.graph.fusion

    @property
    def cell(self) -> tuple[str, str, str]:
        return (self.encoder.model_name, self.graph.fusion, self.domain)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        graph = GraphConfig(**d.pop("graph", {}))
        return cls(encoder=enc, graph=graph, **d)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# --- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: torch.nn.Module
    tokenizer: object
    metrics: dict
    predictions: list[dict]


def _strip_support(docs: Sequence[Document]) -> list[Document]:
    return [d.with_support(None) for d in docs]


def _batches(items: Sequence, size: int, rng: Optional[random.Random] = None):
    order = list(range(len(items)))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), size):
        yield [items[j] for j in order[i : i + size]]


@torch.no_grad()
def predict(model, features, policy: DecodePolicy, batch_size: int = 16) -> tuple[dict, dict, list[dict]]:
    """Decoded predictions, golds and a per-pair dump for ``features``."""
    model.eval()
    preds, golds, dump = {}, {}, []
    for batch in _batches(features, batch_size):
        for feats, logits in zip(batch, model(batch)):
            probs = sigmoid(logits.double().cpu().numpy())
            for (h, t), p, rel in zip(feats.pairs, probs, feats.doc.relations):
                key = (feats.key, h, t)
                labels = decode_labels(p, policy)
                preds[key] = labels
                golds[key] = rel.labels
                dump.append(
                    {
                        "doc_id": feats.key,
                        "head": h,
                        "tail": t,
                        "labels": sorted(labels, key=LABELS.index),
                        "gold": sorted(rel.labels, key=LABELS.index),
                        "probabilities": [round(float(x), 6) for x in p],
                    }
                )
    return preds, golds, dump


def evaluate(model, features, policy: DecodePolicy, batch_size: int = 16) -> tuple[float, list[dict]]:
    preds, golds, dump = predict(model, features, policy, batch_size)
    return macro_f1(preds, golds), dump


def train(
    cfg: RunConfig,
    splits: Mapping[str, Sequence[Document]],
    out_dir: Optional[Path] = None,
    eval_splits: Optional[Mapping[str, Sequence[Document]]] = None,
) -> TrainResult:
    """Train one cell; select the best-dev epoch; report test Macro-F1.

    ``splits`` needs ``train`` and should have ``dev``/``test``;
    ``eval_splits`` overrides dev/test for cross-domain runs.
    """
    seed_everything(cfg.seed)
    data = {k: list(v) for k, v in splits.items()}
    if eval_splits:
        data.update({k: list(v) for k, v in eval_splits.items()})
    if not cfg.augmented:
        data = {k: _strip_support(v) for k, v in data.items()}
    if not data.get("train"):
        raise ValueError("no training documents")

    texts = [" ".join(s) for d in data["train"] for s in assemble_minidoc(d)]
    tokenizer, model = build_model(cfg.encoder, cfg.graph, texts)
    ml = cfg.encoder.max_length
    feats = {k: featurize_all(v, tokenizer, ml) for k, v in data.items()}
    policy = DecodePolicy(cfg.threshold, cfg.multi_label)

    groups = [{"params": model.head_parameters(), "lr": cfg.lr_head}]
    if cfg.encoder.finetune:
        groups.append({"params": list(model.encoder.parameters()), "lr": cfg.lr_encoder})
    optim = torch.optim.AdamW(groups)
    rng = random.Random(cfg.seed)

    history = []
    best_f1, best_epoch, best_state = -1.0, 0, None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        for batch in _batches(feats["train"], cfg.batch_size, rng):
            logits = torch.cat(model(batch))
            targets = torch.cat([f.targets for f in batch])
            loss = batch_loss(logits, targets, cfg.multi_label)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"loss {loss.item()} at epoch {epoch} on documents {[f.key for f in batch]}"
                )
            optim.zero_grad()
            loss.backward()
            if cfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            optim.step()
            losses.append(loss.item())
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else 0.0}
        if feats.get("dev"):
            record["dev_macro_f1"], _ = evaluate(model, feats["dev"], policy, cfg.batch_size)
            score = record["dev_macro_f1"]
        else:
            score = float(epoch)  # no dev split: keep the last epoch
        if score > best_f1:
            best_f1, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
        history.append(record)
        log.info("epoch %d %s", epoch, record)

    if best_state is not None:
        model.load_state_dict(best_state)
    metrics = {
        "cell": {"encoder": cfg.encoder.model_name, "fusion": cfg.fusion, "domain": cfg.domain},
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "history": history,
        "best_epoch": best_epoch,
        "num_pairs": {k: sum(len(f.pairs) for f in v) for k, v in feats.items()},
    }
    dump: list[dict] = []
    if feats.get("dev"):
        metrics["dev_macro_f1"], _ = evaluate(model, feats["dev"], policy, cfg.batch_size)
    if feats.get("test"):
        metrics["test_macro_f1"], dump = evaluate(model, feats["test"], policy, cfg.batch_size)
    if out_dir is not None:
        write_run(Path(out_dir), model, tokenizer, cfg, metrics, dump)
    return TrainResult(model=model, tokenizer=tokenizer, metrics=metrics, predictions=dump)


def write_run(out_dir: Path, model, tokenizer, cfg: RunConfig, metrics: dict, dump: list[dict]) -> None:
    from graphre.corpus import atomic_write_text

    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_predictions(out_dir / "predictions.test.jsonl", dump)
    save_checkpoint(out_dir / "checkpoint", model, tokenizer, cfg.encoder, cfg.graph)


def write_predictions(path: Path, dump: Sequence[dict]) -> None:
    from graphre.corpus import atomic_write_text

    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in dump))


def cell_dir(root: Path, cell: tuple[str, str, str]) -> Path:
    return Path(root) / cell[0] / cell[1] / cell[2]


# --- results grid ------------------------------------------------------------


def pct_delta(value: float, baseline: float) -> float:
    if baseline == 0:
        return math.nan
    return 100.0 * (value - baseline) / baseline


def arrow(delta: float) -> str:
    if math.isnan(delta) or round(delta, 2) == 0:
        return "-"
    return "↑" if delta > 0 else "↓"


@dataclass
class ResultsTable:
    """Macro-F1 (percent) per (encoder, fusion, domain) with Average and %Δ.

    Repeated cells (e.g. several seeds) are averaged.
    """

    cells: dict = field(default_factory=dict)
    domains: tuple[str, ...] = DOMAINS
    fusions: tuple[str, ...] = FUSION_METHODS

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, str, float]], domains=DOMAINS, fusions=FUSION_METHODS):
        acc = defaultdict(list)
        for enc, fus, dom, val in records:
            acc[(enc, fus, dom)].append(float(val))
        return cls({k: float(np.mean(v)) for k, v in acc.items()}, tuple(domains), tuple(fusions))

    @property
    def encoders(self) -> list[str]:
        seen = []
        for enc, _, _ in self.cells:
            if enc not in seen:
                seen.append(enc)
        return seen

    def missing(self) -> list[tuple[str, str, str]]:
        return [
            (e, f, d)
            for e in self.encoders
            for f in self.fusions
            for d in self.domains
            if (e, f, d) not in self.cells
        ]

    def check_complete(self) -> None:
        gaps = self.missing()
        if gaps:
            raise MissingCell(gaps)

    def average(self, encoder: str, fusion: str) -> float:
        return float(np.mean([self.cells[(encoder, fusion, d)] for d in self.domains]))

    def delta(self, encoder: str, fusion: str) -> float:
        return pct_delta(self.average(encoder, fusion), self.average(encoder, "none"))

    def rows(self) -> list[dict]:
        self.check_complete()
        out = []
        for enc in self.encoders:
            for fus in self.fusions:
                out.append(
                    {
                        "encoder": enc,
                        "fusion": fus,
                        "scores": {d: self.cells[(enc, fus, d)] for d in self.domains},
                        "average": self.average(enc, fus),
                        "delta": self.delta(enc, fus) if "none" in self.fusions else math.nan,
                    }
                )
        return out

    def _cells_text(self, row: dict) -> list[str]:
        delta = row["delta"]
        dtxt = "nan" if math.isnan(delta) else f"{delta:+.2f}"
        if not math.isnan(delta) and round(delta, 2) == 0:
            dtxt = "0.00"
        return [
            row["encoder"],
            row["fusion"].capitalize() if row["fusion"] == "none" else row["fusion"],
            *[f"{row['scores'][d]:.2f}" for d in self.domains],
            f"{row['average']:.2f}",
            dtxt,
        ]

    def header(self) -> list[str]:
        return ["Base Model", "GNN Improvement", *[DOMAIN_TITLES.get(d, d) for d in self.domains], "Average", "%Δ"]

    def to_tsv(self) -> str:
        lines = ["\t".join(self.header())]
        lines += ["\t".join(self._cells_text(r)) for r in self.rows()]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        rows = self.rows()
        body = [self._cells_text(r) + [arrow(r["delta"])] for r in rows]
        head = self.header() + [""]
        widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
        lines = []
        prev = None
        for i, cells in enumerate([head, *body]):
            if i > 0 and cells[0] != prev:
                lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
            if i > 0 and cells[0] == prev:
                cells = [""] + cells[1:]
            else:
                prev = cells[0] if i > 0 else None
            lines.append(
                "  ".join(c.ljust(w) if j < 2 else c.rjust(w) for j, (c, w) in enumerate(zip(cells, widths))).rstrip()
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        rows = self.rows()
        for r in rows:
            if math.isnan(r["delta"]):
                r["delta"] = None
        return json.dumps({"domains": list(self.domains), "rows": rows}, indent=2) + "\n"


def read_metric_records(root: Path, split: str = "test") -> list[tuple[str, str, str, float]]:
    """Collect ``(encoder, fusion, domain, macro_f1)`` from every ``metrics.json`` under ``root``."""
    records = []
    for path in sorted(Path(root).rglob("metrics.json")):
        m = json.loads(path.read_text())
        if f"{split}_macro_f1" not in m:
            continue
        c = m["cell"]
        records.append((c["encoder"], c["fusion"], c["domain"], m[f"{split}_macro_f1"]))
    return records


def run_matrix(
    configs: Sequence[RunConfig],
    load_splits: Callable[[str], Mapping[str, Sequence[Document]]],
    out_root: Optional[Path] = None,
    domains: Sequence[str] = DOMAINS,
    fusions: Sequence[str] = FUSION_METHODS,
) -> ResultsTable:
    """Train every config and assemble the grid; raises :class:`MissingCell` if incomplete."""
    cells_seen = set((c.encoder.model_name, f, d) for c in configs for f in fusions for d in domains)
    have = {c.cell for c in configs}
    gaps = sorted(cells_seen - have)
    if gaps:
        raise MissingCell(gaps)
    records = []
    for cfg in configs:
        splits = load_splits(cfg.train_domain or cfg.domain)
        eval_splits = None
        if cfg.train_domain and cfg.train_domain != cfg.domain:
            target = load_splits(cfg.domain)
            eval_splits = {k: v for k, v in target.items() if k in ("dev", "test")}
        out = cell_dir(out_root, cfg.cell) if out_root is not None else None
        if out is not None and cfg.seed is not None:
            out = out / f"seed{cfg.seed}"
        result = train(cfg, splits, out, eval_splits)
        records.append((*cfg.cell, result.metrics.get("test_macro_f1", 0.0)))
    table = ResultsTable.from_records(records, domains, fusions)
    table.check_complete()
    return table
