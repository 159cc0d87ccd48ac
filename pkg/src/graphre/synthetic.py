"""Synthetic CrossRE-format data for offline runs and tests.

Each sentence states two relations with a label-specific trigger phrase, so
a model can learn the labels from text alone. Mock support paragraphs are
five templated sentences that embed the original sentence and repeat an
entity.
"""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Optional

from graphre.augment import normalize_text, sentence_hash
from graphre.corpus import LABELS, atomic_write_text

TRIGGERS = {
    "PART-OF": "is part of",
    "PHYSICAL": "is located in",
    "USAGE": "relies on",
    "ROLE": "works for",
    "SOCIAL": "is friends with",
    "GENERAL-AFFILIATION": "is affiliated with",
    "COMPARE": "is compared with",
    "TEMPORAL": "happened during",
    "ARTIFACT": "built",
    "ORIGIN": "comes from",
    "TOPIC": "is about",
    "OPPOSITE": "opposes",
    "CAUSE-EFFECT": "caused",
    "WIN-DEFEAT": "defeated",
    "TYPE-OF": "is a kind of",
    "NAMED": "is also called",
    "RELATED-TO": "is linked to",
}

NAMES = {
    "person": ["Alice Martin", "Bruno", "Chen Wei", "Dana", "Eli Novak", "Farah", "Gus", "Hana Sato"],
    "organisation": ["Acme Corp", "Borealis", "Cobalt Group", "Delta League", "Everfield", "Fjord Union"],
    "location": ["Arden", "Bellport", "Castile", "Dunmore", "East Vale", "Frostholm"],
    "misc": ["Winter Cup", "Iron Treaty", "Blue Festival", "Harvest Act", "Gold Series"],
}


def _entity(rng: random.Random) -> tuple[str, list[str]]:
    etype = rng.choice(sorted(NAMES))
    return etype, rng.choice(NAMES[etype]).split()


def make_record(rng: random.Random, doc_key: str, labels: Optional[list[str]] = None) -> dict:
    """One upstream-format record with two relation clauses."""
    labels = labels or [rng.choice(LABELS), rng.choice(LABELS)]
    tokens: list[str] = []
    ner, relations = [], []
    for k, label in enumerate(labels):
        if k:
            tokens += [",", "while"]
        (ht, head), (tt, tail) = _entity(rng), _entity(rng)
        hs = len(tokens)
        tokens += head
        tokens += TRIGGERS[label].split()
        ts = len(tokens)
        tokens += tail
        h_span, t_span = (hs, hs + len(head) - 1), (ts, ts + len(tail) - 1)
        ner += [[*h_span, ht], [*t_span, tt]]
        relations.append([*h_span, *t_span, label.lower(), "", False, False])
    tokens.append(".")
    return {"doc_key": doc_key, "sentence": tokens, "ner": ner, "relations": relations}


def make_split(n: int, seed: int, domain: str = "news", split: str = "train", all_labels: bool = False) -> list[dict]:
    rng = random.Random(f"{seed}-{domain}-{split}")
    pool = list(LABELS)
    out = []
    for i in range(n):
        labels = None
        if all_labels:
            labels = [pool[(2 * i) % len(pool)], pool[(2 * i + 1) % len(pool)]]
        out.append(make_record(rng, f"{domain}-{split}-{i}", labels))
    return out


def write_upstream(root: Path, domain: str = "news", sizes=(20, 8, 8), seed: int = 0) -> list[Path]:
    """Write ``<domain>-{train,dev,test}.json`` (JSON lines) under ``root``."""
    paths = []
    for split, n in zip(("train", "dev", "test"), sizes):
        records = make_split(n, seed, domain, split)
        path = Path(root) / f"{domain}-{split}.json"
        atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in records))
        paths.append(path)
    return paths


def support_paragraph(sentence: str) -> str:
    """Five-sentence paragraph containing ``sentence`` verbatim (detokenized)."""
    text = normalize_text(sentence).replace(" ,", ",").replace(" .", ".")
    words = [w.strip(",.") for w in text.split()]
    subject = words[0] if words else "It"
    return " ".join(
        [
            f"Reports from the region describe {subject} in detail.",
            text if text.endswith(".") else text + ".",
            f"Observers noted that {subject} drew wide attention.",
            "Several accounts of the events were published afterwards.",
            f"Later commentary returned to {subject} more than once.",
        ]
    )


def mock_fixtures(records: list[dict]) -> dict[str, str]:
    """Canned paragraphs keyed by sentence hash, for :class:`~graphre.augment.MockClient`."""
    out = {}
    for rec in records:
        sentence = " ".join(rec["sentence"])
        out[sentence_hash(sentence)] = support_paragraph(sentence)
    return out


def write_fixtures(path: Path, records: list[dict]) -> Path:
    atomic_write_text(Path(path), json.dumps(mock_fixtures(records), indent=1, sort_keys=True) + "\n")
    return Path(path)
