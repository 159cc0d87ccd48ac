"""Annotated-sentence data model, CrossRE ingest and corpus statistics.

Canonical on-disk format is JSON lines, one document per line::

    {"doc_id": "news-train-0", "domain": "news", "split": "train",
     "tokens": ["Miller", "directed", ...],
     "entities": [[0, 0, "researcher"], ...],
     "relations": [[0, 1, ["ROLE"], "", false, false], ...],
     "support": "optional paragraph text"}

Entity spans are inclusive token indices. Relation endpoints are entity
ordinals (positions in ``entities``).
"""

from __future__ import annotations

import json
import os
import tempfile
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping, Optional, Sequence

if TYPE_CHECKING:
    from graphre.augment import SupportDocument

LABELS: tuple[str, ...] = (
    "PART-OF",
    "PHYSICAL",
    "USAGE",
    "ROLE",
    "SOCIAL",
    "GENERAL-AFFILIATION",
    "COMPARE",
    "TEMPORAL",
    "ARTIFACT",
    "ORIGIN",
    "TOPIC",
    "OPPOSITE",
    "CAUSE-EFFECT",
    "WIN-DEFEAT",
    "TYPE-OF",
    "NAMED",
    "RELATED-TO",
)
RELATED_TO = "RELATED-TO"
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
NUM_LABELS = len(LABELS)

DOMAINS: tuple[str, ...] = ("news", "politics", "science", "music", "literature", "ai")
DOMAIN_TITLES = {
    "news": "News",
    "politics": "Politics",
    "science": "Science",
    "music": "Music",
    "literature": "Literature",
    "ai": "AI",
}
SPLITS: tuple[str, ...] = ("train", "dev", "test")

_COARSE = {"person", "location", "organization", "organisation", "misc"}

# Coarse types per domain, extended with the fine-grained CrossNER labels
# that the released annotations use (e.g. "researcher", "product").
ENTITY_TYPES: dict[str, frozenset[str]] = {
    "news": frozenset(_COARSE),
    "politics": frozenset(
        _COARSE | {"politician", "politicalparty", "election", "event", "country"}
    ),
    "science": frozenset(
        _COARSE
        | {
            "chemical", "enzyme", "protein", "dna", "rna", "cell_type", "cell_line",
            "scientist", "university", "country", "discipline", "chemicalelement",
            "chemicalcompound", "astronomicalobject", "academicjournal", "event",
            "theory", "award",
        }
    ),
    "music": frozenset(
        _COARSE
        | {
            "instrument", "genre", "album", "track", "musicgenre", "song", "band",
            "musicalartist", "musicalinstrument", "award", "event", "country",
        }
    ),
    "literature": frozenset(
        _COARSE
        | {
            "character", "award", "book", "writer", "poem", "event", "magazine",
            "literarygenre", "country",
        }
    ),
    "ai": frozenset(
        _COARSE
        | {
            "algorithm", "model", "task", "method", "conference", "paper", "field",
            "product", "researcher", "metrics", "university", "country", "programlang",
        }
    ),
}


class CorpusError(ValueError):
    pass


class SpanOutOfRange(CorpusError):
    pass


class UnknownLabel(CorpusError):
    pass


class DanglingEntityRef(CorpusError):
    pass


class UnknownDomain(CorpusError):
    pass


def normalize_label(raw: str) -> str:
    """Map upstream spellings (``part-of``, ``Part_Of``) onto ``LABELS``."""
    name = raw.strip().upper().replace("_", "-").replace(" ", "-")
    if name not in LABEL_INDEX:
        raise UnknownLabel(f"unknown relation label {raw!r}")
    return name


def normalize_domain(raw: str) -> str:
    name = raw.strip().lower()
    aliases = {
        "artificial intelligence": "ai",
        "natural science": "science",
        "natural sciences": "science",
    }
    name = aliases.get(name, name)
    if name not in DOMAINS:
        raise UnknownDomain(f"unknown domain {raw!r}")
    return name


@dataclass(frozen=True)
class EntitySpan:
    start: int
    end: int
    entity_type: str
    entity_id: int


@dataclass(frozen=True)
class RelationInstance:
    head: int
    tail: int
    labels: frozenset[str]
    explanation: str = ""
    syntax_ambiguity: bool = False
    uncertain: bool = False


@dataclass(frozen=True)
class Document:
    domain: str
    tokens: tuple[str, ...]
    entities: tuple[EntitySpan, ...] = ()
    relations: tuple[RelationInstance, ...] = ()
    support: Optional["SupportDocument"] = None
    doc_id: str = ""
    split: Optional[str] = None

    @property
    def sentence(self) -> str:
        return " ".join(self.tokens)

    def entity_words(self, entity_id: int) -> tuple[str, ...]:
        ent = self.entities[entity_id]
        return self.tokens[ent.start : ent.end + 1]

    def with_support(self, support: Optional["SupportDocument"]) -> "Document":
        return replace(self, support=support)


@dataclass
class DomainStats:
    train: int = 0
    dev: int = 0
    test: int = 0
    relations: int = 0

    def add(self, split: str, n_relations: int) -> None:
        if split not in SPLITS:
            raise CorpusError(f"unknown split {split!r}")
        setattr(self, split, getattr(self, split) + 1)
        self.relations += n_relations


@dataclass(frozen=True)
class Violation:
    kind: str
    doc_id: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.doc_id}: {self.detail}"


# --- parsing -----------------------------------------------------------------


def _flag(value) -> bool:
    # Table cells use "-" for absent and "X" for present.
    if isinstance(value, str):
        return value.strip().lower() not in ("", "-", "false", "0", "no")
    return bool(value)


def parse_document(raw: Mapping, domain: Optional[str] = None) -> Document:
    """Build a validated :class:`Document` from a canonical record."""
    from graphre.augment import SupportDocument

    dom = normalize_domain(domain or raw["domain"])
    tokens = tuple(str(t) for t in raw["tokens"])
    n = len(tokens)
    entities = []
    for i, item in enumerate(raw.get("entities") or ()):
        start, end, etype = int(item[0]), int(item[1]), str(item[2])
        if not 0 <= start <= end < n:
            raise SpanOutOfRange(f"entity {i} span [{start}, {end}] outside {n} tokens")
        entities.append(EntitySpan(start, end, etype, i))
    relations = []
    for item in raw.get("relations") or ():
        head, tail = int(item[0]), int(item[1])
        for ref in (head, tail):
            if not 0 <= ref < len(entities):
                raise DanglingEntityRef(
                    f"relation references entity {ref} of {len(entities)}"
                )
        labels = item[2]
        if isinstance(labels, str):
            labels = [labels]
        relations.append(
            RelationInstance(
                head=head,
                tail=tail,
                labels=frozenset(normalize_label(lab) for lab in labels),
                explanation=str(item[3]) if len(item) > 3 and item[3] not in (None, "-") else "",
                syntax_ambiguity=_flag(item[4]) if len(item) > 4 else False,
                uncertain=_flag(item[5]) if len(item) > 5 else False,
            )
        )
    text = raw.get("support")
    support = SupportDocument.from_text(text, source="cached") if text else None
    return Document(
        domain=dom,
        tokens=tokens,
        entities=tuple(entities),
        relations=tuple(relations),
        support=support,
        doc_id=str(raw.get("doc_id", "")),
        split=raw.get("split"),
    )


def serialize_document(doc: Document) -> dict:
    rec = {
        "doc_id": doc.doc_id,
        "domain": doc.domain,
        "split": doc.split,
        "tokens": list(doc.tokens),
        "entities": [[e.start, e.end, e.entity_type] for e in doc.entities],
        "relations": [
            [
                r.head,
                r.tail,
                sorted(r.labels, key=LABEL_INDEX.__getitem__),
                r.explanation,
                r.syntax_ambiguity,
                r.uncertain,
            ]
            for r in doc.relations
        ],
    }
    if doc.support is not None:
        rec["support"] = doc.support.text
    return rec


def parse_upstream_record(raw: Mapping, domain: str, split: Optional[str] = None) -> Document:
    """Adapter for the CrossRE release layout.

    Upstream lines look like ``{"doc_key", "sentence", "ner", "relations"}``
    where ``ner`` holds ``[start, end, type]`` and each relation is
    ``[h_start, h_end, t_start, t_end, label, exp, sa, un]``. Relations are
    keyed by span, so endpoints are resolved to entity ordinals here, and
    repeated (head, tail) rows are merged into one multi-label instance.
    """
    tokens = raw.get("sentence", raw.get("tokens"))
    if tokens is None:
        raise CorpusError("upstream record has no 'sentence' field")
    ner = raw.get("ner") or []
    span_to_id: dict[tuple[int, int], int] = {}
    entities = []
    for item in ner:
        span = (int(item[0]), int(item[1]))
        if span in span_to_id:
            continue
        span_to_id[span] = len(entities)
        entities.append([span[0], span[1], str(item[2])])

    merged: dict[tuple[int, int], list] = {}
    for item in raw.get("relations") or []:
        if len(item) >= 5 and all(isinstance(v, int) and not isinstance(v, bool) for v in item[:4]):
            head_span, tail_span = (int(item[0]), int(item[1])), (int(item[2]), int(item[3]))
            rest = list(item[4:])
            try:
                head, tail = span_to_id[head_span], span_to_id[tail_span]
            except KeyError as exc:
                raise DanglingEntityRef(f"relation endpoint {exc.args[0]} is not an entity span") from None
        else:
            head, tail = int(item[0]), int(item[1])
            rest = list(item[2:])
        rest += [""] * (4 - len(rest))
        label, exp, sa, un = rest[:4]
        key = (head, tail)
        if key not in merged:
            merged[key] = [head, tail, [], exp or "", _flag(sa), _flag(un)]
        entry = merged[key]
        for lab in label if isinstance(label, list) else [label]:
            if lab not in entry[2]:
                entry[2].append(lab)
        entry[3] = entry[3] or (exp or "")
        entry[4] = entry[4] or _flag(sa)
        entry[5] = entry[5] or _flag(un)

    record = {
        "doc_id": raw.get("doc_key", raw.get("doc_id", "")),
        "domain": domain,
        "split": split,
        "tokens": tokens,
        "entities": entities,
        "relations": list(merged.values()),
    }
    for key in ("support", "support_text", "context"):
        if raw.get(key):
            record["support"] = raw[key]
            break
    return parse_document(record, domain)


# --- files -------------------------------------------------------------------


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def iter_jsonl(path: Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc


def read_corpus(path: Path) -> list[Document]:
    return [parse_document(rec) for rec in iter_jsonl(path)]


def read_upstream(path: Path, domain: str, split: Optional[str] = None) -> list[Document]:
    docs = []
    for i, rec in enumerate(iter_jsonl(path)):
        doc = parse_upstream_record(rec, domain, split)
        if not doc.doc_id:
            doc = replace(doc, doc_id=f"{domain}-{split or 'x'}-{i}")
        docs.append(doc)
    return docs


def write_corpus(path: Path, docs: Iterable[Document]) -> None:
    lines = [json.dumps(serialize_document(d), ensure_ascii=False) for d in docs]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def corpus_file(corpus_dir: Path, domain: str, split: str) -> Path:
    return Path(corpus_dir) / f"{domain}-{split}.jsonl"


def load_domain(corpus_dir: Path, domain: str) -> dict[str, list[Document]]:
    """Load every split file present for ``domain`` from a canonical corpus directory."""
    out = {}
    for split in SPLITS:
        path = corpus_file(corpus_dir, domain, split)
        if path.exists():
            out[split] = read_corpus(path)
    return out


# --- statistics and validation ----------------------------------------------


def relation_count(doc: Document) -> int:
    # Multi-label pairs count once per label, matching one annotation row per label.
    return sum(len(r.labels) for r in doc.relations)


def corpus_stats(documents: Iterable[Document]) -> dict[str, DomainStats]:
    """Sentence counts per split and relation totals, grouped by domain.

    Every document must carry a ``split`` tag.
    """
    stats: dict[str, DomainStats] = defaultdict(DomainStats)
    for doc in documents:
        if doc.split is None:
            raise CorpusError(f"document {doc.doc_id!r} has no split")
        stats[doc.domain].add(doc.split, relation_count(doc))
    return dict(stats)


def format_stats_table(stats: Mapping[str, DomainStats], sep: Optional[str] = None) -> str:
    header = ["Domain", "Train", "Dev", "Test", "Relations"]
    rows = [
        [DOMAIN_TITLES.get(d, d), str(s.train), str(s.dev), str(s.test), str(s.relations)]
        for d, s in sorted(stats.items(), key=lambda kv: _domain_order(kv[0]))
    ]
    if sep is not None:
        return "\n".join(sep.join(r) for r in [header, *rows]) + "\n"
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in [header, *rows]]
    return "\n".join(lines) + "\n"


def _domain_order(domain: str) -> int:
    return DOMAINS.index(domain) if domain in DOMAINS else len(DOMAINS)


def label_counts(documents: Iterable[Document]) -> Counter:
    counts: Counter = Counter({lab: 0 for lab in LABELS})
    for doc in documents:
        for rel in doc.relations:
            counts.update(rel.labels)
    return counts


def validate_document(doc: Document) -> list[Violation]:
    out = []
    did = doc.doc_id or "<unnamed>"
    if not doc.tokens:
        out.append(Violation("EmptyDocument", did, "no tokens"))
    if doc.domain not in DOMAINS:
        out.append(Violation("DomainViolation", did, f"unknown domain {doc.domain!r}"))
    allowed = ENTITY_TYPES.get(doc.domain, frozenset())
    for ent in doc.entities:
        if not 0 <= ent.start <= ent.end < len(doc.tokens):
            out.append(Violation("SpanViolation", did, f"entity {ent.entity_id} [{ent.start}, {ent.end}]"))
        if ent.entity_type.lower() not in allowed:
            out.append(
                Violation("EntityTypeViolation", did, f"entity {ent.entity_id} type {ent.entity_type!r} not allowed in {doc.domain}")
            )
    for k, rel in enumerate(doc.relations):
        for ref in (rel.head, rel.tail):
            if not 0 <= ref < len(doc.entities):
                out.append(Violation("DanglingEntityRef", did, f"relation {k} references entity {ref}"))
        if not rel.labels:
            out.append(Violation("EmptyLabelSet", did, f"relation {k} has no labels"))
        unknown = [lab for lab in rel.labels if lab not in LABEL_INDEX]
        if unknown:
            out.append(Violation("UnknownLabel", did, f"relation {k} labels {sorted(unknown)}"))
        if RELATED_TO in rel.labels and len(rel.labels) > 1:
            out.append(
                Violation("ExclusivityViolation", did, f"relation {k} combines {RELATED_TO} with {sorted(rel.labels - {RELATED_TO})}")
            )
    return out


def validate_corpus(documents: Iterable[Document]) -> list[Violation]:
    out: list[Violation] = []
    for doc in documents:
        out.extend(validate_document(doc))
    return out


def gold_pairs(doc: Document) -> list[tuple[int, int, frozenset[str]]]:
    return [(r.head, r.tail, r.labels) for r in doc.relations]


def documents_by_split(docs: Sequence[Document]) -> dict[str, list[Document]]:
    out: dict[str, list[Document]] = defaultdict(list)
    for d in docs:
        out[d.split or ""].append(d)
    return dict(out)
