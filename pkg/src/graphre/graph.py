"""Word/entity graphs over a mini-document (annotated sentence + support paragraph).

Every word occurrence is a node. Words of one sentence form a clique, the
mention words of one entity form a clique, and every node has a self-loop.
Edges are binary; normalisation belongs to the GNN layer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from graphre.augment import ABBREVIATIONS
from graphre.corpus import Document, EntitySpan, atomic_write_text

_PUNCT = "\"'()[]{}<>,.;:!?“”‘’«»…"


def tokenize(text: str) -> list[str]:
    """Whitespace split, then peel leading/trailing punctuation into tokens.

    Inner punctuation stays (``computer-readable``, ``O'Neil``) and
    abbreviations keep their final period (``U.S.``).
    """
    out = []
    for chunk in text.split():
        lead = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail = []
        while chunk and chunk[-1] in _PUNCT:
            if chunk[-1] == "." and (chunk.lower() in ABBREVIATIONS or re.fullmatch(r"(?:[A-Za-z]\.)+", chunk)):
                break
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        out.extend(lead)
        if chunk:
            out.append(chunk)
        out.extend(reversed(trail))
    return out


def assemble_minidoc(doc: Document) -> list[list[str]]:
    sentences = [list(doc.tokens)]
    if doc.support is not None and doc.support.text.strip():
        for sent in doc.support.sentences:
            toks = tokenize(sent)
            if toks:
                sentences.append(toks)
    return sentences


@dataclass(frozen=True)
class NodeRef:
    node_index: int
    word: str
    sentence_index: int
    word_index: int
    entity_ids: tuple[int, ...] = ()

    @property
    def entity_id(self) -> Optional[int]:
        return self.entity_ids[0] if self.entity_ids else None


def _offsets(sentences: Sequence[Sequence[str]]) -> list[int]:
    offs, total = [], 0
    for sent in sentences:
        offs.append(total)
        total += len(sent)
    return offs


def find_mentions(entity: EntitySpan, sentences: Sequence[Sequence[str]]) -> list[NodeRef]:
    """Mention-word nodes of ``entity`` across the mini-document.

    Every case-insensitive occurrence of the entity's token sequence counts,
    in every sentence; the annotated span in sentence 0 is always included.
    """
    surface = [w.lower() for w in sentences[0][entity.start : entity.end + 1]]
    k = len(surface)
    offs = _offsets(sentences)
    hits: set[tuple[int, int]] = {(0, j) for j in range(entity.start, entity.end + 1)}
    for si, sent in enumerate(sentences):
        lowered = [w.lower() for w in sent]
        for j in range(len(lowered) - k + 1):
            if lowered[j : j + k] == surface:
                hits.update((si, j + t) for t in range(k))
    return [
        NodeRef(offs[si] + wi, sentences[si][wi], si, wi, (entity.entity_id,))
        for si, wi in sorted(hits)
    ]


@dataclass
class DocumentGraph:
    nodes: list[NodeRef]
    adjacency: np.ndarray
    entity_components: dict[int, tuple[int, ...]]
    sentences: list[list[str]] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def sentence_nodes(self, sentence_index: int) -> list[int]:
        return [n.node_index for n in self.nodes if n.sentence_index == sentence_index]

    def edge_list(self) -> list[tuple[int, int]]:
        """Undirected edges ``u < v`` (self-loops omitted)."""
        us, vs = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(us.tolist(), vs.tolist()))

    def edge_index(self) -> np.ndarray:
        """Directed ``(2, E)`` index including both directions and self-loops."""
        us, vs = np.nonzero(self.adjacency)
        return np.stack([us, vs]).astype(np.int64)


def build_graph(doc: Document, sentences: Optional[Sequence[Sequence[str]]] = None) -> DocumentGraph:
    """Graph over ``sentences`` (default: the document's full mini-document)."""
    sents = [list(s) for s in (sentences if sentences is not None else assemble_minidoc(doc))]
    offs = _offsets(sents)
    n = sum(len(s) for s in sents)
    adj = np.zeros((n, n), dtype=np.uint8)
    for off, sent in zip(offs, sents):
        adj[off : off + len(sent), off : off + len(sent)] = 1

    membership: dict[int, list[int]] = {}
    components: dict[int, tuple[int, ...]] = {}
    for ent in doc.entities:
        idx = [m.node_index for m in find_mentions(ent, sents)]
        components[ent.entity_id] = tuple(idx)
        adj[np.ix_(idx, idx)] = 1
        for i in idx:
            membership.setdefault(i, []).append(ent.entity_id)
    np.fill_diagonal(adj, 1)

    nodes = [
        NodeRef(off + wi, word, si, wi, tuple(membership.get(off + wi, ())))
        for si, (off, sent) in enumerate(zip(offs, sents))
        for wi, word in enumerate(sent)
    ]
    return DocumentGraph(nodes=nodes, adjacency=adj, entity_components=components, sentences=sents)


def dump_graph(graph: DocumentGraph, stem: Path) -> tuple[Path, Path]:
    """Write ``<stem>.edges`` (``u v`` per line) and ``<stem>.nodes.tsv``."""
    stem = Path(stem)
    edges = stem.with_name(stem.name + ".edges")
    nodes = stem.with_name(stem.name + ".nodes.tsv")
    atomic_write_text(edges, "".join(f"{u} {v}\n" for u, v in graph.edge_list()))
    rows = ["node\tword\tsentence\tposition\tentities"]
    for n in graph.nodes:
        ents = ",".join(str(e) for e in n.entity_ids) or "-"
        rows.append(f"{n.node_index}\t{n.word}\t{n.sentence_index}\t{n.word_index}\t{ents}")
    atomic_write_text(nodes, "\n".join(rows) + "\n")
    return edges, nodes
