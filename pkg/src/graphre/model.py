"""End-to-end relation model: encoder -> word graph -> entity fusion -> pair scores."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from graphre.corpus import Document, LABELS
from graphre.encode import (
    EncoderConfig,
    MiniDocEncoding,
    encode_minidoc,
    load_encoder_model,
    load_tokenizer,
    pooling_matrix,
    run_encoder,
    save_encoder_assets,
)
from graphre.gnn import GraphRefiner, edges_with_self_loops
from graphre.graph import DocumentGraph, assemble_minidoc, build_graph
from graphre.relclf import PairClassifier, gold_vector


@dataclass
class GraphConfig:
    fusion: str = "none"
    gcn_layers: int = 2
    gcn_activation: str = "relu"
    gat_heads: int = 1
    use_gcn: bool = True
    use_gat: bool = True
    hidden_dim: Optional[int] = None  # None: keep the encoder width


@dataclass
class DocFeatures:
    doc: Document
    encoding: MiniDocEncoding
    graph: DocumentGraph
    edges: tuple
    pool: torch.Tensor
    base_index: list[list[int]]
    mention_index: list[list[int]]
    pairs: list[tuple[int, int]]
    targets: torch.Tensor
    key: str = ""


def featurize(doc: Document, tokenizer, max_length: int, key: str = "") -> DocFeatures:
    """Tokenize, truncate and build the graph on the surviving mini-document."""
    sentences = assemble_minidoc(doc)
    enc = encode_minidoc(sentences, tokenizer, max_length)
    graph = build_graph(doc, sentences[: enc.kept_sentences])
    pool = pooling_matrix(enc.word_ranges, graph.nodes, len(enc.input_ids))
    base_index = [list(range(e.start, e.end + 1)) for e in doc.entities]
    mention_index = [list(graph.entity_components[e.entity_id]) for e in doc.entities]
    pairs = [(r.head, r.tail) for r in doc.relations]
    targets = torch.tensor(np.array([gold_vector(r.labels) for r in doc.relations]).reshape(-1, len(LABELS)), dtype=torch.float32)
    return DocFeatures(
        doc=doc,
        encoding=enc,
        graph=graph,
        edges=edges_with_self_loops(graph),
        pool=pool,
        base_index=base_index,
        mention_index=mention_index,
        pairs=pairs,
        targets=targets,
        key=key or doc.doc_id,
    )


def featurize_all(docs: Sequence[Document], tokenizer, max_length: int) -> list[DocFeatures]:
    out = []
    for i, doc in enumerate(docs):
        if not doc.relations:
            continue
        out.append(featurize(doc, tokenizer, max_length, key=doc.doc_id or f"#{i}"))
    return out


class RelationModel(nn.Module):
    def __init__(self, encoder: nn.Module, graph_cfg: GraphConfig, pad_id: int = 0, finetune: bool = True):
        super().__init__()
        self.encoder = encoder
        self.finetune = finetune
        self.pad_id = pad_id
        width = encoder.config.hidden_size
        dim = graph_cfg.hidden_dim or width
        self.project = nn.Linear(width, dim) if dim != width else None
        self.refiner = GraphRefiner(
            dim,
            fusion=graph_cfg.fusion,
            gcn_layers=graph_cfg.gcn_layers,
            gcn_activation=graph_cfg.gcn_activation,
            gat_heads=graph_cfg.gat_heads,
            use_gcn=graph_cfg.use_gcn,
            use_gat=graph_cfg.use_gat,
        )
        self.classifier = PairClassifier(dim)
        if not finetune:
            for p in self.encoder.parameters():
                p.requires_grad_(False)

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("encoder.")]

    def forward(self, batch: Sequence[DocFeatures]) -> list[torch.Tensor]:
        """Pair logits ``(num_pairs, 17)`` for each document in ``batch``."""
        with torch.set_grad_enabled(torch.is_grad_enabled() and self.finetune):
            hidden = run_encoder(self.encoder, [f.encoding for f in batch], self.pad_id)
        out = []
        for feats, h in zip(batch, hidden):
            rows = feats.pool.to(h) @ h
            if self.project is not None:
                rows = self.project(rows)
            ents = self.refiner(rows, feats.edges, feats.base_index, feats.mention_index).fused
            heads = torch.tensor([p[0] for p in feats.pairs], dtype=torch.long)
            tails = torch.tensor([p[1] for p in feats.pairs], dtype=torch.long)
            out.append(self.classifier(ents[heads], ents[tails]))
        return out


def build_model(enc_cfg: EncoderConfig, graph_cfg: GraphConfig, train_texts: Optional[Sequence[str]] = None):
    """Fresh tokenizer + model. Seed torch beforehand for reproducible init."""
    tokenizer = load_tokenizer(enc_cfg, texts=train_texts)
    encoder = load_encoder_model(enc_cfg, vocab_size=len(tokenizer))
    pad = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else 0
    model = RelationModel(encoder, graph_cfg, pad_id=pad, finetune=enc_cfg.finetune)
    return tokenizer, model


def save_checkpoint(path: Path, model: RelationModel, tokenizer, enc_cfg: EncoderConfig, graph_cfg: GraphConfig) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_encoder_assets(tokenizer, model.encoder, path / "encoder")
    (path / "model_config.json").write_text(
        json.dumps({"encoder": enc_cfg.to_dict(), "graph": asdict(graph_cfg)}, indent=2, sort_keys=True) + "\n"
    )
    torch.save(model.state_dict(), path / "model.pt")


def load_checkpoint(path: Path):
    path = Path(path)
    meta = json.loads((path / "model_config.json").read_text())
    enc_cfg = EncoderConfig(**meta["encoder"])
    graph_cfg = GraphConfig(**meta["graph"])
    tokenizer = load_tokenizer(enc_cfg, path=path / "encoder")
    encoder = load_encoder_model(enc_cfg, path=path / "encoder")
    pad = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else 0
    model = RelationModel(encoder, graph_cfg, pad_id=pad, finetune=enc_cfg.finetune)
    model.load_state_dict(torch.load(path / "model.pt", map_location="cpu"))
    model.eval()
    return model, tokenizer, enc_cfg, graph_cfg
