"""Transformer encoding of mini-documents and subword-to-word alignment."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch

HUB_IDS = {
    "bert-base-cased": "bert-base-cased",
    "roberta-base": "roberta-base",
    "deberta-v3-base": "microsoft/deberta-v3-base",
    # randomly initialised small BERT with a corpus-trained WordPiece vocab
    "tiny": None,
}
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


class EncodeError(RuntimeError):
    pass


class TruncationOverflow(EncodeError):
    pass


class MissingAlignment(EncodeError):
    pass


@dataclass
class EncoderConfig:
    model_name: str = "bert-base-cased"
    max_length: int = 512
    alignment: str = "mean"
    finetune: bool = True
    model_dir: Optional[str] = None
    batch_size: int = 16
    # only used by the "tiny" encoder
    tiny_hidden: int = 64
    tiny_layers: int = 2
    tiny_heads: int = 4
    tiny_vocab: int = 4000

    def __post_init__(self):
        if self.model_name not in HUB_IDS:
            raise ValueError(f"unsupported encoder {self.model_name!r}; choose from {sorted(HUB_IDS)}")
        if self.max_length <= 0:
            raise ValueError("max_length must be positive")
        if self.alignment not in ("mean", "first", "max"):
            raise ValueError(f"unknown alignment {self.alignment!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MiniDocEncoding:
    """Subword ids for one mini-document plus the word -> subword map.

    ``word_ranges[(sentence, word)]`` is the half-open subword range of that
    word occurrence, in sequence positions (special tokens included).
    """

    input_ids: list[int]
    word_ranges: dict[tuple[int, int], tuple[int, int]]
    kept_sentences: int


def _tokenizer_kwargs(tokenizer) -> dict:
    name = type(tokenizer).__name__.lower()
    # byte-level BPE needs a prefix space to treat each word as word-initial
    return {"add_prefix_space": True} if "roberta" in name or "gpt2" in name else {}


def load_tokenizer(cfg: EncoderConfig, path: Optional[Path] = None, texts: Optional[Iterable[str]] = None):
    from transformers import AutoTokenizer

    if path is not None:
        return AutoTokenizer.from_pretrained(str(path))
    if cfg.model_name == "tiny":
        if texts is None:
            raise EncodeError("the tiny encoder needs training texts to build its vocabulary")
        return train_tiny_tokenizer(texts, cfg.tiny_vocab)
    source = cfg.model_dir or HUB_IDS[cfg.model_name]
    kwargs = {}
    if "roberta" in cfg.model_name:
        kwargs["add_prefix_space"] = True
    return AutoTokenizer.from_pretrained(source, **kwargs)


def train_tiny_tokenizer(texts: Iterable[str], vocab_size: int = 4000):
    """WordPiece tokenizer with a deterministic corpus vocabulary.

    Vocabulary: special tokens, every character seen (word-initial and
    ``##`` continuation forms), then whole words by descending frequency.
    Unseen words fall back to characters.
    """
    from collections import Counter

    from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, processors
    from transformers import PreTrainedTokenizerFast

    pre = pre_tokenizers.BertPreTokenizer()
    words: Counter = Counter()
    for text in texts:
        words.update(w for w, _ in pre.pre_tokenize_str(text))
    chars = sorted({c for w in words for c in w})
    vocab = list(SPECIAL_TOKENS) + chars + [f"##{c}" for c in chars]
    budget = max(vocab_size - len(vocab), 0)
    vocab += [w for w, _ in sorted(words.items(), key=lambda kv: (-kv[1], kv[0])) if len(w) > 1][:budget]
    tok = Tokenizer(models.WordPiece({t: i for i, t in enumerate(vocab)}, unk_token="[UNK]"))
    tok.normalizer = normalizers.BertNormalizer(lowercase=False)
    tok.pre_tokenizer = pre
    cls_id, sep_id = tok.token_to_id("[CLS]"), tok.token_to_id("[SEP]")
    tok.post_processor = processors.TemplateProcessing(
        single="[CLS] $A [SEP]", special_tokens=[("[CLS]", cls_id), ("[SEP]", sep_id)]
    )
    return PreTrainedTokenizerFast(
        tokenizer_object=tok,
        unk_token="[UNK]",
        pad_token="[PAD]",
        cls_token="[CLS]",
        sep_token="[SEP]",
        mask_token="[MASK]",
    )


def load_encoder_model(cfg: EncoderConfig, vocab_size: Optional[int] = None, path: Optional[Path] = None):
    """Pretrained weights for hub models; a fresh small BERT for ``tiny``.

    With ``path`` only the architecture is restored (weights come from a
    checkpoint state dict).
    """
    from transformers import AutoConfig, AutoModel, BertConfig, BertModel

    if path is not None:
        return AutoModel.from_config(AutoConfig.from_pretrained(str(path)))
    if cfg.model_name == "tiny":
        conf = BertConfig(
            vocab_size=vocab_size,
            hidden_size=cfg.tiny_hidden,
            num_hidden_layers=cfg.tiny_layers,
            num_attention_heads=cfg.tiny_heads,
            intermediate_size=cfg.tiny_hidden * 4,
            max_position_embeddings=max(cfg.max_length, 64),
        )
        return BertModel(conf)
    return AutoModel.from_pretrained(cfg.model_dir or HUB_IDS[cfg.model_name])


def encode_minidoc(sentences: Sequence[Sequence[str]], tokenizer, max_length: int) -> MiniDocEncoding:
    """Tokenize a mini-document, dropping support sentences from the end to fit.

    Sentence 0 (the annotated sentence) is never dropped; if it alone does
    not fit, :class:`TruncationOverflow` is raised.
    """
    words = [w for s in sentences for w in s]
    kwargs = _tokenizer_kwargs(tokenizer)
    enc = tokenizer(words, is_split_into_words=True, add_special_tokens=True, truncation=False, **kwargs)
    word_ids = enc.word_ids()
    present = {w for w in word_ids if w is not None}
    if len(present) != len(words):
        # words that tokenize to nothing (stray control characters) become UNK
        words = [w if i in present else tokenizer.unk_token for i, w in enumerate(words)]
        enc = tokenizer(words, is_split_into_words=True, add_special_tokens=True, truncation=False, **kwargs)
        word_ids = enc.word_ids()
    ids = list(enc["input_ids"])

    first, last = {}, {}
    for pos, w in enumerate(word_ids):
        if w is None:
            continue
        first.setdefault(w, pos)
        last[w] = pos + 1
    body_start = min(first.values()) if first else len(ids)
    body_end = max(last.values()) if last else len(ids)
    prefix, suffix = ids[:body_start], ids[body_end:]

    starts, total = [], 0
    for s in sentences:
        starts.append(total)
        total += len(s)
    ends = [st + len(s) for st, s in zip(starts, sentences)]

    kept = len(sentences)
    while kept > 0:
        n_words = ends[kept - 1]
        span = (last[n_words - 1] - body_start) if n_words else 0
        if len(prefix) + span + len(suffix) <= max_length:
            break
        if kept == 1:
            raise TruncationOverflow(
                f"annotated sentence needs {len(prefix) + span + len(suffix)} subwords, budget is {max_length}"
            )
        kept -= 1
    n_words = ends[kept - 1] if kept else 0
    cut = last[n_words - 1] if n_words else body_start
    input_ids = prefix + ids[body_start:cut] + suffix

    ranges = {}
    for si in range(kept):
        for wi in range(len(sentences[si])):
            w = starts[si] + wi
            ranges[(si, wi)] = (first[w], last[w])
    return MiniDocEncoding(input_ids=input_ids, word_ranges=ranges, kept_sentences=kept)


def run_encoder(model, encodings: Sequence[MiniDocEncoding], pad_id: int) -> list[torch.Tensor]:
    """Forward a batch; returns one ``(seq_len, hidden)`` tensor per document."""
    device = next(model.parameters()).device
    width = max(len(e.input_ids) for e in encodings)
    ids = torch.full((len(encodings), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(encodings), width), dtype=torch.long)
    for i, e in enumerate(encodings):
        ids[i, : len(e.input_ids)] = torch.tensor(e.input_ids)
        mask[i, : len(e.input_ids)] = 1
    out = model(input_ids=ids.to(device), attention_mask=mask.to(device)).last_hidden_state
    return [out[i, : len(e.input_ids)] for i, e in enumerate(encodings)]


def embed_minidoc(sentences, tokenizer, model, cfg: EncoderConfig):
    """Subword embeddings ``(seq_len, hidden)`` and the word -> subword map."""
    enc = encode_minidoc(sentences, tokenizer, cfg.max_length)
    pad_id = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else 0
    with torch.set_grad_enabled(cfg.finetune and model.training):
        hidden = run_encoder(model, [enc], pad_id)[0]
    return hidden, enc


def pooling_matrix(word_ranges, nodes, seq_len: int) -> torch.Tensor:
    """``(num_nodes, seq_len)`` matrix whose rows average each node's subwords."""
    mat = torch.zeros((len(nodes), seq_len))
    for row, key in enumerate(_node_keys(nodes)):
        if key not in word_ranges:
            raise MissingAlignment(f"no subwords for word occurrence {key}")
        s, e = word_ranges[key]
        if e <= s:
            raise MissingAlignment(f"empty subword range for word occurrence {key}")
        mat[row, s:e] = 1.0 / (e - s)
    return mat


def _node_keys(nodes):
    for n in nodes:
        yield (n.sentence_index, n.word_index) if hasattr(n, "sentence_index") else tuple(n)


def align_to_nodes(subword_emb: torch.Tensor, word_ranges, nodes, alignment: str = "mean") -> torch.Tensor:
    """Node-feature matrix: row ``i`` pools the subwords of ``nodes[i]``.

    ``nodes`` may be a graph's ``NodeRef`` list or ``(sentence, word)`` pairs.
    """
    if alignment == "mean":
        return pooling_matrix(word_ranges, nodes, subword_emb.shape[0]).to(subword_emb) @ subword_emb
    rows = []
    for key in _node_keys(nodes):
        if key not in word_ranges:
            raise MissingAlignment(f"no subwords for word occurrence {key}")
        s, e = word_ranges[key]
        rows.append(subword_emb[s] if alignment == "first" else subword_emb[s:e].max(dim=0).values)
    return torch.stack(rows) if rows else subword_emb.new_zeros((0, subword_emb.shape[1]))


def save_encoder_assets(tokenizer, model, path: Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tokenizer.save_pretrained(str(path))
    model.config.save_pretrained(str(path))
