import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from graphre.encode import (
    EncoderConfig,
    MissingAlignment,
    TruncationOverflow,
    align_to_nodes,
    embed_minidoc,
    encode_minidoc,
    load_encoder_model,
    train_tiny_tokenizer,
)
from graphre.corpus import parse_document
from graphre.graph import assemble_minidoc, build_graph

from conftest import MILLER_RECORD, MILLER_TOKENS

SUPPORT = [
    "George Miller was a psychologist at Princeton .".split(),
    "WordNet groups English words into synonym sets .".split(),
    "It became a standard lexical resource .".split(),
]


@pytest.fixture(scope="module")
def tokenizer():
    texts = [" ".join(MILLER_TOKENS)] + [" ".join(s) for s in SUPPORT]
    return train_tiny_tokenizer(texts, vocab_size=200)


@pytest.fixture(scope="module")
def model(tokenizer):
    torch.manual_seed(0)
    m = load_encoder_model(EncoderConfig("tiny", max_length=128), vocab_size=len(tokenizer))
    return m.eval()


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig("gpt-2")
    with pytest.raises(ValueError):
        EncoderConfig("tiny", max_length=0)
    with pytest.raises(ValueError):
        EncoderConfig("tiny", alignment="last")
    assert EncoderConfig().to_dict()["model_name"] == "bert-base-cased"


def test_tiny_vocab_is_deterministic():
    texts = ["b a c a", "a d"]
    assert train_tiny_tokenizer(texts).get_vocab() == train_tiny_tokenizer(list(reversed(texts))).get_vocab()


def test_single_sentence_maps_every_word(tokenizer):
    enc = encode_minidoc([MILLER_TOKENS], tokenizer, 128)
    assert enc.kept_sentences == 1
    assert len(enc.input_ids) - 2 >= len(MILLER_TOKENS)
    assert sorted(enc.word_ranges) == [(0, i) for i in range(len(MILLER_TOKENS))]
    assert all(e > s for s, e in enc.word_ranges.values())
    # special tokens are outside every word range
    covered = {p for s, e in enc.word_ranges.values() for p in range(s, e)}
    assert 0 not in covered and len(enc.input_ids) - 1 not in covered


def test_unseen_word_splits_into_subwords(tokenizer):
    enc = encode_minidoc([["Millerx", "a"]], tokenizer, 64)
    s, e = enc.word_ranges[(0, 0)]
    assert e - s >= 2


def test_overlong_support_truncated_from_end(tokenizer):
    sentences = [MILLER_TOKENS] + SUPPORT
    full = encode_minidoc(sentences, tokenizer, 512)
    base = encode_minidoc([MILLER_TOKENS], tokenizer, 512)
    budget = len(full.input_ids) - 1
    enc = encode_minidoc(sentences, tokenizer, budget)
    assert enc.kept_sentences == 3
    assert len(enc.input_ids) <= budget
    assert all((0, i) in enc.word_ranges for i in range(len(MILLER_TOKENS)))
    assert not any(k[0] == 3 for k in enc.word_ranges)
    only = encode_minidoc(sentences, tokenizer, len(base.input_ids))
    assert only.kept_sentences == 1
    assert only.input_ids == base.input_ids


def test_sentence_alone_over_budget(tokenizer):
    with pytest.raises(TruncationOverflow):
        encode_minidoc([MILLER_TOKENS], tokenizer, 10)


def test_empty_support_matches_sentence_alone(tokenizer):
    doc = parse_document(dict(MILLER_RECORD, support=""))
    assert encode_minidoc(assemble_minidoc(doc), tokenizer, 128) == encode_minidoc([MILLER_TOKENS], tokenizer, 128)


def test_single_subword_row_is_that_subword():
    emb = torch.randn(6, 4)
    out = align_to_nodes(emb, {(0, 0): (1, 2), (0, 1): (2, 5)}, [(0, 0), (0, 1)])
    assert torch.allclose(out[0], emb[1])


def test_two_subwords_average():
    u, v = torch.tensor([1.0, 2.0, 3.0]), torch.tensor([3.0, -2.0, 0.5])
    emb = torch.stack([torch.zeros(3), u, v, torch.zeros(3)])
    out = align_to_nodes(emb, {(0, 0): (1, 3)}, [(0, 0)])
    assert torch.allclose(out[0], (u + v) / 2)


def test_first_and_max_alignment():
    emb = torch.tensor([[0.0, 0.0], [1.0, 5.0], [3.0, 2.0]])
    ranges = {(0, 0): (1, 3)}
    assert torch.equal(align_to_nodes(emb, ranges, [(0, 0)], "first")[0], emb[1])
    assert torch.equal(align_to_nodes(emb, ranges, [(0, 0)], "max")[0], torch.tensor([3.0, 5.0]))


def test_missing_alignment():
    with pytest.raises(MissingAlignment):
        align_to_nodes(torch.zeros(3, 2), {(0, 0): (1, 2)}, [(0, 0), (1, 0)])


@st.composite
def ranges_and_emb(draw):
    n_words = draw(st.integers(1, 6))
    lengths = draw(st.lists(st.integers(1, 3), min_size=n_words, max_size=n_words))
    ranges, pos = {}, 1
    for i, k in enumerate(lengths):
        ranges[(0, i)] = (pos, pos + k)
        pos += k
    seq = pos + 1
    data = draw(st.lists(st.floats(-10, 10, allow_nan=False), min_size=seq * 3, max_size=seq * 3))
    perm = draw(st.permutations(range(n_words)))
    return ranges, torch.tensor(data, dtype=torch.float64).view(seq, 3), perm


@settings(max_examples=100, deadline=None)
@given(ranges_and_emb())
def test_alignment_rows_permute_and_stay_in_hull(case):
    ranges, emb, perm = case
    nodes = sorted(ranges)
    rows = align_to_nodes(emb, ranges, nodes)
    permuted = align_to_nodes(emb, ranges, [nodes[i] for i in perm])
    assert torch.allclose(permuted, rows[list(perm)])
    for k, key in enumerate(nodes):
        s, e = ranges[key]
        assert rows[k].norm() <= emb[s:e].norm(dim=1).max() + 1e-9
        assert np.allclose(rows[k].numpy(), emb[s:e].numpy().mean(axis=0))


def test_node_matrix_rows_match_graph(tokenizer, model):
    doc = parse_document(MILLER_RECORD)
    sentences = [MILLER_TOKENS] + SUPPORT
    cfg = EncoderConfig("tiny", max_length=128, finetune=False)
    hidden, enc = embed_minidoc(sentences, tokenizer, model, cfg)
    graph = build_graph(doc, sentences[: enc.kept_sentences])
    rows = align_to_nodes(hidden, enc.word_ranges, graph.nodes)
    assert rows.shape == (graph.num_nodes, model.config.hidden_size)
    assert torch.isfinite(rows).all()
    again, _ = embed_minidoc(sentences, tokenizer, model, cfg)
    assert torch.equal(hidden, again)
