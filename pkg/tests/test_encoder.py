import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from radspan.encoder import (
    CONT,
    RESERVED,
    ContextEncoder,
    EncoderConfig,
    SequenceTooLong,
    Vocab,
    build_vocab,
    encode,
    marker,
    split_word,
    tokenize,
)
from radspan.instances import seeded_init


def test_vocab_under_budget(schema):
    v = build_vocab([["lung"] * 10 + ["mass"] * 5], 20, schema)
    assert "lung" in v and "mass" in v


def test_vocab_layout(schema):
    v = build_vocab([["Lung", "mass"]], 50, schema)
    assert v.pieces[:4] == RESERVED
    assert (v.pad_id, v.unk_id, v.cls_id) == (0, 1, 2)
    assert v.pieces[v.close_id] == "$"
    assert v.pieces[v.marker_id("Finding")] == marker("Finding") == "@Finding"
    assert all(marker(l) in v for l in schema.span_labels[1:])
    assert "lung" in v and "Lung" not in v  # lowercased


def test_vocab_deterministic(schema):
    toks = [["the", "liver", "is", "normal"], ["the", "lung"]]
    assert build_vocab(toks, 30, schema) == build_vocab(toks, 30, schema)


def test_vocab_budget_and_frequency_order(schema):
    toks = [["b"] * 3 + ["aa"] * 5 + ["c", "d"]]
    # characters seen: a, ##a, b, c, d; the one-letter words are already pieces
    learned = lambda v: [p for p in v.pieces if p not in RESERVED and p != "$" and not p.startswith("@")]
    v = build_vocab(toks, 4 + 5 + 1, schema)
    assert learned(v) == ["a", "##a", "b", "c", "d", "aa"]
    tight = build_vocab(toks, 4 + 5, schema)
    assert "aa" not in tight
    assert [tight.pieces[i] for i in split_word("aa", tight)] == ["a", "##a"]


def test_vocab_too_small(schema):
    with pytest.raises(ValueError):
        build_vocab([["x"]], 8, schema)


def test_unseen_token_falls_back(schema):
    v = build_vocab([["lung", "mass"]], 30, schema)
    ids = split_word("mug", v)
    assert [v.pieces[i] for i in ids] == ["m", CONT + "u", CONT + "g"]
    assert split_word("zzz", v) == [v.unk_id]


def test_tokenize_empty(schema):
    v = build_vocab([["a"]], 20, schema)
    seq = tokenize([], v)
    assert seq.piece_ids == (v.cls_id,) and seq.piece_range_of_token == ()


def test_tokenize_known_token(schema):
    v = build_vocab([["lung"]], 20, schema)
    seq = tokenize(["lung"], v)
    assert seq.piece_ids == (v.cls_id, v.id("lung"))
    assert seq.token_of_piece == (-1, 0)


def test_tokenize_hand_enumerated(schema):
    # "xy" is not a whole piece, so it splits into "x" + "##y"
    v = Vocab(RESERVED + ("a", "b", "x", CONT + "y"))
    seq = tokenize(["a", "xy", "b"], v)
    assert seq.piece_range_of_token == ((1, 1), (2, 3), (4, 4))
    assert seq.token_of_piece == (-1, 0, 1, 1, 2)
    assert [v.pieces[i] for i in seq.piece_ids] == ["[CLS]", "a", "x", "##y", "b"]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.text(alphabet="abcdexyz", min_size=1, max_size=7), max_size=12))
def test_alignment_covers_pieces(words):
    v = Vocab(RESERVED + ("a", "b", "c", "x", "##a", "##b", "##c", "##d", "##e", "##x", "##y", "ab", "cd"))
    seq = tokenize(words, v)
    covered = [p for a, b in seq.piece_range_of_token for p in range(a, b + 1)]
    assert covered == list(range(1, len(seq)))
    for tok, (a, b) in enumerate(seq.piece_range_of_token):
        assert a <= b
        assert all(seq.token_of_piece[p] == tok for p in range(a, b + 1))


def _encoder(schema, max_length=128):
    v = build_vocab([["the", "right", "lower", "lobe", "liver", "nodule"]], 40, schema)
    with seeded_init(0):
        return ContextEncoder(v, EncoderConfig(max_length=max_length))


def test_encode_shapes(schema):
    enc = _encoder(schema)
    seq = enc.tokenize(["nodule", "in", "the", "liver"])
    out = encode(seq, enc)
    assert out.piece_embeddings.shape == (len(seq), 64)
    assert torch.equal(out.cls_embedding, out.piece_embeddings[0])
    assert torch.isfinite(out.piece_embeddings).all()


def test_encode_is_contextual(schema):
    enc = _encoder(schema)
    a = encode(enc.tokenize(["nodule", "in", "the", "right", "lower", "lobe"]), enc)
    b = encode(enc.tokenize(["nodule", "in", "the", "right", "lower", "liver"]), enc)
    assert not torch.equal(a.piece_embeddings[1], b.piece_embeddings[1])


def test_encode_deterministic(schema):
    e1, e2 = _encoder(schema), _encoder(schema)
    seq = e1.tokenize(["the", "liver"])
    assert torch.equal(encode(seq, e1).piece_embeddings, encode(seq, e2).piece_embeddings)


def test_padding_does_not_leak(schema):
    enc = _encoder(schema).eval()
    short = enc.tokenize(["liver"])
    long = enc.tokenize(["nodule", "in", "the", "right", "lower", "lobe"])
    ids, mask = enc.batch([short.piece_ids, long.piece_ids])
    batched = enc(ids, mask)[0, :len(short)]
    alone = encode(short, enc).piece_embeddings
    assert torch.allclose(batched, alone, atol=1e-6)


def test_too_long_strict_and_lenient(schema):
    enc = _encoder(schema, max_length=6)
    words = ["the"] * 10
    with pytest.raises(SequenceTooLong):
        enc.tokenize(words, strict=True)
    seq = enc.tokenize(words)
    assert seq.truncated and len(seq) == 6 and seq.n_tokens == 5
