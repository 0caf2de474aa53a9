import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from radspan import spert
from radspan.corpus import split_corpus
from radspan.encoder import ContextEncoder, EncoderConfig, build_vocab
from radspan.instances import SentenceInstance, seeded_init, sentence_instances
from radspan.spert import (
    SpanCandidate,
    TrainConfig,
    classify_relations,
    classify_spans,
    enumerate_spans,
    joint_loss,
    sample_training_batch,
    span_embedding,
)
from radspan.synth import GrammarConfig, generate

from helpers import two_sentence_doc
from oracles import count_spans_brute, scalar_cross_entropy


# enumeration -------------------------------------------------------------------

def test_enumerate_empty():
    assert enumerate_spans(0, 10) == []


@pytest.mark.parametrize("n, L, expected", [(5, 3, 12), (3, 10, 6)])
def test_enumerate_counts(n, L, expected):
    spans = enumerate_spans(n, L)
    assert len(spans) == expected == count_spans_brute(n, L)


def test_enumerate_order_and_buckets():
    spans = enumerate_spans(4, 2)
    assert [(s.start, s.end) for s in spans] == sorted((s.start, s.end) for s in spans)
    assert all(s.width_bucket == s.end - s.start + 1 <= 2 for s in spans)


def test_width_bucket_clamped():
    assert SpanCandidate.of(0, 11, 10).width_bucket == 10


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.negative_entity_count, c.negative_relation_count, c.max_span_width, c.max_span_pairs) == (100, 100, 10, 1000)
    assert (c.batch_size, c.epochs, c.learning_rate, c.dropout) == (20, 20, 5e-5, 0.2)
    assert (c.warmup_fraction, c.weight_decay, c.max_grad_norm) == (0.1, 0.01, 1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 3})


# heads ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def model(schema):
    doc = two_sentence_doc(schema)
    toks = [s.token_texts(doc.text) for s in doc.sentences]
    vocab = build_vocab(toks, 40, schema)
    with seeded_init(3):
        m = spert.build_model(ContextEncoder(vocab, EncoderConfig(dim=16, heads=2, ff_dim=24)), schema, TrainConfig())
    m.eval()
    inst = sentence_instances([doc], m.encoder)[1]  # split into several pieces per token
    return m, inst


def test_single_piece_span_equals_embedding(schema):
    doc = two_sentence_doc(schema)
    vocab = build_vocab([s.token_texts(doc.text) for s in doc.sentences], 200, schema)
    with seeded_init(0):
        m = spert.build_model(ContextEncoder(vocab, EncoderConfig(dim=16, heads=2, ff_dim=24)), schema, TrainConfig())
    inst = sentence_instances([doc], m.encoder)[0]
    enc = m.encoder.encode(inst.seq)
    assert inst.seq.piece_range_of_token[2] == (3, 3)
    e = span_embedding(enc, inst.seq, SpanCandidate(2, 2, 1), m)
    assert torch.equal(e[:16], enc.piece_embeddings[3])
    assert torch.equal(e[16:], m.widths.weight[0])


def test_pooling_scalar_loop(model):
    m, inst = model
    enc = m.encoder.encode(inst.seq)
    for span in enumerate_spans(inst.n_tokens, 10)[:30]:
        got = span_embedding(enc, inst.seq, span, m)[:16]
        p0, p1 = inst.seq.piece_span(span.start, span.end)
        rows = [enc.piece_embeddings[p].tolist() for p in range(p0, p1 + 1)]
        for j in range(16):
            expected = rows[0][j]
            for r in rows[1:]:
                if r[j] > expected:
                    expected = r[j]
            assert got[j].item() == expected
        # coordinatewise >= each constituent and equal to one of them
        for r in rows:
            assert all(g >= v for g, v in zip(got.tolist(), r))


def test_pooling_order_invariant(model):
    m, inst = model
    enc = m.encoder.encode(inst.seq)
    p0, p1 = inst.seq.piece_span(0, 3)
    fwd = enc.piece_embeddings[p0:p1 + 1].max(dim=0).values
    rev = enc.piece_embeddings[p0:p1 + 1].flip(0).max(dim=0).values
    assert torch.equal(fwd, rev)
    assert torch.equal(span_embedding(enc, inst.seq, SpanCandidate(0, 3, 4), m)[:16], fwd)


def test_batched_matches_single(model):
    m, inst = model
    spans = [(c.start, c.end) for c in enumerate_spans(inst.n_tokens, 10)]
    lp, _ = m([inst.seq], [spans], [[]])
    enc = m.encoder.encode(inst.seq)
    probs = classify_spans(enc, inst.seq, [SpanCandidate.of(a, b, 10) for a, b in spans], m)
    assert torch.allclose(lp.exp(), probs, atol=1e-6)


def test_span_distributions(model, schema):
    m, inst = model
    enc = m.encoder.encode(inst.seq)
    probs = classify_spans(enc, inst.seq, enumerate_spans(inst.n_tokens, 10), m)
    assert probs.shape[1] == len(schema.span_labels) == 58
    assert torch.all(probs >= 0)
    assert torch.allclose(probs.sum(dim=1), torch.ones(len(probs)), atol=1e-6)


def test_zero_span_head_is_uniform(model, schema):
    m, inst = model
    enc = m.encoder.encode(inst.seq)
    saved = {k: v.clone() for k, v in m.span_head.state_dict().items()}
    try:
        with torch.no_grad():
            m.span_head.weight.zero_()
            m.span_head.bias.zero_()
        probs = classify_spans(enc, inst.seq, enumerate_spans(3, 2), m)
        assert torch.allclose(probs, torch.full_like(probs, 1 / 58))
    finally:
        m.span_head.load_state_dict(saved)


def test_relation_context_and_shape(model):
    m, inst = model
    enc = m.encoder.encode(inst.seq)
    a, b = SpanCandidate(0, 1, 2), SpanCandidate(2, 3, 2)  # adjacent
    probs, kept, skipped = classify_relations(enc, inst.seq, [(a, b), (b, a)], m)
    assert probs.shape == (2, 2) and kept == [(a, b), (b, a)] and skipped == []
    assert torch.equal(spert.relation_context(enc, inst.seq, a, b), torch.zeros(16))
    # direction matters: the two inputs differ
    xa = torch.cat([span_embedding(enc, inst.seq, a, m), span_embedding(enc, inst.seq, b, m)])
    xb = torch.cat([span_embedding(enc, inst.seq, b, m), span_embedding(enc, inst.seq, a, m)])
    assert not torch.equal(xa, xb)
    c = SpanCandidate(5, 6, 2)
    ctx = spert.relation_context(enc, inst.seq, a, c)
    lo, hi = inst.seq.piece_range_of_token[2][0], inst.seq.piece_range_of_token[4][1]
    assert torch.equal(ctx, enc.piece_embeddings[lo:hi + 1].max(dim=0).values)
    assert torch.equal(ctx, spert.relation_context(enc, inst.seq, c, a))


def test_overlapping_pairs_skipped(model):
    m, inst = model
    enc = m.encoder.encode(inst.seq)
    a, b = SpanCandidate(0, 2, 3), SpanCandidate(2, 3, 2)
    probs, kept, skipped = classify_relations(enc, inst.seq, [(a, b)], m)
    assert probs.shape == (0, 2) and kept == [] and skipped == [(a, b)]


# sampling ------------------------------------------------------------------------

def _inst(n, entities, relations):
    from radspan.encoder import Vocab, tokenize, RESERVED
    words = ["w"] * n
    return SentenceInstance("d", 0, words, tokenize(words, Vocab(RESERVED + ("w",))), entities, relations)


def test_all_spans_gold_no_negatives(schema):
    inst = _inst(2, [(0, 0, 1), (1, 1, 2), (0, 1, 3)], [])
    s = sample_training_batch(inst, TrainConfig(), random.Random(0), schema)
    assert schema.null_index not in s.span_labels


def test_negative_relation_pool(schema):
    # F1=(0,0) A1=(2,2) A2=(4,4); gold (F1, has, A1)
    inst = _inst(6, [(0, 0, 1), (2, 2, 25), (4, 4, 9)], [(0, 1, 1)])
    s = sample_training_batch(inst, TrainConfig(), random.Random(0), schema)
    pairs = dict(zip(s.pairs, s.pair_labels))
    assert pairs[(0, 1)] == 1
    assert pairs[(0, 2)] == 0
    assert len(s.pairs) == 6  # every ordered pair of the three gold spans


@pytest.mark.parametrize("n, expected", [(5, 15 - 1), (30, 100)])
def test_negative_count_is_min_of_pool(schema, n, expected):
    inst = _inst(n, [(0, 0, 1)], [])
    s = sample_training_batch(inst, TrainConfig(), random.Random(0), schema)
    negs = [l for l in s.span_labels if l == 0]
    assert len(negs) == min(expected, 100)
    assert len(set(s.spans)) == len(s.spans)


def test_sampling_deterministic(schema):
    inst = _inst(30, [(0, 0, 1), (3, 5, 25)], [(0, 1, 1)])
    a = sample_training_batch(inst, TrainConfig(), random.Random(7), schema)
    b = sample_training_batch(inst, TrainConfig(), random.Random(7), schema)
    assert a == b


def test_long_gold_span_kept(schema):
    inst = _inst(14, [(0, 11, 1)], [])
    s = sample_training_batch(inst, TrainConfig(), random.Random(0), schema)
    assert s.spans[0] == (0, 11) and s.span_labels[0] == 1


# loss ----------------------------------------------------------------------------

def test_loss_perfect_prediction():
    lp = torch.log(torch.tensor([[1.0, 0.0], [0.0, 1.0]]).clamp_min(1e-300))
    assert joint_loss(lp, [0, 1], lp, [0, 1]).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_uniform_is_log58():
    lp = torch.log_softmax(torch.zeros(7, 58), dim=-1)
    loss = joint_loss(lp, [0, 1, 2, 3, 4, 5, 57], torch.zeros(0, 2), [])
    assert loss.item() == pytest.approx(math.log(58), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_loss_matches_scalar_oracle(n_span, n_rel, seed):
    g = torch.Generator().manual_seed(seed)
    s_logits = torch.randn(n_span, 58, generator=g, dtype=torch.float64) * 3
    r_logits = torch.randn(n_rel, 2, generator=g, dtype=torch.float64) * 3
    s_gold = torch.randint(0, 58, (n_span,), generator=g).tolist()
    r_gold = torch.randint(0, 2, (n_rel,), generator=g).tolist()
    got = joint_loss(s_logits.log_softmax(-1), s_gold, r_logits.log_softmax(-1), r_gold).item()
    want = scalar_cross_entropy(s_logits.tolist(), s_gold)
    if n_rel:
        want += scalar_cross_entropy(r_logits.tolist(), r_gold)
    assert got == pytest.approx(want, abs=1e-6)


# training and prediction -----------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus(schema):
    docs, _ = generate(GrammarConfig(seed=5), 11, schema)
    return docs


def _fit(schema, docs, seed, epochs=20):
    cfg = TrainConfig(learning_rate=1e-3, epochs=epochs, seed=seed, batch_size=10)
    vocab = build_vocab([s.token_texts(d.text) for d in docs for s in d.sentences], 300, schema)
    with seeded_init(seed):
        m = spert.build_model(ContextEncoder(vocab, EncoderConfig(dim=32, heads=2, ff_dim=64)), schema, cfg)
    return m, cfg, spert.train(m, docs, cfg)


def test_training_loss_decreases(schema, small_corpus):
    n = sum(len(d.sentences) for d in small_corpus)
    assert 45 <= n <= 70  # roughly a 50-sentence set
    _, _, hist = _fit(schema, small_corpus, 0)
    losses = [h["loss"] for h in hist]
    assert losses[-1] < 0.5 * losses[0]
    # trend, not strict monotonicity: each 5-epoch window improves on the previous
    windows = [sum(losses[i:i + 5]) for i in range(0, 20, 5)]
    assert all(b < a for a, b in zip(windows, windows[1:]))


def test_training_deterministic(schema, small_corpus):
    m1, _, _ = _fit(schema, small_corpus[:6], 4, epochs=2)
    m2, _, _ = _fit(schema, small_corpus[:6], 4, epochs=2)
    for (k, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k


def test_predict_no_spans(model, schema):
    m, inst = model
    saved = {k: v.clone() for k, v in m.span_head.state_dict().items()}
    try:
        with torch.no_grad():
            m.span_head.weight.zero_()
            m.span_head.bias.zero_()
            m.span_head.bias[0] = 5.0  # null wins everywhere
        (spans, rels), = spert.predict(m, [inst], TrainConfig())
        assert spans == [] and rels == []
    finally:
        m.span_head.load_state_dict(saved)


def test_candidate_pairs():
    spans = [(0, 0, 1), (2, 3, 5)]
    assert spert.candidate_pairs(spans, 1000) == [(0, 1), (1, 0)]
    k = 40
    many = [(i, i, 1) for i in range(k)]
    assert len(spert.candidate_pairs(many, 1000)) == min(k * (k - 1), 1000) == 1000
    assert spert.candidate_pairs(many, 1000)[:2] == [(0, 1), (0, 2)]
    # overlapping spans are all kept as entities but never paired
    assert spert.candidate_pairs([(0, 2, 1), (1, 1, 4)], 1000) == []


def test_tie_breaks_to_lowest_label(model):
    m, inst = model
    saved = {k: v.clone() for k, v in m.span_head.state_dict().items()}
    try:
        with torch.no_grad():
            m.span_head.weight.zero_()
            m.span_head.bias.zero_()
        (spans, _), = spert.predict(m, [inst], TrainConfig())
        assert spans == []  # all-equal scores -> null
    finally:
        m.span_head.load_state_dict(saved)


def test_predict_independent_of_batching(schema, small_corpus):
    m, cfg, _ = _fit(schema, small_corpus[:4], 1, epochs=3)
    insts = sentence_instances(small_corpus[4:10], m.encoder)
    together = spert.predict(m, insts, cfg, chunk=64)
    alone = [spert.predict(m, [i], cfg)[0] for i in insts]
    reversed_ = spert.predict(m, insts[::-1], cfg)[::-1]
    assert together == alone == reversed_
