"""Small hand-built instances shared by several test modules."""

from __future__ import annotations

import random

import torch

from radspan import baseline, spert
from radspan.corpus import parse_standoff
from radspan.encoder import ContextEncoder, EncoderConfig, build_vocab
from radspan.instances import seeded_init, sentence_instances

TEXT = ("Compressive atelectasis of the right lower lobe.\n"
        "Calcified plaque in the coronary arteries and the abdominal aorta.\n")
_ENTS = [("Finding", "Compressive atelectasis"), ("Lung", "right lower lobe"),
         ("Finding", "Calcified plaque"), ("Cardio", "coronary arteries"), ("Cardio", "abdominal aorta")]
ANN = "".join(f"T{i}\t{lab} {TEXT.index(s)} {TEXT.index(s) + len(s)}\t{s}\n"
              for i, (lab, s) in enumerate(_ENTS, 1))
ANN += "R1\thas Arg1:T1 Arg2:T2\nR2\thas Arg1:T3 Arg2:T4\nR3\thas Arg1:T3 Arg2:T5\n"


def two_sentence_doc(schema):
    return parse_standoff(TEXT, ANN, schema, "grad")


def small_vocab(docs, schema, size=40):
    toks = [s.token_texts(d.text) for d in docs for s in d.sentences]
    # a budget of 40 leaves the second sentence to character pieces, so pooling spans several pieces
    return build_vocab(toks, size, schema)


def double_models(schema, seed=0):
    """SpERT and the tagging baseline in float64 over the 2-sentence document."""
    doc = two_sentence_doc(schema)
    vocab = small_vocab([doc], schema)
    cfg = spert.TrainConfig(negative_entity_count=6, negative_relation_count=4, seed=seed)
    enc_cfg = EncoderConfig(dim=16, heads=2, ff_dim=24, layers=2, max_length=64)
    with seeded_init(seed):
        sp = spert.build_model(ContextEncoder(vocab, enc_cfg), schema, cfg).double()
        bm = baseline.BertMulti(ContextEncoder(vocab, enc_cfg), schema, cfg.dropout).double()
    # random, non-zero heads so every group carries signal
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in (sp, bm):
            for p in m.parameters():
                if p.dim() == 1 and p.shape[0] > 0:
                    p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    sp.eval()
    bm.eval()
    insts = sentence_instances([doc], sp.encoder)
    samples = [spert.sample_training_batch(i, cfg, random.Random(seed), schema) for i in insts]
    rels = [r for i in insts for r in baseline.training_relations(i, bm, cfg, random.Random(seed))]

    def spert_loss():
        return spert.batch_loss(sp, insts, samples)

    def baseline_loss():
        return baseline.batch_loss(bm, insts, rels)

    return sp, spert_loss, bm, baseline_loss
