"""The nine acceptance criteria, each at its stated tolerance.

Each test records a one-line PASS/FAIL summary that is printed at the end of
the pytest session (see conftest.py).  The learning criteria train on the
default synthetic corpus and take several minutes on a single CPU thread.
"""

import random
import statistics
import time

import pytest
import torch
from scipy import stats as sps

from radspan.checkpoint import load_checkpoint, save_checkpoint
from radspan.corpus import read_corpus, serialize_standoff, split_corpus, write_corpus
from radspan.evaluation import (
    EXACT,
    OVERLAP,
    aggregate_runs,
    equivalent,
    evaluate,
    match_entities,
    match_relations,
    merge_bins,
)
from radspan.corpus import Entity, Relation
from radspan.experiments import extraction_metrics, fit, load_config, predict_documents, repeat
from radspan.spert import enumerate_spans
from radspan.synth import generate

from conftest import record
from helpers import double_models
from oracles import brute_max_matching, count_spans_brute, finite_difference_check


@pytest.fixture(scope="module")
def exp():
    return load_config(None)


@pytest.fixture(scope="module")
def default_corpus(exp, schema):
    docs, book = generate(exp.grammar_config(), exp.n_documents, schema)
    return docs, book


@pytest.fixture(scope="module")
def spert_run(exp, schema, default_corpus):
    docs, _ = default_corpus
    train, _, test = split_corpus(docs, exp.ratios(), exp.split_seed())
    t0 = time.perf_counter()
    model, cfg, history = fit("spert", train, schema, exp, 0)
    preds = predict_documents(model, "spert", test, cfg)
    elapsed = time.perf_counter() - t0
    return model, cfg, test, preds, evaluate(test, preds, schema), elapsed, history


# 1 -------------------------------------------------------------------------------

def _random_sentence(rng):
    n_g, n_p = rng.randint(0, 8), rng.randint(0, 8)
    span = lambda: (lambda a: Entity(0, a, a + rng.randint(0, 3), rng.randint(1, 3)))(rng.randint(0, 12))
    return [span() for _ in range(n_g)], [span() for _ in range(n_p)]


def test_criterion_1_matching_oracle():
    rng = random.Random(2024)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        gold, pred = _random_sentence(rng)
        for crit in (EXACT, OVERLAP):
            m = match_entities(gold, pred, crit)
            want = brute_max_matching(len(gold), len(pred), lambda i, j: equivalent(gold[i], pred[j], crit))
            bad += len(m.pairs) != want
            # relations over the realised entity matching
            gr = [Relation(rng.randrange(len(gold)), 1, rng.randrange(len(gold)))
                  for _ in range(rng.randint(0, 4))] if gold else []
            pr = [Relation(rng.randrange(len(pred)), 1, rng.randrange(len(pred)))
                  for _ in range(rng.randint(0, 4))] if pred else []
            g2p = m.gold_to_pred()
            ok = lambda i, j: g2p.get(gr[i].head) == pr[j].head and g2p.get(gr[i].tail) == pr[j].tail
            bad += len(match_relations(gr, pr, m).pairs) != brute_max_matching(len(gr), len(pr), ok)
    elapsed = time.perf_counter() - t0
    passed = bad == 0 and elapsed < 60
    record(1, passed, f"{bad} discrepancies over 1000 instances x 2 criteria (entities+relations), {elapsed:.1f}s")
    assert passed


# 2 -------------------------------------------------------------------------------

def test_criterion_2_gradients(schema):
    t0 = time.perf_counter()
    sp, sloss, bm, bloss = double_models(schema)
    worst = {}
    worst.update({f"spert.{k}": v for k, v in finite_difference_check(
        sloss, dict(sp.named_parameters()), torch.Generator().manual_seed(1)).items()})
    worst.update({f"bert-multi.{k}": v for k, v in finite_difference_check(
        bloss, dict(bm.named_parameters()), torch.Generator().manual_seed(2)).items()})
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    groups = {"encoder", "widths", "span_head", "rel_head", "tagger"}
    covered = {g for g in groups if any(f".{g}." in k for k in worst)}
    passed = err < 1e-4 and elapsed < 120 and covered == groups
    record(2, passed, f"max relative error {err:.2e} ({name}) over {len(worst)} tensors, {elapsed:.1f}s")
    assert covered == groups
    assert passed


# 3 -------------------------------------------------------------------------------

def test_criterion_3_enumeration():
    bad = []
    for n in range(51):
        for L in range(1, 11):
            formula = sum(n - k + 1 for k in range(1, min(L, n) + 1))
            got = len(enumerate_spans(n, L))
            if not got == formula == count_spans_brute(n, L):
                bad.append((n, L))
    record(3, not bad, f"{51 * 10 - len(bad)}/510 (n, L) cells exact")
    assert not bad


# 4 -------------------------------------------------------------------------------

def test_criterion_4_spert_learning(spert_run):
    _, cfg, _, _, report, elapsed, history = spert_run
    m = extraction_metrics(report)
    passed = (m["finding_f1"] >= 0.95 and m["subtype_f1"] >= 0.95 and m["relation_f1"] >= 0.90
              and len(history) <= 20 and elapsed < 15 * 60)
    record(4, passed, f"Finding F1 {m['finding_f1']:.4f}, subtype micro-F1 {m['subtype_f1']:.4f}, "
                      f"relation F1 {m['relation_f1']:.4f} after {len(history)} epochs, {elapsed:.0f}s")
    assert passed


# 5 -------------------------------------------------------------------------------

def test_criterion_5_spert_vs_baseline(exp, schema, default_corpus):
    docs, _ = default_corpus
    t0 = time.perf_counter()
    res = repeat(["spert", "bert-multi"], 10, schema, exp, seed=0, docs=docs)
    elapsed = time.perf_counter() - t0
    sp, bm = res.summary["spert"], res.summary["bert-multi"]
    rel = next(t for t in res.tests if t["metric"] == "relation_f1")
    gap = next(t for t in res.tests if t["metric"] == "overlap_gap")
    better = sp["relation_f1"][0] >= bm["relation_f1"][0]
    wider = bm["overlap_gap"][0] > sp["overlap_gap"][0]
    fmt = lambda t: f"t={t['t']:.2f} p={t['p']:.3g}" if t["p"] is not None else t["note"]
    record(5, better and wider,
           f"relation F1 SpERT {sp['relation_f1'][0]:.4f}±{sp['relation_f1'][1]:.4f} vs "
           f"BERT-multi {bm['relation_f1'][0]:.4f}±{bm['relation_f1'][1]:.4f} (Welch {fmt(rel)}); "
           f"overlap-exact gap {sp['overlap_gap'][0]:.4f} vs {bm['overlap_gap'][0]:.4f} (Welch {fmt(gap)}); "
           f"{elapsed:.0f}s")
    assert better and wider


# 6 -------------------------------------------------------------------------------

def test_criterion_6_context(exp, schema):
    res = repeat(["norm-phrase", "norm-sentence"], 10, schema, exp, seed=0, regenerate=True)
    phrase_amb = res.values("norm-phrase", "ambiguous_accuracy")
    sent_amb = res.values("norm-sentence", "ambiguous_accuracy")
    test = next(t for t in res.tests if t["metric"] == "micro_f1")
    improved = res.summary["norm-sentence"]["micro_f1"][0] > res.summary["norm-phrase"]["micro_f1"][0]
    passed = (max(phrase_amb) <= 0.6 and min(sent_amb) >= 0.95 and improved
              and test["p"] is not None and test["p"] < 0.05)
    record(6, passed,
           f"ambiguous-subset accuracy phrase max {max(phrase_amb):.3f}, sentence min {min(sent_amb):.3f}; "
           f"micro-F1 {res.summary['norm-phrase']['micro_f1'][0]:.4f} -> "
           f"{res.summary['norm-sentence']['micro_f1'][0]:.4f}, Welch p={test['p']}")
    assert passed


# 7 -------------------------------------------------------------------------------

def test_criterion_7_length_tail(spert_run, default_corpus):
    model, cfg, test, preds, report, _, _ = spert_run
    assert cfg.max_span_width == 10
    tail = {}
    for crit in (EXACT, OVERLAP):
        groups = report.length_recall[crit]
        bins = merge_bins([groups["Finding"], groups["Subtype"]])
        tail[crit] = bins.get(11, (0, 0))
    n_long = tail[EXACT][1]
    passed = n_long > 0 and tail[EXACT][0] == 0 and tail[OVERLAP][0] > 0
    record(7, passed, f"spans > 10 tokens: exact {tail[EXACT][0]}/{n_long}, any-overlap {tail[OVERLAP][0]}/{n_long}")
    assert passed


# 8 -------------------------------------------------------------------------------

def test_criterion_8_statistics():
    from radspan.evaluation import welch_ttest
    rng = random.Random(8)
    worst = 0.0
    for _ in range(20):
        a = [rng.gauss(0.85, rng.uniform(0.005, 0.05)) for _ in range(rng.randint(3, 10))]
        b = [rng.gauss(0.87, rng.uniform(0.005, 0.05)) for _ in range(rng.randint(3, 10))]
        t, p = welch_ttest(a, b)
        ref = sps.ttest_ind(a, b, equal_var=False)
        worst = max(worst, abs(t - ref.statistic), abs(p - ref.pvalue))
    vals = [0.86, 0.89, 0.87, 0.90]
    mean, sd = aggregate_runs(vals)
    hand_mean = (0.86 + 0.89 + 0.87 + 0.90) / 4
    hand_sd = (sum((v - hand_mean) ** 2 for v in vals) / 3) ** 0.5
    agg_ok = abs(mean - hand_mean) < 1e-12 and abs(sd - hand_sd) < 1e-12
    passed = worst < 1e-6 and agg_ok
    record(8, passed, f"max |t|,|p| deviation from scipy {worst:.2e} over 20 pairs; "
                      f"aggregate {mean:.4f}±{sd:.4f} vs hand {hand_mean:.4f}±{hand_sd:.4f}")
    assert passed


# 9 -------------------------------------------------------------------------------

def test_criterion_9_round_trips(tmp_path, schema, default_corpus, spert_run):
    docs, _ = default_corpus
    write_corpus(docs, tmp_path / "corpus", schema)
    back = read_corpus(tmp_path / "corpus", schema)
    standoff_ok = back == docs and all(
        (tmp_path / "corpus" / f"{d.id}.ann").read_text("utf-8") == serialize_standoff(d, schema)
        for d in back)
    write_corpus(back, tmp_path / "again", schema)
    bytes_ok = all((tmp_path / "corpus" / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
                   for f in (p.name for p in (tmp_path / "corpus").iterdir()))

    model, cfg, test, preds, _, _, _ = spert_run
    save_checkpoint(tmp_path / "m.ckpt", model, "spert", cfg, {"seed": cfg.seed})
    loaded, system, cfg2, _ = load_checkpoint(tmp_path / "m.ckpt", schema)
    tensors_ok = all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), loaded.state_dict().values()))
    preds_ok = predict_documents(loaded, system, test, cfg2) == preds and cfg2 == cfg
    passed = standoff_ok and bytes_ok and tensors_ok and preds_ok
    record(9, passed, f"standoff {len(docs)} docs value-exact={standoff_ok} byte-exact={bytes_ok}; "
                      f"checkpoint tensors exact={tensors_ok}, predictions identical={preds_ok}")
    assert passed
