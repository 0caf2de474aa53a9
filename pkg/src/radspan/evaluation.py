"""Scoring: entity/relation matching, P/R/F1, breakdowns and significance tests."""

from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .corpus import Document, Entity, Relation
from .schema import LabelSchema

EXACT = "exact"
OVERLAP = "overlap"
CRITERIA = (EXACT, OVERLAP)
ANATOMY = -1  # label id used when all subtypes are collapsed into one


@dataclass(frozen=True)
class PRF:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def prf(tp: int, fp: int, fn: int) -> PRF:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    return PRF(tp, fp, fn)


def micro_average(counts: Iterable[PRF]) -> PRF:
    total = PRF()
    for c in counts:
        total = total + c
    return total


# --------------------------------------------------------------------------
# matching


def _overlap(a: Entity, b: Entity) -> int:
    if a.sentence_index != b.sentence_index:
        return 0
    return max(0, min(a.end, b.end) - max(a.start, b.start) + 1)


def equivalent(gold: Entity, pred: Entity, criterion: str) -> bool:
    if gold.label != pred.label or gold.sentence_index != pred.sentence_index:
        return False
    if criterion == EXACT:
        return gold.span == pred.span
    if criterion == OVERLAP:
        return _overlap(gold, pred) > 0
    raise ValueError(f"unknown criterion {criterion!r}")


def _max_matching(n_gold: int, candidates: Sequence[Sequence[int]]) -> dict[int, int]:
    """Augmenting-path bipartite matching.

    Gold items are visited in index order and try their candidates in the
    given preference order, so with no contention every gold item gets its
    first choice; contention is resolved by augmenting paths, which makes
    the result a maximum matching.
    """
    owner: dict[int, int] = {}

    def augment(g, seen):
        for p in candidates[g]:
            if p in seen:
                continue
            seen.add(p)
            if p not in owner or augment(owner[p], seen):
                owner[p] = g
                return True
        return False

    for g in range(n_gold):
        augment(g, set())
    return {g: p for p, g in owner.items()}


@dataclass
class Matching:
    pairs: list[tuple[int, int]]  # (gold index, pred index)
    unmatched_gold: list[int]
    unmatched_pred: list[int]

    def gold_to_pred(self) -> dict[int, int]:
        return dict(self.pairs)


def match_entities(gold: Sequence[Entity], pred: Sequence[Entity], criterion: str) -> Matching:
    """One-to-one matching of gold to predicted entities.

    Gold entities are taken in position order; each prefers predictions with
    the largest token overlap, then the earliest prediction.
    """
    g_order = sorted(range(len(gold)), key=lambda i: gold[i])
    p_rank = {p: r for r, p in enumerate(sorted(range(len(pred)), key=lambda i: pred[i]))}
    cands = []
    for g in g_order:
        ok = [p for p in range(len(pred)) if equivalent(gold[g], pred[p], criterion)]
        ok.sort(key=lambda p: (-_overlap(gold[g], pred[p]), p_rank[p]))
        cands.append(ok)
    found = _max_matching(len(g_order), cands)
    pairs = sorted((g_order[k], p) for k, p in found.items())
    mg = {g for g, _ in pairs}
    mp = {p for _, p in pairs}
    return Matching(
        pairs,
        [g for g in range(len(gold)) if g not in mg],
        [p for p in range(len(pred)) if p not in mp],
    )


def match_relations(gold: Sequence[Relation], pred: Sequence[Relation], entity_matching: Matching) -> Matching:
    """Relations match when both endpoints are matched to each other and labels agree."""
    g2p = entity_matching.gold_to_pred()
    cands = []
    for r in gold:
        cands.append([
            k for k, q in enumerate(pred)
            if q.label == r.label and g2p.get(r.head) == q.head and g2p.get(r.tail) == q.tail
        ])
    found = _max_matching(len(gold), cands)
    pairs = sorted(found.items())
    mg = {g for g, _ in pairs}
    mp = {p for _, p in pairs}
    return Matching(pairs, [g for g in range(len(gold)) if g not in mg],
                    [p for p in range(len(pred)) if p not in mp])


def collapse_anatomy(entities: Sequence[Entity], schema: LabelSchema) -> list[Entity]:
    return [
        Entity(e.sentence_index, e.start, e.end, ANATOMY) if schema.is_subtype(e.label) else e
        for e in entities
    ]


def label_counts(gold: Sequence[Entity], pred: Sequence[Entity], m: Matching) -> dict[int, PRF]:
    tp, fp, fn = Counter(), Counter(), Counter()
    for g, _ in m.pairs:
        tp[gold[g].label] += 1
    for g in m.unmatched_gold:
        fn[gold[g].label] += 1
    for p in m.unmatched_pred:
        fp[pred[p].label] += 1
    return {lab: PRF(tp[lab], fp[lab], fn[lab]) for lab in set(tp) | set(fp) | set(fn)}


# --------------------------------------------------------------------------
# breakdowns


def confusion_pairs(gold: Sequence[Entity], pred: Sequence[Entity], schema: LabelSchema) -> list[tuple[tuple[str, str], int]]:
    """(gold subtype, predicted subtype) counts over same-span pairs with different labels."""
    by_span: dict[tuple, list[int]] = {}
    for i, p in enumerate(pred):
        by_span.setdefault((p.sentence_index, p.start, p.end), []).append(i)
    counts: Counter = Counter()
    for g in gold:
        slot = by_span.get((g.sentence_index, g.start, g.end))
        if not slot:
            continue
        p = pred[slot.pop(0)]
        if g.label != p.label and schema.is_subtype(g.label) and schema.is_subtype(p.label):
            counts[(schema.span_labels[g.label], schema.span_labels[p.label])] += 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def error_share(confusion: Sequence[tuple[tuple[str, str], int]], labels: Iterable[str]) -> float:
    """Fraction of confusion errors with a gold or predicted label in ``labels``."""
    labels = set(labels)
    total = sum(n for _, n in confusion)
    if not total:
        return 0.0
    involving = sum(n for (g, p), n in confusion if g in labels or p in labels)
    return involving / total


def length_bin(length: int, max_bin: int) -> int:
    return min(length, max_bin + 1)


def recall_by_length(gold: Sequence[Entity], pred: Sequence[Entity], criterion: str,
                     max_bin: int = 10, keep: Callable[[Entity], bool] | None = None) -> dict[int, tuple[int, int]]:
    """(matched, total) per gold span length; lengths above ``max_bin`` share bin ``max_bin + 1``."""
    m = match_entities(gold, pred, criterion)
    matched = {g for g, _ in m.pairs}
    bins: dict[int, list[int]] = {}
    for i, g in enumerate(gold):
        if keep is not None and not keep(g):
            continue
        slot = bins.setdefault(length_bin(g.length, max_bin), [0, 0])
        slot[0] += i in matched
        slot[1] += 1
    return {k: (v[0], v[1]) for k, v in sorted(bins.items())}


def merge_bins(parts: Iterable[dict[int, tuple[int, int]]]) -> dict[int, tuple[int, int]]:
    out: dict[int, list[int]] = {}
    for part in parts:
        for k, (a, b) in part.items():
            slot = out.setdefault(k, [0, 0])
            slot[0] += a
            slot[1] += b
    return {k: (v[0], v[1]) for k, v in sorted(out.items())}


# --------------------------------------------------------------------------
# whole-corpus report


@dataclass
class EvalReport:
    schema: LabelSchema
    # criterion -> row name -> PRF; rows: Finding, Anatomy, each subtype, "Subtype (micro)"
    entities: dict[str, dict[str, PRF]] = field(default_factory=dict)
    # criterion -> {"subtype": PRF, "anatomy": PRF}
    relations: dict[str, dict[str, PRF]] = field(default_factory=dict)
    # criterion -> group -> bin -> (matched, total)
    length_recall: dict[str, dict[str, dict[int, tuple[int, int]]]] = field(default_factory=dict)
    confusion: list[tuple[tuple[str, str], int]] = field(default_factory=list)

    def span_micro_f1(self, criterion: str) -> float:
        return self.entities[criterion]["Subtype (micro)"].f1

    def subtype_rows(self, criterion: str) -> dict[str, PRF]:
        return {k: v for k, v in self.entities[criterion].items() if k in self.schema.subtypes}

    def to_dict(self) -> dict:
        return {
            "entities": {c: {k: v.to_dict() for k, v in rows.items()} for c, rows in self.entities.items()},
            "relations": {c: {k: v.to_dict() for k, v in rows.items()} for c, rows in self.relations.items()},
            "length_recall": {
                c: {g: {str(b): {"matched": m, "total": t, "recall": m / t if t else 0.0}
                        for b, (m, t) in bins.items()} for g, bins in groups.items()}
                for c, groups in self.length_recall.items()
            },
            "confusion": [{"gold": g, "pred": p, "count": n} for (g, p), n in self.confusion],
        }


def evaluate(gold_docs: Sequence[Document], pred_docs: Sequence[Document], schema: LabelSchema,
             max_bin: int = 10) -> EvalReport:
    """Score predicted documents against gold, pairing documents by id."""
    preds = {d.id: d for d in pred_docs}
    report = EvalReport(schema)
    for criterion in CRITERIA:
        by_label: Counter = Counter()
        rows: dict[int, PRF] = {}
        anatomy = PRF()
        rel_sub = PRF()
        rel_anat = PRF()
        bins = {"Finding": [], "Anatomy": [], "Subtype": []}
        for gold in gold_docs:
            pred = preds.get(gold.id)
            p_ents = pred.entities if pred else ()
            p_rels = pred.relations if pred else ()
            m = match_entities(gold.entities, p_ents, criterion)
            for lab, c in label_counts(gold.entities, p_ents, m).items():
                rows[lab] = rows.get(lab, PRF()) + c
            rm = match_relations(gold.relations, p_rels, m)
            rel_sub = rel_sub + PRF(len(rm.pairs), len(rm.unmatched_pred), len(rm.unmatched_gold))

            g_col = collapse_anatomy(gold.entities, schema)
            p_col = collapse_anatomy(p_ents, schema)
            mc = match_entities(g_col, p_col, criterion)
            anatomy = anatomy + label_counts(g_col, p_col, mc).get(ANATOMY, PRF())
            rmc = match_relations(gold.relations, p_rels, mc)
            rel_anat = rel_anat + PRF(len(rmc.pairs), len(rmc.unmatched_pred), len(rmc.unmatched_gold))

            bins["Finding"].append(recall_by_length(
                gold.entities, p_ents, criterion, max_bin, lambda e: e.label == schema.finding_index))
            bins["Subtype"].append(recall_by_length(
                gold.entities, p_ents, criterion, max_bin, lambda e: schema.is_subtype(e.label)))
            bins["Anatomy"].append(recall_by_length(
                g_col, p_col, criterion, max_bin, lambda e: e.label == ANATOMY))
        table: dict[str, PRF] = {"Finding": rows.get(schema.finding_index, PRF()), "Anatomy": anatomy}
        for lab in sorted(rows):
            if schema.is_subtype(lab):
                table[schema.span_labels[lab]] = rows[lab]
        table["Subtype (micro)"] = micro_average(rows[l] for l in rows if schema.is_subtype(l))
        report.entities[criterion] = table
        report.relations[criterion] = {"subtype": rel_sub, "anatomy": rel_anat}
        report.length_recall[criterion] = {g: merge_bins(v) for g, v in bins.items()}

    conf = []
    for gold in gold_docs:
        pred = preds.get(gold.id)
        if pred:
            conf.append(confusion_pairs(gold.entities, pred.entities, schema))
    total: Counter = Counter()
    for part in conf:
        for k, n in part:
            total[k] += n
    report.confusion = sorted(total.items(), key=lambda kv: (-kv[1], kv[0]))
    return report


def format_report(report: EvalReport, criteria: Sequence[str] = CRITERIA) -> str:
    lines = []
    for criterion in criteria:
        lines.append(f"== entities ({criterion}) ==")
        lines.append(f"{'label':<20}{'tp':>7}{'fp':>7}{'fn':>7}{'P':>8}{'R':>8}{'F1':>8}")
        for name, c in report.entities[criterion].items():
            lines.append(f"{name:<20}{c.tp:>7}{c.fp:>7}{c.fn:>7}{c.precision:>8.4f}{c.recall:>8.4f}{c.f1:>8.4f}")
        lines.append(f"== relations ({criterion}) ==")
        for name, c in report.relations[criterion].items():
            label = f"Finding-{name.capitalize()}"
            lines.append(f"{label:<20}{c.tp:>7}{c.fp:>7}{c.fn:>7}{c.precision:>8.4f}{c.recall:>8.4f}{c.f1:>8.4f}")
        lines.append(f"== recall by span length ({criterion}) ==")
        for group, bins in report.length_recall[criterion].items():
            cells = " ".join(f"{k}:{m}/{t}" for k, (m, t) in bins.items())
            lines.append(f"{group:<10}{cells}")
    lines.append("== confused subtypes ==")
    for (g, p), n in report.confusion[:20]:
        lines.append(f"{g:<20}{p:<20}{n:>5}")
    return "\n".join(lines) + "\n"


def plot_series(report: EvalReport) -> dict:
    """(x, y) series for recall-vs-length plots."""
    out = {}
    for criterion, groups in report.length_recall.items():
        for group, bins in groups.items():
            xs = list(bins)
            ys = [m / t if t else 0.0 for m, t in bins.values()]
            out[f"{group}/{criterion}"] = {"x": xs, "y": ys}
    return out


# --------------------------------------------------------------------------
# statistics


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Survival function of Student's t distribution."""
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def welch_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided Welch t-test; returns (t, p)."""
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    ma, mb = statistics.fmean(a), statistics.fmean(b)
    va = statistics.variance(a) / len(a)
    vb = statistics.variance(b) / len(b)
    if va + vb == 0:
        raise ValueError("both samples have zero variance")
    t = (ma - mb) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va * va / (len(a) - 1) + vb * vb / (len(b) - 1))
    p = min(1.0, 2.0 * t_sf(abs(t), df))
    return t, p


def aggregate_runs(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single run)."""
    if not values:
        raise ValueError("no runs to aggregate")
    mean = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, sd
