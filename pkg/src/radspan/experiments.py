"""Experiment configuration and the train/score cycles behind the CLI.

A config file is JSON::

    {
      "train":   {...TrainConfig fields applied to every system...},
      "systems": {"bert-multi": {...}, "norm-phrase": {...}, ...},
      "encoder": {...EncoderConfig fields...},
      "vocab_size": 2000,
      "split": {"ratios": [0.7, 0.1, 0.2], "seed": 0},
      "grammar": {...GrammarConfig fields...},
      "n_documents": 400
    }

Every key is optional; omitted keys take the bundled defaults.  Each system
starts from its own defaults (batch 50 for the tagging baseline; dropout
0.05, batch 50, 15 epochs for normalization), then ``train``, then its
``systems`` entry.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Sequence

from . import baseline, normalizer, spert
from .checkpoint import SYSTEMS, new_model
from .corpus import Document, split_corpus
from .encoder import EncoderConfig, build_vocab
from .evaluation import aggregate_runs, evaluate, welch_ttest
from .schema import LabelSchema
from .synth import GrammarConfig, generate
from .spert import TrainConfig

log = logging.getLogger(__name__)

NORM_MODES = {"norm-phrase": normalizer.PHRASE, "norm-sentence": normalizer.SENTENCE}
EXTRACTION_METRICS = ("finding_f1", "subtype_f1", "relation_f1", "relation_f1_overlap", "overlap_gap")
NORM_METRICS = ("micro_f1", "ambiguous_accuracy")

_TOP_KEYS = {"train", "systems", "encoder", "vocab_size", "split", "grammar", "n_documents"}


@dataclass
class ExperimentConfig:
    train: dict = field(default_factory=dict)
    systems: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    vocab_size: int = 2000
    split: dict = field(default_factory=lambda: {"ratios": [0.7, 0.1, 0.2], "seed": 0})
    grammar: dict = field(default_factory=dict)
    n_documents: int = 400

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - _TOP_KEYS
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(data))
        for system in cfg.systems:
            if system not in SYSTEMS:
                raise ValueError(f"config names unknown system {system!r}")
        cfg.encoder_config()  # validate eagerly
        cfg.grammar_config()
        for system in SYSTEMS:
            cfg.train_config(system)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.encoder)

    def grammar_config(self) -> GrammarConfig:
        return GrammarConfig.from_dict(self.grammar)

    def ratios(self) -> tuple[float, float, float]:
        return tuple(self.split.get("ratios", (0.7, 0.1, 0.2)))

    def split_seed(self) -> int:
        return int(self.split.get("seed", 0))

    def train_config(self, system: str, seed: int | None = None) -> TrainConfig:
        if system not in SYSTEMS:
            raise ValueError(f"unknown system {system!r}")
        base = TrainConfig().to_dict()
        if system == "bert-multi":
            base = baseline.baseline_config().to_dict()
        elif system in NORM_MODES:
            base = normalizer.normalizer_config().to_dict()
        base.update(self.train)
        base.update(self.systems.get(system, {}))
        if seed is not None:
            base["seed"] = seed
        return TrainConfig.from_dict(base)


def bundled_config_dict() -> dict:
    return json.loads(resources.files("radspan.data").joinpath("default_config.json").read_text("utf-8"))


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Bundled defaults, overlaid section by section with ``path`` if given."""
    data = bundled_config_dict()
    if path is not None:
        user = json.loads(Path(path).read_text("utf-8"))
        if not isinstance(user, dict):
            raise ValueError("config file must hold a JSON object")
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# single runs


def sentence_tokens(docs: Sequence[Document]):
    for doc in docs:
        for sent in doc.sentences:
            yield sent.token_texts(doc.text)


def fit(system: str, train_docs: Sequence[Document], schema: LabelSchema, exp: ExperimentConfig,
        seed: int | None = None, dev_docs: Sequence[Document] | None = None):
    """Build a vocabulary from ``train_docs`` and train ``system``; returns (model, config, history)."""
    cfg = exp.train_config(system, seed)
    vocab = build_vocab(sentence_tokens(train_docs), exp.vocab_size, schema)
    model = new_model(system, vocab, schema, cfg, exp.encoder_config())
    if system == "spert":
        history = spert.train(model, train_docs, cfg, dev_docs)
    elif system == "bert-multi":
        history = baseline.train(model, train_docs, cfg, dev_docs)
    else:
        history = normalizer.train(model, train_docs, NORM_MODES[system], cfg)
    return model, cfg, history


def predict_documents(model, system: str, docs: Sequence[Document], cfg: TrainConfig) -> list[Document]:
    if system == "spert":
        return spert.predict_documents(model, docs, cfg)
    if system == "bert-multi":
        return baseline.predict_documents(model, docs, cfg)
    raise ValueError(f"{system} is a normalization system; use normalize")


def extraction_metrics(report) -> dict[str, float]:
    exact = report.relations["exact"]["subtype"].f1
    overlap = report.relations["overlap"]["subtype"].f1
    return {
        "finding_f1": report.entities["exact"]["Finding"].f1,
        "subtype_f1": report.span_micro_f1("exact"),
        "relation_f1": exact,
        "relation_f1_overlap": overlap,
        "overlap_gap": overlap - exact,
    }


def normalization_metrics(model, system: str, docs: Sequence[Document], schema: LabelSchema,
                          ambiguous_surfaces) -> dict[str, float]:
    examples = normalizer.anatomy_examples(docs, schema, NORM_MODES[system])
    predicted = normalizer.predict(model, examples)
    rep = normalizer.score(examples, predicted, schema)
    return {
        "micro_f1": rep.micro.f1,
        "ambiguous_accuracy": normalizer.subset_accuracy(examples, predicted, ambiguous_surfaces),
    }


def run_once(system: str, train_docs, test_docs, schema: LabelSchema, exp: ExperimentConfig,
             seed: int) -> dict[str, float]:
    model, cfg, _ = fit(system, train_docs, schema, exp, seed)
    if system in NORM_MODES:
        return normalization_metrics(model, system, test_docs, schema, exp.grammar_config().ambiguous)
    return extraction_metrics(evaluate(test_docs, predict_documents(model, system, test_docs, cfg), schema))


# --------------------------------------------------------------------------
# repeated runs


@dataclass
class RepeatResult:
    systems: list[str]
    rows: list[dict]  # {"run", "seed", "system", metric: value}
    summary: dict  # system -> metric -> (mean, sd)
    tests: list[dict]  # pairwise Welch tests per shared metric

    def values(self, system: str, metric: str) -> list[float]:
        return [r[metric] for r in self.rows if r["system"] == system]

    def to_dict(self) -> dict:
        return {
            "systems": self.systems,
            "rows": self.rows,
            "summary": {s: {m: {"mean": v[0], "sd": v[1]} for m, v in ms.items()} for s, ms in self.summary.items()},
            "tests": self.tests,
        }


def metrics_for(system: str) -> tuple[str, ...]:
    return NORM_METRICS if system in NORM_MODES else EXTRACTION_METRICS


def repeat(systems: Sequence[str], runs: int, schema: LabelSchema, exp: ExperimentConfig, seed: int = 0,
           docs: Sequence[Document] | None = None, regenerate: bool = False) -> RepeatResult:
    """Train and score every system ``runs`` times with seeds ``seed .. seed+runs-1``.

    With fixed ``docs`` every run shares one split and only model seeds vary.
    With ``regenerate`` each run also draws a fresh synthetic corpus from the
    grammar with the run's seed, so data variation enters the spread as well.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if not regenerate and docs is None:
        raise ValueError("repeat needs documents unless corpora are regenerated")
    rows = []
    for k in range(runs):
        run_seed = seed + k
        if regenerate:
            grammar = exp.grammar_config()
            grammar.seed = run_seed
            corpus, _ = generate(grammar, exp.n_documents, schema)
        else:
            corpus = docs
        train_docs, _, test_docs = split_corpus(corpus, exp.ratios(), exp.split_seed())
        for system in systems:
            metrics = run_once(system, train_docs, test_docs, schema, exp, run_seed)
            row = {"run": k + 1, "seed": run_seed, "system": system, **metrics}
            log.info("run %s", row)
            rows.append(row)
    summary = {
        s: {m: aggregate_runs([r[m] for r in rows if r["system"] == s]) for m in metrics_for(s)}
        for s in systems
    }
    tests = []
    for a, b in combinations(systems, 2):
        for m in metrics_for(a):
            if m not in metrics_for(b):
                continue
            xa = [r[m] for r in rows if r["system"] == a]
            xb = [r[m] for r in rows if r["system"] == b]
            try:
                t, p = welch_ttest(xa, xb)
                tests.append({"a": a, "b": b, "metric": m, "t": t, "p": p, "significant": p < 0.05})
            except ValueError as e:
                tests.append({"a": a, "b": b, "metric": m, "t": None, "p": None, "note": str(e)})
    return RepeatResult(list(systems), rows, summary, tests)


def format_repeat(result: RepeatResult) -> str:
    lines = []
    for system in result.systems:
        metrics = metrics_for(system)
        lines.append(f"== {system} ==")
        lines.append("run  seed  " + "  ".join(f"{m:>20}" for m in metrics))
        for r in result.rows:
            if r["system"] == system:
                lines.append(f"{r['run']:>3}  {r['seed']:>4}  " + "  ".join(f"{r[m]:>20.4f}" for m in metrics))
        lines.append("mean±SD    " + "  ".join(
            f"{result.summary[system][m][0]:>11.4f}±{result.summary[system][m][1]:<8.4f}" for m in metrics))
    if result.tests:
        lines.append("== Welch t-tests (two-sided) ==")
        for t in result.tests:
            if t["p"] is None:
                lines.append(f"{t['a']} vs {t['b']} {t['metric']}: {t['note']}")
            else:
                mark = " *" if t["significant"] else ""
                lines.append(f"{t['a']} vs {t['b']} {t['metric']}: t={t['t']:.4f} p={t['p']:.4f}{mark}")
    return "\n".join(lines) + "\n"
