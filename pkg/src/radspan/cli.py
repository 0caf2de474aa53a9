"""Command-line entry point: ``radspan <command> [options]``.

Commands: gen, stats, train, predict, score, normalize, repeat.  Every
file written starts with a provenance header (tool version, seed, config
digest, input digests); see :mod:`radspan.artifacts`.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, normalizer
from .artifacts import (
    directory_digest,
    file_digest,
    make_header,
    sha256_bytes,
    write_json,
    write_text,
)
from .checkpoint import SYSTEMS, CheckpointError, load_checkpoint, save_checkpoint
from .corpus import Document, Entity, Relation, StandoffError, corpus_stats, read_corpus, split_corpus
from .evaluation import CRITERIA, evaluate, format_report, plot_series
from .experiments import (
    NORM_MODES,
    ExperimentConfig,
    fit,
    format_repeat,
    load_config,
    predict_documents,
    repeat,
)
from .schema import LabelSchema, SchemaError, load_schema
from .synth import generate, write_generated

log = logging.getLogger("radspan")

SPLITS = ("train", "dev", "test", "all")
PRED_COLUMNS = ("doc_id", "type", "id", "sentence", "span", "label", "surface", "system")


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# shared plumbing


def _schema(args) -> tuple[LabelSchema, str]:
    if args.schema:
        return load_schema(args.schema), file_digest(args.schema)
    schema = load_schema(None)
    return schema, sha256_bytes(repr(schema.to_dict()).encode("utf-8"))


def _out(args) -> Path:
    if not args.out:
        raise CliError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data(args) -> Path:
    if not args.data:
        raise CliError("--data is required")
    path = Path(args.data)
    if not path.is_dir():
        raise CliError(f"data directory {path} does not exist")
    return path


def _split(docs: list[Document], exp: ExperimentConfig, which: str) -> list[Document]:
    if which == "all":
        return list(docs)
    train, dev, test = split_corpus(docs, exp.ratios(), exp.split_seed())
    return {"train": train, "dev": dev, "test": test}[which]


# --------------------------------------------------------------------------
# prediction records


def write_predictions(path: Path, header: dict, docs: Sequence[Document], schema: LabelSchema, system: str):
    rows = ["\t".join(PRED_COLUMNS)]
    for doc in docs:
        for i, e in enumerate(doc.entities):
            rows.append("\t".join([doc.id, "entity", f"T{i + 1}", str(e.sentence_index), f"{e.start}-{e.end}",
                                   schema.span_labels[e.label], doc.surface(e), system]))
        for i, r in enumerate(doc.relations):
            head = doc.entities[r.head]
            rows.append("\t".join([doc.id, "relation", f"R{i + 1}", str(head.sentence_index),
                                   f"T{r.head + 1}>T{r.tail + 1}", schema.relation_labels[r.label], "", system]))
    write_text(path, header, "\n".join(rows) + "\n")


def read_predictions(path: str | Path, gold: Sequence[Document], schema: LabelSchema) -> list[Document]:
    """Rebuild prediction Documents over the gold texts from a records file."""
    ents: dict[str, list[Entity]] = {d.id: [] for d in gold}
    ids: dict[str, dict[str, int]] = {d.id: {} for d in gold}
    rels: dict[str, list[Relation]] = {d.id: [] for d in gold}
    lines = [l for l in Path(path).read_text("utf-8").splitlines() if l and not l.startswith("#")]
    if not lines or tuple(lines[0].split("\t")) != PRED_COLUMNS:
        raise CliError(f"{path}: missing prediction column header")
    for n, line in enumerate(lines[1:], start=2):
        f = line.split("\t")
        if len(f) != len(PRED_COLUMNS):
            raise CliError(f"{path}:{n}: expected {len(PRED_COLUMNS)} fields")
        doc_id, kind, rid, sent, span, label = f[:6]
        if doc_id not in ents:
            raise CliError(f"{path}:{n}: document {doc_id} is not in the gold split")
        if kind == "entity":
            a, b = (int(x) for x in span.split("-"))
            ids[doc_id][rid] = len(ents[doc_id])
            ents[doc_id].append(Entity(int(sent), a, b, schema.span_index(label)))
        elif kind == "relation":
            h, t = span.split(">")
            try:
                rels[doc_id].append(Relation(ids[doc_id][h], schema.relation_index(label), ids[doc_id][t]))
            except KeyError as e:
                raise CliError(f"{path}:{n}: relation references unknown entity {e}") from None
        else:
            raise CliError(f"{path}:{n}: unknown record type {kind!r}")
    return [Document(d.id, d.text, d.sentences, tuple(ents[d.id]), tuple(rels[d.id])) for d in gold]


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> None:
    schema, schema_digest = _schema(args)
    exp = load_config(args.config)
    grammar = exp.grammar_config()
    if args.seed is not None:
        grammar.seed = args.seed
    n = args.n_docs if args.n_docs is not None else exp.n_documents
    docs, book = generate(grammar, n, schema)
    out = _out(args)
    header = make_header(grammar.seed, {"grammar": grammar.to_dict(), "n_documents": n}, {"schema": schema_digest})
    write_generated(docs, book, out, schema, header)
    print(f"wrote {len(docs)} documents to {out}")


def cmd_stats(args) -> None:
    schema, schema_digest = _schema(args)
    data = _data(args)
    docs = read_corpus(data, schema)
    st = corpus_stats(docs, schema)
    out = _out(args)
    header = make_header(None, {}, {"data": directory_digest(data), "schema": schema_digest})
    write_json(out / "stats.json", header, st.to_dict())
    lines = [f"documents  {st.documents}", f"sentences  {st.sentences}", f"tokens     {st.tokens}",
             f"entities   {st.entities}", f"anatomy    {st.anatomy_entities(schema)}",
             f"relations  {st.relations}", "", f"{'label':<20}{'gold':>8}{'unique':>8}"]
    for name, count in st.entity_counts.items():
        lines.append(f"{name:<20}{count:>8}{st.unique_spans.get(name, ''):>8}")
    write_text(out / "stats.txt", header, "\n".join(lines) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")


def cmd_train(args) -> None:
    schema, schema_digest = _schema(args)
    exp = load_config(args.config)
    data = _data(args)
    docs = read_corpus(data, schema)
    train_docs, dev_docs, _ = split_corpus(docs, exp.ratios(), exp.split_seed())
    cfg = exp.train_config(args.system, args.seed)
    dev = dev_docs if args.system not in NORM_MODES else None
    model, cfg, history = fit(args.system, train_docs, schema, exp, cfg.seed, dev)
    out = _out(args)
    config = {"experiment": exp.to_dict(), "system": args.system, "resolved": cfg.to_dict()}
    header = make_header(cfg.seed, config, {"data": directory_digest(data), "schema": schema_digest},
                         system=args.system)
    save_checkpoint(out / "model.ckpt", model, args.system, cfg, header)
    cols = sorted({k for row in history for k in row} - {"epoch"})
    body = ["\t".join(["epoch", *cols])]
    for row in history:
        body.append("\t".join([str(row["epoch"]), *(f"{row[c]:.6f}" if c in row else "" for c in cols)]))
    write_text(out / "train_log.tsv", header, "\n".join(body) + "\n")
    print(f"trained {args.system}: final loss {history[-1]['loss']:.6f}; checkpoint {out / 'model.ckpt'}")


def _load(args, schema):
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    return load_checkpoint(args.checkpoint, schema)


def cmd_predict(args) -> None:
    schema, schema_digest = _schema(args)
    exp = load_config(args.config)
    model, system, cfg, meta = _load(args, schema)
    if system in NORM_MODES:
        raise CliError(f"{system} checkpoints label gold phrases; use the normalize command")
    data = _data(args)
    docs = _split(read_corpus(data, schema), exp, args.split)
    preds = predict_documents(model, system, docs, cfg)
    out = _out(args)
    header = make_header(cfg.seed, {"experiment": exp.to_dict(), "split": args.split},
                         {"data": directory_digest(data), "schema": schema_digest,
                          "checkpoint": file_digest(args.checkpoint)}, system=system)
    write_predictions(out / "predictions.tsv", header, preds, schema, system)
    n_e = sum(len(d.entities) for d in preds)
    n_r = sum(len(d.relations) for d in preds)
    print(f"{system}: {n_e} entities, {n_r} relations over {len(preds)} documents")


def cmd_score(args) -> None:
    schema, schema_digest = _schema(args)
    exp = load_config(args.config)
    if not args.pred:
        raise CliError("--pred is required")
    data = _data(args)
    gold = _split(read_corpus(data, schema), exp, args.split)
    preds = read_predictions(args.pred, gold, schema)
    report = evaluate(gold, preds, schema)
    criteria = CRITERIA if args.criterion == "both" else (args.criterion,)
    out = _out(args)
    header = make_header(None, {"experiment": exp.to_dict(), "split": args.split, "criterion": args.criterion},
                         {"data": directory_digest(data), "schema": schema_digest,
                          "predictions": file_digest(args.pred)})
    payload = report.to_dict()
    for section in ("entities", "relations", "length_recall"):
        payload[section] = {c: v for c, v in payload[section].items() if c in criteria}
    write_json(out / "report.json", header, payload)
    text = format_report(report, criteria)
    write_text(out / "report.txt", header, text)
    write_json(out / "plot_data.json", header, {
        "recall_by_length": {k: v for k, v in plot_series(report).items() if k.split("/")[1] in criteria},
        "unique_spans": corpus_stats(gold, schema).unique_spans,
    })
    sys.stdout.write(text)


def cmd_normalize(args) -> None:
    schema, schema_digest = _schema(args)
    exp = load_config(args.config)
    model, system, cfg, meta = _load(args, schema)
    if system not in NORM_MODES:
        raise CliError(f"{system} is not a normalization checkpoint")
    if NORM_MODES[system] != args.context:
        raise CliError(f"checkpoint was trained for {NORM_MODES[system]!r} context, not {args.context!r}")
    data = _data(args)
    docs = _split(read_corpus(data, schema), exp, args.split)
    examples = normalizer.anatomy_examples(docs, schema, args.context)
    predicted = normalizer.predict(model, examples)
    rep = normalizer.score(examples, predicted, schema)
    out = _out(args)
    header = make_header(cfg.seed, {"experiment": exp.to_dict(), "split": args.split, "context": args.context},
                         {"data": directory_digest(data), "schema": schema_digest,
                          "checkpoint": file_digest(args.checkpoint)}, system=system)
    rows = ["doc_id\tsentence\tspan\tphrase\tgold\tpredicted"]
    for ex, p in zip(examples, predicted):
        a, b = ex.span
        rows.append(f"{ex.doc_id}\t{ex.sentence_index}\t{a}-{b}\t{ex.surface}\t"
                    f"{schema.span_labels[ex.label]}\t{schema.span_labels[p]}")
    write_text(out / "normalize.tsv", header, "\n".join(rows) + "\n")
    write_json(out / "normalize_report.json", header, rep.to_dict())
    print(f"{args.context}: accuracy {rep.accuracy:.4f}  micro-F1 {rep.micro.f1:.4f}  ({len(examples)} phrases)")


def cmd_repeat(args) -> None:
    schema, schema_digest = _schema(args)
    exp = load_config(args.config)
    systems = [s.strip() for s in args.systems.split(",") if s.strip()]
    for s in systems:
        if s not in SYSTEMS:
            raise CliError(f"unknown system {s!r}")
    seed = args.seed if args.seed is not None else 0
    inputs = {"schema": schema_digest}
    if args.synthetic:
        result = repeat(systems, args.runs, schema, exp, seed, regenerate=True)
    else:
        data = _data(args)
        inputs["data"] = directory_digest(data)
        result = repeat(systems, args.runs, schema, exp, seed, docs=read_corpus(data, schema))
    out = _out(args)
    config = {"experiment": exp.to_dict(), "systems": systems, "runs": args.runs, "synthetic": args.synthetic}
    header = make_header(seed, config, inputs)
    metrics = sorted({k for r in result.rows for k in r} - {"run", "seed", "system"})
    body = ["\t".join(["run", "seed", "system", *metrics])]
    for r in result.rows:
        body.append("\t".join([str(r["run"]), str(r["seed"]), r["system"],
                               *(f"{r[m]:.6f}" if m in r else "" for m in metrics)]))
    write_text(out / "runs.tsv", header, "\n".join(body) + "\n")
    text = format_repeat(result)
    write_text(out / "summary.txt", header, text)
    write_json(out / "summary.json", header, result.to_dict())
    sys.stdout.write(text)


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="directory of <id>.txt/<id>.ann standoff pairs")
    common.add_argument("--schema", help="label schema JSON (default: bundled 58-label schema)")
    common.add_argument("--config", help="experiment config JSON overlaid on the bundled defaults")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="radspan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"radspan {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic annotated corpus")
    g.add_argument("--n-docs", type=int, help="number of documents (default: config n_documents)")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("stats", parents=[common], help="corpus statistics")
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", parents=[common], help="train a system on the training split")
    t.add_argument("--system", required=True, choices=SYSTEMS)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="write prediction records")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--split", choices=SPLITS, default="test")
    pr.set_defaults(func=cmd_predict)

    sc = sub.add_parser("score", parents=[common], help="score prediction records against gold")
    sc.add_argument("--pred", required=True, help="predictions.tsv from the predict command")
    sc.add_argument("--criterion", choices=(*CRITERIA, "both"), default="both")
    sc.add_argument("--split", choices=SPLITS, default="test")
    sc.set_defaults(func=cmd_score)

    n = sub.add_parser("normalize", parents=[common], help="label gold anatomy phrases with subtypes")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--context", choices=normalizer.MODES, required=True)
    n.add_argument("--split", choices=SPLITS, default="test")
    n.set_defaults(func=cmd_normalize)

    r = sub.add_parser("repeat", parents=[common], help="K seeded train+score cycles with Welch tests")
    r.add_argument("--runs", type=int, default=10)
    r.add_argument("--systems", default="spert,bert-multi", help="comma-separated systems to compare")
    r.add_argument("--synthetic", action="store_true",
                   help="draw a fresh synthetic corpus per run instead of reading --data")
    r.set_defaults(func=cmd_repeat)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CliError, CheckpointError, SchemaError, StandoffError, ValueError, OSError) as e:
        print(f"radspan: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
