"""Command-line pipeline: gen-data, train, index, search, eval, bench, export-embeddings.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

from .datagen import AUGMENT_OPS, CorpusSpec, Query, Sentence, Triplet, generate_benchmark, read_jsonl, read_qrels, read_triplets, save_benchmark
from .index import IndexFormatError, PlaidIndex
from .losses import LossConfig, Strategy
from .metrics import bench_search, evaluate, export_embeddings, read_run, write_embeddings_csv, write_run
from .model import NumericGatedRetriever
from .params import CheckpointError
from .quantity import Cmp, NumericalCondition, parse_condition
from .scoring import pack_documents, score_packed
from .trainer import PRESETS, TrainConfig, TrainingDiverged

log = logging.getLogger("numgate")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration ------------------------------------------------------------

MODEL_KEYS = {"dim": 64, "feature_dim": 512, "hidden": 32, "prop_hidden": 32}
GATE_KEYS = {"tau": 0.5, "enabled": True}
INDEX_KEYS = {"k_centroids": 0, "nbits": 8, "nprobe": 8, "kmeans_iters": 20, "raw_residuals": False}
EXTRA_DATAGEN = {"augment_rate": 0.25, "ops": ",".join(AUGMENT_OPS)}


def _fields(cls):
    return {f.name: f.default for f in dataclasses.fields(cls)}


SECTIONS = {
    "datagen": {**_fields(CorpusSpec), **EXTRA_DATAGEN},
    "embedder": MODEL_KEYS,
    "gate": GATE_KEYS,
    "loss": _fields(LossConfig),
    "train": {**_fields(TrainConfig), "preset": "desk"},
    "index": INDEX_KEYS,
}


def _cast(text, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    if isinstance(default, Strategy):
        return Strategy(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(","))
    if isinstance(default, int) or default is None:
        return None if text.lower() == "none" else int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config(lines, overrides=()):
    """``{section: {key: value}}`` from ``key = value`` lines plus ``section.key=value`` overrides."""
    cfg = {s: {} for s in SECTIONS}
    entries = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        entries.append(line)
    entries.extend(overrides)
    for entry in entries:
        key, _, value = entry.partition("=")
        key = key.strip()
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in SECTIONS[section]:
            raise UsageError(f"unknown config key {key!r}")
        try:
            cfg[section][name] = _cast(value, SECTIONS[section][name])
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    return cfg


def load_config(args):
    lines = []
    if getattr(args, "config", None):
        _require_file(args.config)
        with open(args.config, encoding="utf-8") as fh:
            lines = fh.readlines()
    cfg = parse_config(lines, getattr(args, "set", None) or [])
    if args.seed is not None:
        for section in ("datagen", "train"):
            cfg[section]["seed"] = args.seed
    return cfg


def _require_file(path):
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}")


def _require_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise DataError(f"output directory does not exist: {parent}")


def _loss_config(cfg):
    values = dict(cfg["loss"])
    if "enabled" in cfg["gate"]:
        values["gate_enabled"] = cfg["gate"]["enabled"]
    if "tau" in cfg["gate"]:
        values["gate_tau"] = cfg["gate"]["tau"]
    try:
        return LossConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _train_config(cfg):
    values = dict(cfg["train"])
    preset = values.pop("preset", "desk")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    try:
        return dataclasses.replace(PRESETS[preset], **values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# -- data loading -----------------------------------------------------------


def _sentences(path):
    _require_file(path)
    rows = read_jsonl(path)
    try:
        return [Sentence(int(r["id"]), r["text"], r.get("concept", ""), r.get("value"), r.get("unit")) for r in rows]
    except KeyError as exc:
        raise DataError(f"{path}: sentence record lacks {exc}") from exc


def _queries(path):
    _require_file(path)
    out = []
    for r in read_jsonl(path):
        try:
            cond = NumericalCondition(float(r["value"]), Cmp(r["cmp"]), r.get("unit"))
            out.append(Query(str(r["qid"]), r["text"], cond, ""))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: bad query record {r!r}") from exc
    return out


def _load_triplets(data_dir):
    docs = {s.id: s for s in _sentences(os.path.join(data_dir, "corpus.jsonl"))}
    aug = os.path.join(data_dir, "augmented.jsonl")
    if os.path.exists(aug):
        docs.update({s.id: s for s in _sentences(aug)})
    path = os.path.join(data_dir, "triplets.tsv")
    _require_file(path)
    out = []
    for text, pos, neg, prov in read_triplets(path):
        cond = parse_condition(text)
        if cond is None or pos not in docs or neg not in docs:
            raise DataError(f"{path}: unusable triplet {text!r} {pos} {neg}")
        out.append(Triplet(Query("", text, cond, ""), docs[pos], docs[neg], prov))
    if not out:
        raise DataError(f"{path}: no triplets")
    return out


def _load_model(args, cfg):
    _require_file(args.checkpoint)
    return NumericGatedRetriever.load(args.checkpoint, tau=cfg["gate"].get("tau", 0.5),
                                      gate_enabled=cfg["gate"].get("enabled", True))


def _corpus_texts(path):
    sentences = _sentences(path)
    if [s.id for s in sentences] != list(range(len(sentences))):
        raise DataError(f"{path}: ids must be 0..N-1 in file order")
    return [s.text for s in sentences]


def _query_list(args):
    if args.query is not None:
        return [("q0", args.query)]
    return [(q.qid, q.text) for q in _queries(args.queries)]


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args, cfg):
    values = dict(cfg["datagen"])
    rate = values.pop("augment_rate", EXTRA_DATAGEN["augment_rate"])
    ops = [op for op in values.pop("ops", EXTRA_DATAGEN["ops"]).split(",") if op]
    if set(ops) - set(AUGMENT_OPS):
        raise UsageError(f"unknown augmentation ops {sorted(set(ops) - set(AUGMENT_OPS))}")
    try:
        spec = CorpusSpec(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    bench = generate_benchmark(spec, ops, rate)
    save_benchmark(bench, args.out)
    print(f"{len(bench.corpus)} sentences, {len(bench.test_queries)} test queries, {len(bench.triplets)} triplets -> {args.out}")


def cmd_train(args, cfg):
    loss_cfg, train_cfg = _loss_config(cfg), _train_config(cfg)
    _require_parent(args.out)
    triplets = _load_triplets(args.data)
    m = cfg["embedder"]
    model = NumericGatedRetriever(
        m.get("dim", 64), m.get("feature_dim", 512), m.get("hidden", 32), m.get("prop_hidden", 32),
        seed=cfg["train"].get("seed", 0), tau=cfg["gate"].get("tau", 0.5),
        loss_config=loss_cfg, train_config=train_cfg,
    )
    log_path = args.log or os.path.splitext(args.out)[0] + ".log.csv"
    model.fit(triplets, log_path=log_path, checkpoint_path=args.out)
    print(f"trained {len(model.log_)} steps; checkpoint {args.out}; log {log_path}")


def cmd_index(args, cfg):
    _require_parent(args.out)
    texts = _corpus_texts(args.corpus)
    model = _load_model(args, cfg)
    ic = cfg["index"]
    index = PlaidIndex(ic.get("k_centroids") or None, ic.get("nbits", 8), ic.get("nprobe", 8),
                       ic.get("kmeans_iters", 20), cfg["train"].get("seed", 0), ic.get("raw_residuals", False))
    index.fit(model.encode_corpus(texts))
    size = index.save(args.out)
    print(f"indexed {index.n_docs_} docs / {index.n_tokens_} tokens, k={index.k_}, nbits={index.nbits}: {size} bytes")


def cmd_search(args, cfg):
    _require_file(args.index)
    if args.run_out:
        _require_parent(args.run_out)
    queries = _query_list(args)
    model = _load_model(args, cfg)
    index = PlaidIndex.load(args.index, nprobe=args.nprobe)
    run = {}
    for qid, text in queries:
        q = model.encode_query(text)
        run[qid] = index.search(q.E, args.top_k, args.nprobe)
    if args.run_out:
        write_run(args.run_out, run)
    else:
        write_run(sys.stdout, run)


def cmd_eval(args, cfg):
    for path in (args.run, args.qrels):
        _require_file(path)
    run = read_run(args.run)
    qrels = read_qrels(args.qrels)
    conds = {q.qid: q.condition for q in _queries(args.queries)} if args.queries else None
    report = evaluate(run, qrels, conds)
    sys.stdout.write(report.to_text())
    if args.csv_out:
        _require_parent(args.csv_out)
        with open(args.csv_out, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_bench(args, cfg):
    texts = _corpus_texts(args.corpus)
    queries = _queries(args.queries)
    model = _load_model(args, cfg)
    qrels = read_qrels(args.qrels) if args.qrels else None
    docs = model.encode_corpus(texts)
    Qs = [model.encode_query(q.text).E for q in queries[: args.n_queries]]
    qids = [q.qid for q in queries[: args.n_queries]]
    tokens, offsets = pack_documents(docs)
    exact = {qid: None for qid in qids}
    if qrels is not None:
        from .scoring import rank

        exact = {qid: rank(score_packed(Q, tokens, offsets), None, 10) for qid, Q in zip(qids, Qs)}
        base = evaluate(exact, {q: qrels.get(q, {}) for q in qids}).overall["ndcg@10"]
        print(f"exact MaxSim nDCG@10 {base:.4f}")
    ic = cfg["index"]
    header = f"{'nbits':>5} {'nprobe':>6} {'code_bytes':>11} {'file_bytes':>11} {'ms/query':>9} {'brute_ms':>9} {'speedup':>8}"
    print(header + (f" {'nDCG@10':>8}" if qrels is not None else ""))
    for nbits in _ints(args.nbits):
        index = PlaidIndex(ic.get("k_centroids") or None, nbits, 8, ic.get("kmeans_iters", 20),
                           cfg["train"].get("seed", 0)).fit(docs)
        for nprobe in _ints(args.nprobe):
            nprobe = min(nprobe, index.k_)
            res = bench_search(index, Qs, docs, 10, nprobe)
            line = (f"{nbits:>5} {nprobe:>6} {res.code_bytes:>11} {res.index_bytes:>11} {res.mean_ms:>9.3f} "
                    f"{res.brute_mean_ms:>9.3f} {res.speedup:>8.2f}")
            if qrels is not None:
                run = {qid: index.search(Q, 10, nprobe) for qid, Q in zip(qids, Qs)}
                line += f" {evaluate(run, {q: qrels.get(q, {}) for q in qids}).overall['ndcg@10']:>8.4f}"
            print(line)


def cmd_export_embeddings(args, cfg):
    _require_parent(args.out)
    model = _load_model(args, cfg)
    rows = export_embeddings(model, [(q.qid, q.text) for q in _queries(args.queries)])
    write_embeddings_csv(args.out, rows)
    print(f"{len(rows)} numeric token rows -> {args.out}")


# -- entry point ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="seed for every random choice")
    common.add_argument("--threads", type=int, help="BLAS threads; affects speed only")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="numgate", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic benchmark")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train on a generated data directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("index", parents=[common], help="encode and index a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("search", parents=[common], help="search an index")
    s.add_argument("--index", required=True)
    s.add_argument("--checkpoint", required=True)
    q = s.add_mutually_exclusive_group(required=True)
    q.add_argument("--query")
    q.add_argument("--queries")
    s.add_argument("--top-k", type=int, default=10)
    s.add_argument("--nprobe", type=int, default=8)
    s.add_argument("--run-out")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("eval", parents=[common], help="score a run file")
    s.add_argument("--run", required=True)
    s.add_argument("--qrels", required=True)
    s.add_argument("--queries")
    s.add_argument("--csv-out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="latency / size / quality grid")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--qrels")
    s.add_argument("--nbits", default="8,4,2,1")
    s.add_argument("--nprobe", default="8")
    s.add_argument("--n-queries", type=int, default=100)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("export-embeddings", parents=[common], help="dump numeric query token vectors")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = load_config(args)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be positive")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args, cfg)
        else:
            args.func(args, cfg)
    except UsageError as exc:
        print(f"numgate: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, IndexFormatError, CheckpointError, TrainingDiverged, json.JSONDecodeError, OSError) as exc:
        print(f"numgate: data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"numgate: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
