"""Command line entry point: ``softchain {train,eval,rules,ann-bench,prove}``.

Runs are described by a flat ``key = value`` config file; command line flags
override it.  Checkpoints are JSON files holding the embeddings, the
instantiated rules and the config they were trained with.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ann import brute_force_knn, BruteForceIndex, hnsw_build, hnsw_search, recall_at_k
from .datasets import BUILTIN, load_dataset, read_kb, read_templates, read_triples
from .embed import init_embeddings, load_checkpoint
from .evaluate import format_table, metric_records, mrr_hits, prover_scorer, rank_all, write_records
from .kb import CONSTANT, PREDICATE, KnowledgeBase, ParseError, Rule, Var, Vocab, is_variable_name, parse_atom
from .prover import Prover, ProverConfig, explain
from .rules import extract_rules
from .train import TrainConfig, train

logger = logging.getLogger("softchain")

MODE_FLAGS = {"exhaustive": "exhaustive", "exact-knn": "exact_knn", "hnsw": "hnsw_knn"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    dataset: str = ""  # builtin dataset; train/valid/test/templates override its files
    train: str = ""
    valid: str = ""
    test: str = ""
    templates: str = ""
    dim: int = 100
    mu: float = 1.0
    k: int = 1
    mode: str = "exact-knn"
    depth: int = 2
    hnsw_m: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.001
    negatives: int = 1
    optimizer: str = "adam"
    rebuild_every: int = 0  # 0: once per epoch
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODE_FLAGS:
            raise UsageError(f"mode must be one of {', '.join(MODE_FLAGS)}, got {self.mode!r}")
        if self.dataset and self.dataset not in BUILTIN:
            raise UsageError(f"unknown dataset {self.dataset!r}; choose from {', '.join(BUILTIN)}")
        if self.k < 1:
            raise UsageError("k must be >= 1")
        if self.rebuild_every < 0:
            raise UsageError("rebuild_every must be >= 0")
        try:
            self.prover_config()
            self.train_config()
        except ValueError as e:
            raise UsageError(str(e)) from None

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise UsageError(f"{source}:{n}: expected key = value")
            if key not in types:
                raise UsageError(f"{source}:{n}: unknown key {key!r}")
            values[key] = _convert(key, value, types[key], f"{source}:{n}")
        return cls(**values)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if not path:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e.strerror}") from None
        cfg = cls.from_text(text, path)
        # data paths are relative to the config file
        base = Path(path).resolve().parent
        for key in ("train", "valid", "test", "templates"):
            value = getattr(cfg, key)
            if value and not value.startswith("builtin:") and not Path(value).is_absolute():
                setattr(cfg, key, str(base / value))
        return cfg

    def override(self, **flags) -> "RunConfig":
        changes = {k: v for k, v in flags.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())

    def prover_config(self) -> ProverConfig:
        return ProverConfig(max_depth=self.depth, k=self.k, mode=MODE_FLAGS[self.mode], ef_search=self.ef_search,
                            hnsw_m=self.hnsw_m, ef_construction=self.ef_construction, index_seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           negatives_per_positive=self.negatives, seed=self.seed,
                           rebuild_every=self.rebuild_every or None, optimizer=self.optimizer, dim=self.dim,
                           mu=self.mu, prover=self.prover_config())


def _convert(key: str, value: str, typ, where: str):
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError:
        raise UsageError(f"{where}: {key} expects a {typ if isinstance(typ, str) else typ.__name__}, got {value!r}") from None
    return value


def load_data(cfg: RunConfig, vocab: Vocab | None = None):
    """``(kb, valid, test, templates)`` named by ``cfg``."""
    if cfg.dataset and not (cfg.train or vocab is not None):
        ds = load_dataset(cfg.dataset)
        kb, valid, test, templates = ds.kb, ds.valid, ds.test, ds.templates
        if cfg.templates:
            templates = read_templates(cfg.templates)
        return kb, valid, test, templates
    train_path = cfg.train or (f"builtin:{cfg.dataset}/train.{'pl' if cfg.dataset == 'family' else 'txt'}"
                               if cfg.dataset else "")
    if not train_path:
        raise UsageError("config names no training data (set dataset or train)")
    kb = read_kb(train_path, vocab)
    split = {}
    for name in ("valid", "test"):
        path = getattr(cfg, name) or (f"builtin:{cfg.dataset}/{name}.txt" if cfg.dataset and cfg.dataset != "family" else "")
        split[name] = read_triples(path, kb.vocab) if path else []
    tpath = cfg.templates or (f"builtin:{cfg.dataset}/templates.txt" if cfg.dataset else "")
    templates = read_templates(tpath) if tpath else []
    return kb, split["valid"], split["test"], templates


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _atom_json(atom, vocab: Vocab) -> list[str]:
    return [vocab.name(atom[0])] + [t.name if isinstance(t, Var) else vocab.name(t) for t in atom[1:]]


def _atom_from_json(names: list[str], vocab: Vocab):
    p = vocab.id(names[0], PREDICATE)
    return (p, *(Var(n) if is_variable_name(n) else vocab.id(n, CONSTANT) for n in names[1:]))


def save_checkpoint(path: str, kb: KnowledgeBase, store, rules, cfg: RunConfig) -> None:
    rules_json = [{"index": r.index, "head": _atom_json(r.head, kb.vocab),
                   "body": [_atom_json(a, kb.vocab) for a in r.body]} for r in rules]
    store.save(path, kb.vocab, rules=rules_json, config=dataclasses.asdict(cfg))


def open_checkpoint(path: str, cfg: RunConfig | None = None):
    """``(kb with learned rules, store, valid, test, cfg)`` from a checkpoint."""
    try:
        store, vocab, payload = load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as e:
        raise UsageError(f"bad checkpoint {path}: {e}") from None
    if cfg is None:
        try:
            cfg = RunConfig(**payload.get("config", {}))
        except TypeError as e:
            raise UsageError(f"bad config in checkpoint {path}: {e}") from None
    n = len(vocab)
    try:
        kb, valid, test, _ = load_data(cfg, vocab)
        rules = [Rule(_atom_from_json(r["head"], vocab), tuple(_atom_from_json(a, vocab) for a in r["body"]),
                      index=int(r["index"])) for r in payload.get("rules", [])]
    except KeyError as e:
        raise UsageError(f"checkpoint/vocabulary mismatch: {e.args[0]}") from None
    if len(vocab) != n:
        new = [s.name for s in list(vocab)[n:]]
        raise UsageError(f"checkpoint/vocabulary mismatch: data has symbols missing from the checkpoint: {new[:5]}")
    return kb.with_rules(rules), store, valid, test, cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    flags = {name: getattr(args, name, None) for name in ("seed", "k", "dim", "mu", "epochs", "depth",
                                                           "learning_rate", "dataset")}
    flags["mode"] = getattr(args, "mode", None)
    try:
        return cfg.override(**flags)
    except TypeError as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    cfg = _config(args)
    kb, valid, test, templates = load_data(cfg)
    log_fh = open(args.log, "w") if args.log else None
    try:
        res = train(kb, templates, cfg.train_config(), log_file=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(args.out, res.kb, res.store, res.rules, cfg)
    losses = [r["loss"] for r in res.log]
    print(f"trained {cfg.epochs} epochs on {len(kb.facts)} facts; final batch loss "
          f"{losses[-1] if losses else float('nan'):.5f}; checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else None
    kb, store, valid, test, cfg = open_checkpoint(args.checkpoint, cfg)
    cfg = cfg.override(k=args.k, mode=args.mode, depth=args.depth)
    facts = test if args.split == "test" else valid
    if not facts:
        raise UsageError(f"no {args.split} facts in the configured data")
    known = set(kb.fact_set) | set(valid) | set(test)
    scorer = prover_scorer(kb, store, cfg.prover_config())
    name = cfg.dataset or Path(cfg.train).stem
    records = []
    modes = {"filtered": [True], "raw": [False], "both": [True, False]}[args.ranking]
    for filtered in modes:
        ranks = rank_all(facts, kb, scorer, filtered=filtered, known=known, ties=args.ties)
        metrics = mrr_hits(ranks, (1, 3, 10))
        suffix = "" if filtered else "_raw"
        records += metric_records(name, args.split, {k + suffix: v for k, v in metrics.items()})
    if args.metrics:
        with open(args.metrics, "w") as fh:
            write_records(records, fh)
    sys.stdout.write(format_table(records))
    return 0


def cmd_rules(args) -> int:
    kb, store, _, _, _ = open_checkpoint(args.checkpoint)
    if not 0.0 <= args.min_confidence <= 1.0:
        raise UsageError("--min-confidence must be in [0, 1]")
    for d in extract_rules(kb, store, args.min_confidence):
        print(d.render(kb.vocab))
    return 0


def cmd_ann_bench(args) -> int:
    if args.k > args.ef:
        raise UsageError("--ef must be >= --k")
    rng = np.random.default_rng(args.seed)
    data = rng.standard_normal((args.n, args.dim))
    queries = rng.standard_normal((args.queries, args.dim))
    t0 = time.perf_counter()
    index = hnsw_build(data, M=args.M, ef_construction=args.ef_construction, seed=args.seed)
    build_s = time.perf_counter() - t0
    brute = BruteForceIndex(data)
    hnsw_search(index, queries[0], args.k, args.ef)  # compile outside the timed loop
    t0 = time.perf_counter()
    approx = [[i for i, _ in hnsw_search(index, q, args.k, args.ef)] for q in queries]
    hnsw_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    exact = [[i for i, _ in brute_force_knn(q, brute, args.k)] for q in queries]
    brute_s = time.perf_counter() - t0
    r1 = recall_at_k([a[:1] for a in approx], [e[:1] for e in exact])
    rk = recall_at_k(approx, exact)
    print(f"n={args.n} dim={args.dim} M={args.M} ef_construction={args.ef_construction} ef={args.ef}")
    print(f"build_s\t{build_s:.2f}")
    print(f"recall@1\t{r1:.4f}")
    print(f"recall@{args.k}\t{rk:.4f}")
    print(f"hnsw_qps\t{len(queries) / hnsw_s:.1f}")
    print(f"brute_qps\t{len(queries) / brute_s:.1f}")
    print(f"speedup\t{brute_s / hnsw_s:.2f}")
    return 0


def cmd_prove(args) -> int:
    if args.checkpoint:
        kb, store, _, _, cfg = open_checkpoint(args.checkpoint)
        cfg = cfg.override(k=args.k, mode=args.mode, depth=args.depth)
    else:
        if not args.kb:
            raise UsageError("prove needs --kb or --checkpoint")
        cfg = RunConfig().override(seed=args.seed, k=args.k, mode=args.mode or "exhaustive", depth=args.depth,
                                   dim=args.dim, mu=args.mu)
        try:
            kb = read_kb(args.kb)
        except FileNotFoundError:
            raise UsageError(f"KB file not found: {args.kb}") from None
        store = None
    goal = parse_atom(args.query, kb.vocab)
    if store is None or len(store) < len(kb.vocab):
        fresh = init_embeddings(kb.vocab, cfg.dim, cfg.seed, cfg.mu)
        if store is not None:
            fresh.vectors[: len(store)] = store.vectors
        store = fresh
    for pair in args.copy_embedding or ():
        dst, sep, src = pair.partition("=")
        if not sep:
            raise UsageError(f"--copy-embedding expects a=b, got {pair!r}")
        store.vectors[kb.vocab.id(dst.strip(), PREDICATE)] = store.vectors[kb.vocab.id(src.strip(), PREDICATE)]
    res = Prover(kb, store, cfg.prover_config()).prove(goal)
    if args.explain:
        sys.stdout.write(explain(res, goal, kb))
    else:
        print(f"{res.score:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _mode(value: str) -> str:
    if value not in MODE_FLAGS:
        raise argparse.ArgumentTypeError(f"choose from {', '.join(MODE_FLAGS)}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softchain", description="Neural theorem proving with k-NN fact retrieval.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="{train,eval,rules,ann-bench,prove}")

    def common(p, data=True):
        p.add_argument("--seed", type=int)
        p.add_argument("--k", type=int, help="facts retrieved per ground goal")
        p.add_argument("--mode", type=_mode, metavar="{exhaustive,exact-knn,hnsw}")
        p.add_argument("--depth", type=int)
        if data:
            p.add_argument("--config", help="key = value run config")

    p = sub.add_parser("train", help="train embeddings and rule slots")
    common(p)
    p.add_argument("--dataset", choices=BUILTIN)
    p.add_argument("--dim", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--log", help="per-batch metrics log (JSON lines)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank test facts with a trained checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--ranking", choices=("filtered", "raw", "both"), default="both")
    p.add_argument("--ties", choices=("pessimistic", "optimistic"), default="pessimistic",
                   help="where the gold entity goes among equal scores")
    p.add_argument("--metrics", help="write metric records (JSON lines) here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rules", help="decode learned rules")
    p.add_argument("checkpoint")
    p.add_argument("--min-confidence", type=float, default=0.5)
    p.set_defaults(func=cmd_rules)

    p = sub.add_parser("ann-bench", help="HNSW vs brute force recall and speed on random vectors")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--ef-construction", type=int, default=200)
    p.add_argument("--ef", type=int, default=64)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ann_bench)

    p = sub.add_parser("prove", help="score one query")
    common(p, data=False)
    p.add_argument("query", help="ground atom, e.g. 'grandpaOf(abe, bart)'")
    p.add_argument("--kb", help="clause file (embeddings drawn from --seed)")
    p.add_argument("--checkpoint")
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--copy-embedding", action="append", metavar="A=B", help="set predicate A's embedding to B's")
    p.add_argument("--explain", action="store_true", help="print the best proof trail")
    p.set_defaults(func=cmd_prove)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"softchain {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ParseError, OSError) as e:
        print(f"softchain {args.command}: error: {e}", file=sys.stderr)
        return 1
    except KeyError as e:
        print(f"softchain {args.command}: error: unknown symbol {e.args[0]}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
