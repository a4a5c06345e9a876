"""End-to-end training of symbol embeddings from proof scores."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embed import EmbeddingStore, init_embeddings
from .kb import Atom, KnowledgeBase, Rule, RuleTemplate
from .prover import Prover, ProverConfig, build_fact_index
from .rules import instantiate_templates
from .tape import Tape, backward

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.001
    negatives_per_positive: int = 1
    seed: int = 0
    rebuild_every: int | None = None  # batches; None means once per epoch
    optimizer: str = "adam"
    dim: int = 100
    mu: float = 1.0
    prover: ProverConfig = field(default_factory=ProverConfig)

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0 or self.mu <= 0:
            raise ValueError("learning_rate and mu must be positive")
        if self.negatives_per_positive < 0:
            raise ValueError("negatives_per_positive must be >= 0")
        if self.rebuild_every is not None and self.rebuild_every < 1:
            raise ValueError("rebuild_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_negatives(fact: Atom, kb: KnowledgeBase, n: int, seed=0) -> list[Atom]:
    """``n`` corruptions of ``fact`` that are not in ``kb``.

    Corruptions alternate between the subject and the object, replacing it by
    a uniformly drawn entity.  ``seed`` may be an int or a Generator.
    """
    if n <= 0:
        return []
    rng = _rng(seed)
    entities = np.asarray(kb.vocab.entities(), dtype=np.int64)
    if len(entities) == 0:
        raise ValueError("no entities to corrupt with")
    p, s, o = fact
    out = []
    attempts = 0
    limit = 100 * n
    while len(out) < n:
        if attempts >= limit:
            raise ValueError(f"could not find {n} negatives for {fact} in {limit} attempts")
        attempts += 1
        e = int(entities[rng.integers(len(entities))])
        cand = (p, e, o) if len(out) % 2 == 0 else (p, s, e)
        if cand not in kb.fact_set:
            out.append(cand)
    return out


def loss(tape: Tape, score: int, label: int) -> int:
    """Record ``-y log s - (1 - y) log(1 - s + eps)`` on the tape."""
    return tape.loss(score, label)


class Adam:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None or self.m.shape != params.shape:
            m, v = np.zeros_like(params), np.zeros_like(params)
            if self.m is not None:
                # vocabulary grew: keep moments of existing rows
                m[: len(self.m)] = self.m
                v[: len(self.v)] = self.v
            self.m, self.v = m, v
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr: float = 0.001) -> None:
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


@dataclass
class TrainResult:
    store: EmbeddingStore
    rules: list[Rule]
    log: list[dict]
    kb: KnowledgeBase

    def __iter__(self):
        # unpacks as (store, rules, log)
        return iter((self.store, self.rules, self.log))


def query_gradient(prover: Prover, goal: Atom, label: int) -> tuple[float, dict | None]:
    """Loss and per-symbol gradient for one labelled query."""
    res = prover.prove(goal)
    if res.state is None:
        return 0.0, None
    node = loss(prover.tape, res.node, label)
    grads = backward(prover.tape, node, prover.store.vectors, prover.store.mu)
    return prover.tape.values[node], grads


def train_epochs(kb: KnowledgeBase, store: EmbeddingStore, cfg: TrainConfig, log_file=None) -> list[dict]:
    """Train ``store`` in place on every fact of ``kb``; returns batch records."""
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    pcfg = cfg.prover
    n_facts = len(kb.facts)
    n_batches = (n_facts + cfg.batch_size - 1) // cfg.batch_size
    rebuild_every = cfg.rebuild_every or max(n_batches, 1)
    index = build_fact_index(kb, store, pcfg) if cfg.epochs and n_facts else None
    rebuilds = 0
    batch_no = 0
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_facts)
        for b in range(n_batches):
            t0 = time.perf_counter()
            rows = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            cache: dict = {}
            grad = np.zeros_like(store.vectors)
            total = 0.0
            count = 0
            for row in rows:
                fact = kb.facts[row].head
                queries = [(fact, 1, (int(row),))]
                for neg in sample_negatives(fact, kb, cfg.negatives_per_positive, rng):
                    queries.append((neg, 0, ()))
                for goal, label, mask in queries:
                    prover = Prover(kb, store, pcfg, index, mask=mask, cache=cache)
                    value, g = query_gradient(prover, goal, label)
                    if g is None:
                        continue
                    total += value
                    count += 1
                    for sid, vec in g.items():
                        grad[sid] += vec
            if count:
                grad /= count
                opt.step(store.vectors, grad)
            batch_no += 1
            if index is not None and batch_no % rebuild_every == 0:
                index = build_fact_index(kb, store, pcfg)
                rebuilds += 1
            rec = {
                "epoch": epoch,
                "batch": b,
                "loss": total / count if count else 0.0,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
                "index_rebuilds": rebuilds,
            }
            log.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
        epoch_loss = float(np.mean([r["loss"] for r in log if r["epoch"] == epoch])) if n_batches else 0.0
        logger.info("epoch %d loss %.5f", epoch, epoch_loss)
    return log


def train(kb: KnowledgeBase, templates: Sequence[RuleTemplate], cfg: TrainConfig,
          store: EmbeddingStore | None = None, log_file=None) -> TrainResult:
    """Instantiate ``templates``, then fit embeddings on the facts of ``kb``.

    A fresh Gaussian store is drawn from ``cfg.seed`` when none is given; a
    given store is copied, not modified.  Slot symbols go into a copy of
    ``kb.vocab``; the returned ``kb`` carries it.
    """
    kb = KnowledgeBase(kb.vocab.copy(), kb.facts, kb.rules)
    store = init_embeddings(kb.vocab, cfg.dim, cfg.seed, cfg.mu) if store is None else store.copy()
    rules = instantiate_templates(templates, kb, store, seed=cfg.seed + 1) if templates else []
    full = kb.with_rules(rules)
    log = train_epochs(full, store, cfg, log_file)
    return TrainResult(store, rules, log, full)


def epoch_losses(log: Sequence[dict]) -> list[float]:
    epochs = sorted({r["epoch"] for r in log})
    return [float(np.mean([r["loss"] for r in log if r["epoch"] == e])) for e in epochs]
