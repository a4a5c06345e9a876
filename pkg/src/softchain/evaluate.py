"""Link-prediction ranking, AUC-PR and thresholded triple classification."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .embed import EmbeddingStore
from .kb import Atom, KnowledgeBase, render_atom
from .prover import FactIndex, Prover, ProverConfig

Scorer = Callable[[Atom], float]


@dataclass(frozen=True)
class RankResult:
    query: Atom  # the test fact
    side: str  # "subject" or "object": which argument was replaced
    gold: int
    rank: int
    filtered: bool


def prover_scorer(kb: KnowledgeBase, store: EmbeddingStore, cfg: ProverConfig | None = None,
                  index: FactIndex | None = None) -> Scorer:
    """A ``prove`` score function over a fixed embedding snapshot.

    Kernel rows are shared between calls, so do not train ``store`` while the
    scorer is in use.
    """
    cfg = cfg or ProverConfig()
    cache: dict = {}
    if index is None and cfg.mode != "exhaustive" and kb.facts:
        index = Prover(kb, store, cfg, cache=cache).index

    def score(atom: Atom) -> float:
        return Prover(kb, store, cfg, index, cache=cache).prove(atom).score

    return score


def rank_all(test_facts: Iterable[Atom], kb: KnowledgeBase, scorer: Scorer, filtered: bool = True,
             known: Iterable[Atom] | None = None, ties: str = "pessimistic") -> list[RankResult]:
    """Rank each test fact against every entity, replacing subject then object.

    The gold entity goes after every competitor with an equal score
    (``ties="optimistic"`` puts it before them instead).  With ``filtered``,
    competitors forming a triple in ``known`` (default: the KB facts plus the
    test facts) are skipped.
    """
    if ties not in ("pessimistic", "optimistic"):
        raise ValueError(f"ties must be 'pessimistic' or 'optimistic', got {ties!r}")
    beats = (lambda a, b: a >= b) if ties == "pessimistic" else (lambda a, b: a > b)
    test_facts = [tuple(f) for f in test_facts]
    entities = kb.vocab.entities()
    if filtered:
        known = set(kb.fact_set if known is None else map(tuple, known)) | set(test_facts)
    else:
        known = set()
    ent_set = set(entities)
    out = []
    for fact in test_facts:
        p, s, o = fact
        for side, gold in (("subject", s), ("object", o)):
            if gold not in ent_set:
                raise ValueError(f"gold entity of {render_atom(fact, kb.vocab)} is not in the vocabulary")

            def corrupt(e):
                return (p, e, o) if side == "subject" else (p, s, e)

            gold_score = scorer(fact)
            rank = 1
            for e in entities:
                if e == gold:
                    continue
                cand = corrupt(e)
                if cand in known:
                    continue
                if beats(scorer(cand), gold_score):
                    rank += 1
            out.append(RankResult(fact, side, gold, rank, filtered))
    return out


def mrr_hits(results: Sequence[RankResult] | Sequence[int], ms: Iterable[int] = (1, 3, 10)) -> dict[str, float]:
    """MRR and HITS@m from rank results (or bare ranks)."""
    ranks = np.array([r.rank if isinstance(r, RankResult) else r for r in results], dtype=np.float64)
    if len(ranks) == 0:
        raise ValueError("no ranks to summarise")
    if np.any(ranks < 1):
        raise ValueError("ranks start at 1")
    out = {"MRR": float(np.mean(1.0 / ranks))}
    for m in sorted(set(ms)):
        out[f"HITS@{m}"] = float(np.mean(ranks <= m))
    return out


def auc_pr(pairs: Iterable[tuple[float, int]]) -> float:
    """Area under the precision-recall curve, by step integration.

    Pairs are ``(score, label)``.  Equal scores form one threshold, and each
    threshold adds its recall gain times the precision reached there.
    """
    pairs = list(pairs)
    scores = np.array([p[0] for p in pairs], dtype=np.float64)
    labels = np.array([1 if p[1] else 0 for p in pairs], dtype=np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("auc_pr needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # last position of each group of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tp = np.cumsum(labels)[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return float(np.sum(gains * precision))


def _best_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, int]:
    """Threshold t maximising #correct for "positive iff score > t"; lowest t on ties."""
    cands = np.r_[-np.inf, np.unique(scores)]
    best_t, best_c = cands[0], -1
    for t in cands:
        c = int(np.sum((scores > t) == (labels == 1)))
        if c > best_c:
            best_t, best_c = t, c
    return float(best_t), best_c


def classification_accuracy(valid: Sequence[tuple[int, float, int]],
                            test: Sequence[tuple[int, float, int]]) -> tuple[float, float]:
    """Accuracy with per-relation thresholds fitted on ``valid``.

    Items are ``(relation, score, label)``.  A relation without validation
    data uses one global threshold fitted on all of ``valid``.
    """
    if not valid or not test:
        raise ValueError("both splits need scored triples")

    def arrays(items):
        rel = np.array([r for r, _, _ in items], dtype=np.int64)
        sc = np.array([s for _, s, _ in items], dtype=np.float64)
        lab = np.array([1 if y else 0 for _, _, y in items], dtype=np.int64)
        return rel, sc, lab

    vr, vs, vl = arrays(valid)
    tr, ts, tl = arrays(test)
    global_t, _ = _best_threshold(vs, vl)
    thresholds = {int(r): _best_threshold(vs[vr == r], vl[vr == r])[0] for r in np.unique(vr)}

    def accuracy(rel, sc, lab):
        t = np.array([thresholds.get(int(r), global_t) for r in rel])
        return float(np.mean((sc > t) == (lab == 1)))

    return accuracy(vr, vs, vl), accuracy(tr, ts, tl)


def metric_records(dataset: str, split: str, metrics: dict[str, float]) -> list[dict]:
    return [{"dataset": dataset, "split": split, "metric": k, "value": v} for k, v in metrics.items()]


def write_records(records: Iterable[dict], fh) -> None:
    for r in records:
        fh.write(json.dumps(r) + "\n")


def format_table(records: Sequence[dict]) -> str:
    rows = [("dataset", "split", "metric", "value")]
    rows += [(r["dataset"], r["split"], r["metric"], f"{r['value']:.4f}") for r in records]
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows) + "\n"
