"""Acceptance criteria 1-8, one summary line each (printed after the run).

Criteria 6 and 7 run full datasets and are opt-in: set SOFTCHAIN_DESK=1.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from softchain.ann import BruteForceIndex, brute_force_knn, hnsw_build, hnsw_search, recall_at_k
from softchain.cli import RunConfig
from softchain.datasets import load_dataset
from softchain.embed import init_embeddings
from softchain.evaluate import auc_pr, mrr_hits, prover_scorer, rank_all
from softchain.kb import parse_atom, parse_kb, parse_templates
from softchain.prover import Prover, ProverConfig
from softchain.rules import extract_rules
from softchain.tape import backward
from softchain.train import TrainConfig, train

from conftest import ACCEPTANCE, FAMILY, SIMPSONS, maxmin_score, fd_gradient, max_rel_error, random_fact_kb, selection_margin

ROOT = Path(__file__).resolve().parent.parent
DESK = os.environ.get("SOFTCHAIN_DESK") == "1"


def report(n, ok, detail):
    ACCEPTANCE[n] = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def not_run(n, reason):
    ACCEPTANCE[n] = f"CRITERION {n}: NOT RUN  {reason}"
    pytest.skip(reason)


def random_queries(preds, ents, n, seed):
    rng = np.random.default_rng(seed)
    return [(preds[rng.integers(len(preds))], ents[rng.integers(len(ents))], ents[rng.integers(len(ents))])
            for _ in range(n)]


def test_criterion_1_maxmin_oracle():
    t0 = time.perf_counter()
    kb, preds, ents = random_fact_kb(200, 10, 40, seed=0)
    assert len(kb.vocab) == 50
    store = init_embeddings(kb.vocab, 16, seed=0)
    worst = 0.0
    for g in random_queries(preds, ents, 100, seed=1):
        got = Prover(kb, store, ProverConfig(mode="exhaustive")).prove(g).score
        worst = max(worst, abs(got - maxmin_score(g, kb, store)))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-9 and elapsed < 10.0, f"max |prove - max-min oracle| = {worst:.2e} (tol 1e-9), {elapsed:.2f} s (< 10 s)")


def test_criterion_2_neighbour_restriction():
    # (a) k = |facts| reproduces exhaustive mode bit for bit, scores and training losses
    kb, preds, ents = random_fact_kb(30, 3, 8, seed=1)
    tpl = parse_templates("2 #1(X, Y) :- #2(Y, X).\n1 #1(X, Y) :- #2(X, Z), #3(Z, Y).")
    score_diffs = 0
    loss_equal = True
    for seed in range(3):
        base = dict(epochs=3, batch_size=8, dim=5, seed=seed, learning_rate=0.05, mu=2.0, negatives_per_positive=2)
        a = train(kb, tpl, TrainConfig(**base, prover=ProverConfig(mode="exhaustive")))
        b = train(kb, tpl, TrainConfig(**base, prover=ProverConfig(mode="exact_knn", k=len(kb.facts))))
        loss_equal &= [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
        full = a.kb
        for g in random_queries(preds, ents, 30, seed):
            for row in (None, 0):
                mask = () if row is None else (row,)
                sa = Prover(full, a.store, ProverConfig(mode="exhaustive"), mask=mask).prove(g).score
                sb = Prover(full, a.store, ProverConfig(mode="exact_knn", k=len(full.facts)), mask=mask).prove(g).score
                score_diffs += sa != sb

    # (b) k = 1 on a fact-only KB against the max-min arg-max
    kb, preds, ents = random_fact_kb(200, 10, 40, seed=2)
    store = init_embeddings(kb.vocab, 16, seed=2)
    v = store.vectors
    facts = kb.fact_array
    concat = np.hstack([v[facts[:, 0]], v[facts[:, 1]], v[facts[:, 2]]])
    hits = total = bad = 0
    for g in random_queries(preds, ents, 200, seed=3):
        knn = Prover(kb, store, ProverConfig(mode="exact_knn", k=1)).prove(g).score
        exh = Prover(kb, store, ProverConfig(mode="exhaustive")).prove(g).score
        q = np.concatenate([v[g[0]], v[g[1]], v[g[2]]])
        nn = int(np.argmin(((concat - q) ** 2).sum(axis=1)))
        per_fact = [maxmin_score(g, kb, store, skip=set(range(len(facts))) - {i}) for i in range(len(facts))]
        best = int(np.argmax(per_fact))
        total += 1
        if nn == best:
            hits += 1
            bad += abs(knn - per_fact[best]) > 1e-12
        else:
            bad += knn > exh
    ok = loss_equal and score_diffs == 0 and bad == 0
    report(2, ok, f"k=|facts|: losses identical={loss_equal}, score mismatches={score_diffs}; "
                  f"k=1 nearest fact is the max-min arg-max on {hits}/{total} = {hits / total:.3f}, violations={bad}")


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    kb = parse_kb(SIMPSONS + "fatherOf(homer, lisa).\nparentOf(abe, homer).\n")
    kb.vocab.intern("grandpaOf", "predicate")
    goals = [parse_atom(t, kb.vocab) for t in
             ("grandpaOf(abe, bart)", "grandfatherOf(abe, lisa)", "parentOf(homer, lisa)", "fatherOf(abe, bart)")]
    rng = np.random.default_rng(0)
    worst, points, tried = 0.0, 0, 0
    while points < 50 and tried < 1000:
        tried += 1
        store = init_embeddings(kb.vocab, 4, int(rng.integers(1 << 30)), mu=1.5)
        g = goals[tried % len(goals)]
        res = Prover(kb, store).prove(g)
        if res.state is None or selection_margin(res.tape, res.node) <= 1e-3:
            continue
        grads = backward(res.tape, res.node, store.vectors, store.mu)
        num = fd_gradient(lambda s: Prover(kb, s).prove(g).score, store, range(len(store)), h=1e-5)
        worst = max(worst, max_rel_error(grads, num))
        points += 1
    elapsed = time.perf_counter() - t0
    report(3, points == 50 and worst <= 1e-4 and elapsed < 60.0,
           f"{points} points (margin > 1e-3), max rel error {worst:.2e} (tol 1e-4), {elapsed:.1f} s (< 60 s)")


def test_criterion_4_hnsw():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((10_000, 64))
    queries = rng.standard_normal((1_000, 64))
    index = hnsw_build(data, M=16, ef_construction=200, seed=0)
    brute = BruteForceIndex(data)
    hnsw_search(index, queries[0], 10, 64)
    brute_force_knn(queries[0], brute, 10)
    t0 = time.perf_counter()
    approx = [[i for i, _ in hnsw_search(index, q, 10, 64)] for q in queries]
    t_hnsw = time.perf_counter() - t0
    t0 = time.perf_counter()
    exact = [[i for i, _ in brute_force_knn(q, brute, 10)] for q in queries]
    t_brute = time.perf_counter() - t0
    r1 = recall_at_k([a[:1] for a in approx], [e[:1] for e in exact])
    r10 = recall_at_k(approx, exact)
    speedup = t_brute / t_hnsw
    report(4, r1 >= 0.95 and r10 >= 0.90 and speedup >= 5.0,
           f"recall@1 {r1:.3f} (>= 0.95), recall@10 {r10:.3f} (>= 0.90), speedup {speedup:.1f}x (>= 5x)")


@pytest.mark.slow
def test_criterion_5_family_end_to_end():
    cfg = RunConfig.load(str(ROOT / "configs" / "family.cfg"))
    kb = parse_kb(FAMILY)
    tpl = parse_templates("3 #1(X, Y) :- #2(X, Z), #3(Z, Y).")
    wanted = "grandpaOf(X, Y) :- fatherOf(X, Z), parentOf(Z, Y)"
    lines = []
    ok = True
    for seed in (cfg.seed, cfg.seed + 1, cfg.seed + 2):
        res = train(kb, tpl, cfg.override(seed=seed).train_config())
        goal = parse_atom("grandpaOf(abe, bart)", res.kb.vocab, intern=False)
        corrupt = parse_atom("grandpaOf(bart, abe)", res.kb.vocab, intern=False)
        pcfg = cfg.prover_config()
        # the goal's own fact is hidden, so the score has to come through a learned rule
        score = Prover(res.kb, res.store, pcfg, mask=[res.kb.fact_position(goal)]).prove(goal).score
        low = Prover(res.kb, res.store, pcfg).prove(corrupt).score
        rules = {d.render(res.kb.vocab).split("\t")[1]: d.confidence for d in extract_rules(res.kb, res.store, 0.5)}
        conf = rules.get(wanted, 0.0)
        ok &= score > 0.9 and conf > 0.5 and low < score
        lines.append(f"seed {seed}: prove {score:.3f}, rule conf {conf:.3f}, corrupt {low:.3f}")
    report(5, ok, "; ".join(lines))


DESK_BANDS = {"nations": 0.81, "umls": 0.76}
DESK_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.mark.desk
@pytest.mark.parametrize("name", sorted(DESK_BANDS))
def test_criterion_6_desk_runs(name):
    if not DESK:
        not_run(6, "opt-in full Nations/UMLS runs, set SOFTCHAIN_DESK=1 (Countries is not available offline)")
    target = DESK_BANDS[name]
    cfg = RunConfig.load(str(ROOT / "configs" / f"{name}.cfg"))
    ds = load_dataset(name)
    lines = []
    ok = True
    for seed in (0, 1, 2):
        t0 = time.perf_counter()
        res = train(ds.kb, ds.templates, cfg.override(seed=seed).train_config())
        scorer = prover_scorer(res.kb, res.store, cfg.prover_config())
        mrr = mrr_hits(rank_all(ds.test, res.kb, scorer, known=ds.known))["MRR"]
        elapsed = time.perf_counter() - t0
        # informative only: the band is checked on pessimistic ties
        opt = mrr_hits(rank_all(ds.test, res.kb, scorer, known=ds.known, ties="optimistic"))["MRR"]
        ok &= abs(mrr - target) <= 0.10 and elapsed <= 3600
        lines.append(f"{name} seed {seed}: MRR {mrr:.3f} (target {target} +/- 0.10; optimistic ties {opt:.3f}), "
                     f"{elapsed / 60:.1f} min")
    DESK_RESULTS[name] = (ok, "; ".join(lines))
    missing = [n for n in DESK_BANDS if n not in DESK_RESULTS]
    detail = "; ".join(d for _, d in DESK_RESULTS.values()) + (f"; not run: {', '.join(missing)}" if missing else "")
    all_ok = all(o for o, _ in DESK_RESULTS.values()) and not missing
    ACCEPTANCE[6] = f"CRITERION 6: {'PASS' if all_ok else 'FAIL'}  {detail}"
    assert ok, DESK_RESULTS[name][1]


@pytest.mark.desk
def test_criterion_7_wordnet():
    not_run(7, "optional stretch; the WordNet training set is not available offline")


def test_criterion_8_metrics():
    m = mrr_hits([1, 2, 4])
    checks = [
        abs(m["MRR"] - (1 + 0.5 + 0.25) / 3) <= 1e-12,
        abs(m["HITS@1"] - 1 / 3) <= 1e-12,
        abs(m["HITS@3"] - 2 / 3) <= 1e-12,
        mrr_hits([1, 1, 1]) == {"MRR": 1.0, "HITS@1": 1.0, "HITS@3": 1.0, "HITS@10": 1.0},
        abs(auc_pr([(0.9, 1), (0.8, 0), (0.7, 1)]) - (0.5 * 1.0 + 0.5 * 2 / 3)) <= 1e-12,
    ]
    report(8, all(checks), f"{sum(checks)}/{len(checks)} hand-derived examples within 1e-12")
