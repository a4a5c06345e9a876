import numpy as np
import pytest

from softchain.embed import EmbeddingStore, init_embeddings
from softchain.kb import KnowledgeBase, Rule, Vocab, parse_kb, CONSTANT, PREDICATE

SIMPSONS = """\
fatherOf(abe, homer).
parentOf(homer, bart).
grandfatherOf(X, Y) :- fatherOf(X, Z), parentOf(Z, Y).
"""

FAMILY = """\
fatherOf(abe, homer).
parentOf(homer, bart).
grandpaOf(abe, bart).
"""


@pytest.fixture
def simpsons():
    kb = parse_kb(SIMPSONS)
    kb.vocab.intern("grandpaOf", PREDICATE)
    return kb


@pytest.fixture
def simpsons_store(simpsons):
    return init_embeddings(simpsons.vocab, dim=8, seed=3, mu=1.0)


def random_fact_kb(n_facts, n_preds, n_ents, seed):
    """Fact-only KB over ``n_preds + n_ents`` symbols with distinct random triples."""
    rng = np.random.default_rng(seed)
    vocab = Vocab()
    preds = [vocab.intern(f"p{i}", PREDICATE) for i in range(n_preds)]
    ents = [vocab.intern(f"e{i}", CONSTANT) for i in range(n_ents)]
    seen, facts = set(), []
    while len(facts) < n_facts:
        atom = (preds[rng.integers(n_preds)], ents[rng.integers(n_ents)], ents[rng.integers(n_ents)])
        if atom not in seen:
            seen.add(atom)
            facts.append(Rule(atom, (), index=len(facts) + 1))
    return KnowledgeBase(vocab, facts), preds, ents


def maxmin_score(goal, kb, store, skip=()):
    """Max over facts of the min of the three slot kernels, evaluated one fact at a time."""
    from softchain.embed import rbf_kernel

    v = store.vectors
    best = 0.0
    for i, f in enumerate(kb.facts):
        if i in skip:
            continue
        h = f.head
        s = min(rbf_kernel(v[goal[j]], v[h[j]], store.mu) for j in range(3))
        best = max(best, s)
    return best


def selection_margin(tape, root):
    """Smallest gap between the selected child and the runner-up over active Min/Max nodes."""
    from softchain.tape import MAX, MIN

    gaps = [tape.margin(n) for n in tape.active(root) if tape.ops[n] in (MIN, MAX)]
    return min(gaps, default=float("inf"))


def fd_gradient(score_fn, store, symbols, h=1e-5):
    """Central differences of ``score_fn(store)`` for every coordinate of ``symbols``."""
    out = {}
    for sid in symbols:
        g = np.zeros(store.dim)
        for j in range(store.dim):
            old = store.vectors[sid, j]
            store.vectors[sid, j] = old + h
            up = score_fn(store)
            store.vectors[sid, j] = old - h
            down = score_fn(store)
            store.vectors[sid, j] = old
            g[j] = (up - down) / (2 * h)
        out[sid] = g
    return out


def max_rel_error(analytic, numeric):
    """Largest per-symbol ``|a - n| / max(|a|, |n|)`` (norms), skipping pairs that are both ~0."""
    worst = 0.0
    for sid, n in numeric.items():
        a = analytic.get(sid, np.zeros_like(n))
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale < 1e-10:
            continue
        worst = max(worst, np.linalg.norm(a - n) / scale)
    return worst


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
