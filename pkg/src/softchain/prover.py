"""Soft backward chaining: unify, OR and AND modules and query scoring.

A proof state carries a substitution, a score node on the :class:`Tape` and a
trail of ``(clause label, unification score)`` steps.  ``FAIL`` is a value.

Facts are unified with a goal in one vectorised pass.  When
``ProverConfig.merge_states`` is on, fact branches that end up with the same
substitution are collapsed to the best-scoring one before they reach the tape
(and states with equal substitutions are collapsed again before the rest of a
rule body is proven).  Both collapses are exact for the max-aggregated score
and for its gradient: a dropped state can never be the arg-max, and its
descendants would repeat the kept state's computation with a lower or equal
score.

Ties are broken by enumeration order: facts in KB order, then rules in KB
order, depth first.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ann import hnsw_build
from .embed import EmbeddingStore
from .kb import Atom, KnowledgeBase, Rule, Var, is_ground, render_atom, resolve, substitute
from .tape import Tape

MODES = ("exhaustive", "exact_knn", "hnsw_knn")

# full kernel rows are cached per symbol below this vocabulary size
ROW_CACHE_LIMIT = 20000


class _Fail:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "FAIL"

    def __bool__(self) -> bool:
        return False


FAIL = _Fail()


@dataclass(slots=True)
class ProofState:
    psi: dict
    rho: int
    trail: tuple = ()


@dataclass
class ProverConfig:
    max_depth: int = 2
    k: int = 1
    mode: str = "exhaustive"
    merge_states: bool = True
    ef_search: int = 64
    hnsw_m: int = 16
    ef_construction: int = 200
    index_seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class ProofResult:
    score: float
    node: int
    trail: tuple
    tape: Tape = field(repr=False)
    state: ProofState | None = field(default=None, repr=False)


def fact_vectors(kb: KnowledgeBase, store: EmbeddingStore) -> np.ndarray:
    """Concatenated ``[theta_p; theta_s; theta_o]`` per fact."""
    v = store.vectors
    fa = kb.fact_array
    return np.hstack([v[fa[:, 0]], v[fa[:, 1]], v[fa[:, 2]]])


class FactIndex:
    """Neighbour index over a snapshot of the fact embeddings.

    Ids are fact rows in ``kb.facts``.  The snapshot goes stale as embeddings
    train; that only changes which facts are retrieved, never their scores.

    In ``exact_knn`` mode the squared distance to a fact's concatenated
    embedding is the sum of three per-slot symbol distances, so a search
    costs three row lookups and a sum over facts instead of a scan of the
    concatenated vectors.  Symbol distance rows can be cached per embedding
    snapshot (see :meth:`nearest_goal`).
    """

    _serials = itertools.count()

    def __init__(self, kb: KnowledgeBase, store: EmbeddingStore, mode: str = "exact_knn",
                 M: int = 16, ef_construction: int = 200, seed: int = 0) -> None:
        if mode not in ("exact_knn", "hnsw_knn"):
            raise ValueError(f"no index for mode {mode!r}")
        self.mode = mode
        self.serial = next(FactIndex._serials)
        self.size = len(kb.facts)
        self.facts = kb.fact_array
        self.index = None
        if mode == "exact_knn":
            self.symbols = store.vectors.copy()
        elif self.size:
            vecs = fact_vectors(kb, store)
            self.index = hnsw_build(vecs, M=M, ef_construction=max(ef_construction, M), seed=seed)

    def nearest(self, query: np.ndarray, k: int, ef: int = 64) -> list[int]:
        """Up to ``k`` fact rows nearest to a concatenated ``[p; s; o]`` query."""
        if self.size == 0:
            return []
        k = min(k, self.size)
        if self.index is not None:
            return [i for i, _ in self.index.search(query, k, max(ef, k))]
        dim = self.symbols.shape[1]
        parts = [self._sqdist(query[j * dim:(j + 1) * dim]) for j in range(3)]
        return self._top(parts, k)

    def nearest_goal(self, goal: Atom, vectors: np.ndarray, k: int, ef: int = 64,
                     cache: dict | None = None) -> list[int]:
        """:meth:`nearest` for a ground goal under the current ``vectors``.

        ``cache`` holds symbol distance rows; it must be dropped whenever
        ``vectors`` change.
        """
        if self.index is not None or self.size == 0:
            return self.nearest(np.concatenate([vectors[goal[0]], vectors[goal[1]], vectors[goal[2]]]), k, ef)
        parts = []
        for sym in goal:
            key = ("nn", self.serial, sym)
            row = None if cache is None else cache.get(key)
            if row is None:
                row = self._sqdist(vectors[sym])
                if cache is not None:
                    cache[key] = row
            parts.append(row)
        return self._top(parts, min(k, self.size))

    def _sqdist(self, v: np.ndarray) -> np.ndarray:
        d = self.symbols - v
        return np.einsum("ij,ij->i", d, d)

    def _top(self, parts: list[np.ndarray], k: int) -> list[int]:
        f = self.facts
        d = parts[0][f[:, 0]] + parts[1][f[:, 1]] + parts[2][f[:, 2]]
        if k < len(d):
            # keep ties with the k-th distance so the lowest-row tie-break is exact
            kth = np.partition(d, k - 1)[k - 1]
            cand = np.flatnonzero(d <= kth)
        else:
            cand = np.arange(len(d))
        order = np.lexsort((cand, d[cand]))[:k]
        return cand[order].tolist()


def build_fact_index(kb: KnowledgeBase, store: EmbeddingStore, cfg: ProverConfig) -> FactIndex | None:
    if cfg.mode == "exhaustive":
        return None
    return FactIndex(kb, store, cfg.mode, cfg.hnsw_m, cfg.ef_construction, cfg.index_seed)


class Prover:
    """Proves goals against one KB and one embedding snapshot.

    Args:
        kb: facts and rules.
        store: embeddings; must not change while this prover is in use.
        cfg: depth, neighbour mode and k.
        index: fact index for the k-NN modes (built on demand if missing).
        mask: fact rows excluded from unification (used to hide a training
            fact from its own proof).
        cache: optional dict of kernel rows shared between provers over the
            same embedding snapshot.
    """

    def __init__(self, kb: KnowledgeBase, store: EmbeddingStore, cfg: ProverConfig | None = None,
                 index: FactIndex | None = None, *, mask: Iterable[int] = (), cache: dict | None = None,
                 tape: Tape | None = None) -> None:
        self.kb = kb
        self.store = store
        self.cfg = cfg or ProverConfig()
        if self.cfg.mode != "exhaustive" and index is None and kb.facts:
            index = build_fact_index(kb, store, self.cfg)
        self.index = index
        self.mask = frozenset(int(m) for m in mask)
        self.tape = tape if tape is not None else Tape()
        self._rows = {} if cache is None else cache
        self._fresh = itertools.count(1)
        self._facts = kb.fact_array
        self._fact_labels = [f.label() for f in kb.facts]
        all_rows = np.arange(len(kb.facts), dtype=np.int64)
        if self.mask:
            all_rows = all_rows[~np.isin(all_rows, list(self.mask))]
        self._all = all_rows
        self._row_cache = len(store) <= ROW_CACHE_LIMIT

    # -- kernels -------------------------------------------------------------

    def _row(self, a: int) -> np.ndarray:
        row = self._rows.get(a)
        if row is None:
            row = self._rows[a] = self.store.kernel_row(a)
        return row

    def _kernels(self, a: int, ids: np.ndarray) -> np.ndarray:
        if self._row_cache:
            return self._row(a)[ids]
        return self.store.kernel_row(a, ids)

    def kernel(self, a: int, b: int) -> float:
        if self._row_cache:
            return float(self._row(a)[b])
        return float(self.store.kernel_row(a, np.array([b]))[0])

    # -- modules -------------------------------------------------------------

    def initial_state(self) -> ProofState:
        return ProofState({}, self.tape.const(1.0), ())

    def _unify(self, H: Sequence, G: Sequence, S: ProofState):
        if len(H) != len(G):
            return FAIL, 0.0
        psi = S.psi
        copied = False
        knodes = []
        step = 1.0
        for h, g in zip(H, G):
            h = resolve(h, psi)
            g = resolve(g, psi)
            if isinstance(h, Var):
                if h != g:
                    if not copied:
                        psi, copied = dict(psi), True
                    psi[h] = g
            elif isinstance(g, Var):
                if not copied:
                    psi, copied = dict(psi), True
                psi[g] = h
            else:
                v = self.kernel(h, g)
                knodes.append(self.tape.kernel(h, g, v))
                if v < step:
                    step = v
        rho = self.tape.min([S.rho, *knodes]) if knodes else S.rho
        return ProofState(psi, rho, S.trail), step

    def unify(self, H: Sequence, G: Sequence, S: ProofState) -> ProofState:
        """Soft unification of two term lists under state ``S``."""
        if S is FAIL:
            return FAIL
        return self._unify(H, G, S)[0]

    def _rename(self, rule: Rule) -> tuple[Atom, tuple]:
        n = next(self._fresh)
        ren = {v: Var(f"{v.name}'{n}") for v in rule.variables()}
        head = tuple(ren.get(t, t) if isinstance(t, Var) else t for t in rule.head)
        body = tuple(tuple(ren.get(t, t) if isinstance(t, Var) else t for t in a) for a in rule.body)
        return head, body

    def candidates(self, goal: Atom) -> np.ndarray:
        """Fact rows to unify with ``goal``, ascending."""
        if self.index is None or self.cfg.mode == "exhaustive" or not is_ground(goal):
            return self._all
        k = min(self.cfg.k, len(self._all))
        if k == 0:
            return self._all[:0]
        rows = self.index.nearest_goal(goal, self.store.vectors, k + len(self.mask), self.cfg.ef_search,
                                       self._rows if self._row_cache else None)
        if self.mask:
            rows = [r for r in rows if r not in self.mask]
        return np.sort(np.asarray(rows[:k], dtype=np.int64))

    def _fact_branches(self, goal: Atom, S: ProofState) -> list[ProofState]:
        cand = self.candidates(goal)
        if len(cand) == 0:
            return []
        var_slots = [i for i in range(3) if isinstance(goal[i], Var)]
        if len(set(goal[i] for i in var_slots)) < len(var_slots):
            # repeated goal variable: fall back to scalar unification per fact
            out = []
            for row in cand:
                s1, step = self._unify(tuple(int(x) for x in self._facts[row]), goal, S)
                s1.trail = S.trail + ((self._fact_labels[row], step),)
                out.append(s1)
            return out
        const_slots = [i for i in range(3) if i not in var_slots]
        sub = self._facts[cand]
        ks = [self._kernels(goal[i], sub[:, i]) for i in const_slots]
        n = len(cand)
        if ks:
            step = ks[0] if len(ks) == 1 else np.minimum.reduce(ks)
        else:
            step = np.ones(n)
        tape = self.tape
        if self.cfg.merge_states:
            score = np.minimum(step, tape.values[S.rho])
            if not var_slots:
                winners = [int(np.argmax(score))]
            else:
                key = sub[:, var_slots[0]].copy()
                if len(var_slots) > 1:
                    key = key * (len(self.store) + 1) + sub[:, var_slots[1]]
                order = np.lexsort((np.arange(n), -score, key))
                ks_sorted = key[order]
                first = np.ones(n, dtype=bool)
                first[1:] = ks_sorted[1:] != ks_sorted[:-1]
                winners = np.sort(order[first]).tolist()
        else:
            winners = range(n)
        out = []
        for w in winners:
            row = int(cand[w])
            knodes = [tape.kernel(goal[i], int(sub[w, i]), float(ks[j][w])) for j, i in enumerate(const_slots)]
            rho = tape.min([S.rho, *knodes]) if knodes else S.rho
            psi = S.psi
            if var_slots:
                psi = dict(psi)
                for i in var_slots:
                    psi[goal[i]] = int(sub[w, i])
            out.append(ProofState(psi, rho, S.trail + ((self._fact_labels[row], float(step[w])),)))
        return out

    def or_step(self, goal: Atom, depth: int, S: ProofState) -> list[ProofState]:
        """Unify ``goal`` with the selected facts and every rule; prove rule bodies."""
        if S is FAIL or depth <= 0:
            # every clause would reach and(_, 0, _) = FAIL
            return []
        out = self._fact_branches(goal, S) if self.kb.facts else []
        if depth > 1:
            # with depth 1 a body's first sub-goal is proven at depth 0 and fails
            for rule in self.kb.rules:
                head, body = self._rename(rule)
                s1, step = self._unify(head, goal, S)
                if s1 is FAIL:
                    continue
                s1.trail = S.trail + ((rule.label(), step),)
                out.extend(s for s in self.and_step(body, depth, s1) if s is not FAIL)
        return out

    def and_step(self, body: Sequence[Atom], depth: int, S: ProofState) -> list:
        """Prove a conjunction of sub-goals; returns states (or ``[FAIL]``)."""
        if S is FAIL or depth <= 0:
            return [FAIL]
        if not body:
            return [S]
        goal = substitute(body[0], S.psi)
        mids = self.or_step(goal, depth - 1, S)
        if self.cfg.merge_states and len(body) > 1 and len(mids) > 1:
            mids = self._merge(mids)
        out = []
        for s in mids:
            out.extend(self.and_step(body[1:], depth, s))
        return out

    def _merge(self, states: list[ProofState]) -> list[ProofState]:
        values = self.tape.values
        best: dict = {}
        for i, s in enumerate(states):
            key = frozenset(s.psi.items())
            j = best.get(key)
            if j is None or values[s.rho] > values[states[j].rho]:
                best[key] = i
        return [states[i] for i in sorted(best.values())]

    def prove(self, goal: Atom) -> ProofResult:
        """Max proof score of ``goal`` over all successful proof states."""
        S0 = self.initial_state()
        states = self.or_step(tuple(goal), self.cfg.max_depth, S0)
        if not states:
            node = self.tape.const(0.0)
            return ProofResult(0.0, node, (), self.tape, None)
        node = self.tape.max([s.rho for s in states])
        best = states[self.tape.args[node][1]]
        return ProofResult(self.tape.values[node], node, best.trail, self.tape, best)

    def score(self, goal: Atom) -> float:
        return self.prove(goal).score


def prove(goal: Atom, cfg: ProverConfig, kb: KnowledgeBase, store: EmbeddingStore,
          index: FactIndex | None = None, mask: Iterable[int] = ()) -> ProofResult:
    return Prover(kb, store, cfg, index, mask=mask).prove(goal)


def format_trail(trail: Sequence[tuple[str, float]], scores: bool = False) -> str:
    if scores:
        return " -> ".join(f"{label}[{s:.4f}]" for label, s in trail)
    return " -> ".join(label for label, _ in trail)


def explain(result: ProofResult, goal: Atom, kb: KnowledgeBase) -> str:
    lines = [
        f"query\t{render_atom(goal, kb.vocab)}",
        f"score\t{result.score:.6f}",
        f"trail\t{format_trail(result.trail) or '(none)'}",
        f"steps\t{' -> '.join(f'{s:.6f}' for _, s in result.trail) or '(none)'}",
    ]
    return "\n".join(lines) + "\n"
