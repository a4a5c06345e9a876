"""Rule templates: instantiation with learned predicate slots, and decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embed import EmbeddingStore
from .kb import PREDICATE, KnowledgeBase, Rule, RuleTemplate, Var, Vocab, render_rule


@dataclass(frozen=True)
class DecodedRule:
    rule: Rule
    confidence: float
    source: int  # clause index of the instantiated rule

    def render(self, vocab: Vocab) -> str:
        return f"{self.confidence:.3f}\t{render_rule(self.rule, vocab)[:-1]}"


def instantiate_templates(templates: Sequence[RuleTemplate], kb: KnowledgeBase, store: EmbeddingStore,
                          seed: int = 0) -> list[Rule]:
    """``count`` copies of each template, every slot a fresh predicate symbol.

    Fresh symbols are interned into ``kb.vocab`` and get Gaussian embeddings
    appended to ``store``.  Returns the new rules; combine them with
    ``kb.with_rules``.
    """
    rng = np.random.default_rng(seed)
    vocab = kb.vocab
    index = kb.next_index()
    rules = []
    for tpl in templates:
        for _ in range(tpl.count):
            slots = {s: vocab.intern(f"#{index}.{s}", PREDICATE) for s in tpl.slots()}

            def atom(a):
                p = slots[a.predicate] if isinstance(a.predicate, int) else vocab.intern(a.predicate, PREDICATE)
                return (p, Var(a.args[0]), Var(a.args[1]))

            rules.append(Rule(atom(tpl.head), tuple(atom(a) for a in tpl.body), index=index))
            index += 1
    store.grow(len(vocab), rng)
    return rules


def decode_symbol(slot: int, candidates: Sequence[int], store: EmbeddingStore, by: str = "kernel") -> tuple[int, float]:
    """Nearest candidate predicate to ``slot``; returns ``(symbol, kernel)``.

    ``by="distance"`` selects by L2 distance instead; both give the same
    symbol because the kernel is monotone in distance.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    if by == "kernel":
        ks = store.kernel_row(slot, cand)
        i = int(np.argmax(ks))
        return int(cand[i]), float(ks[i])
    if by == "distance":
        d = store.vectors[cand] - store.vectors[slot]
        i = int(np.argmin(np.einsum("ij,ij->i", d, d)))
        return int(cand[i]), store.kernel(slot, int(cand[i]))
    raise ValueError(f"unknown selector {by!r}")


def extract_rules(kb: KnowledgeBase, store: EmbeddingStore, min_confidence: float = 0.5) -> list[DecodedRule]:
    """Decode every rule with learned slots into KB predicates.

    Confidence is the smallest slot-to-predicate kernel in the rule.  Rules
    below ``min_confidence`` are dropped; the rest come back highest first.
    """
    vocab = kb.vocab
    targets = vocab.predicates(include_slots=False)
    if not targets:
        return []
    out = []
    for rule in kb.rules:
        slots = {t[0] for t in (rule.head, *rule.body) if vocab.symbols[t[0]].is_slot}
        if not slots:
            continue
        decoded = {s: decode_symbol(s, targets, store) for s in sorted(slots)}
        conf = min(k for _, k in decoded.values())
        if conf < min_confidence:
            continue

        def atom(a):
            return (decoded[a[0]][0] if a[0] in decoded else a[0], a[1], a[2])

        out.append(DecodedRule(Rule(atom(rule.head), tuple(atom(a) for a in rule.body), rule.index), conf, rule.index))
    out.sort(key=lambda d: -d.confidence)
    return out


def slot_symbols(vocab: Vocab) -> list[int]:
    return [s.id for s in vocab if s.is_slot]
