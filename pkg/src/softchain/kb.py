"""Symbolic knowledge base: vocabulary, terms, clauses, parsing and rendering.

Atoms are plain 3-tuples ``(predicate, subject, object)``.  A constant term is
its integer symbol id; a variable is a :class:`Var`.  Facts are
:class:`Rule` objects with an empty body.

Clause grammar (one clause per line, ``%`` starts a comment)::

    fatherOf(abe, homer).
    grandfatherOf(X, Y) :- fatherOf(X, Z), parentOf(Z, Y).

TSV triples are ``subject<TAB>predicate<TAB>object``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

PREDICATE = "predicate"
CONSTANT = "constant"


class ParseError(ValueError):
    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True, slots=True)
class Var:
    name: str

    def __repr__(self) -> str:
        return self.name


Term = Union[int, Var]
Atom = tuple  # (Term, Term, Term)


@dataclass(frozen=True)
class Symbol:
    id: int
    name: str
    kind: str

    @property
    def is_slot(self) -> bool:
        """Parameterised predicate created from a rule template."""
        return self.name.startswith("#")


class Vocab:
    """Append-only symbol table; ids are dense and stable."""

    def __init__(self) -> None:
        self.symbols: list[Symbol] = []
        self._index: dict[tuple[str, str], int] = {}

    def intern(self, name: str, kind: str) -> int:
        key = (kind, name)
        sid = self._index.get(key)
        if sid is None:
            sid = len(self.symbols)
            self.symbols.append(Symbol(sid, name, kind))
            self._index[key] = sid
        return sid

    def get(self, name: str, kind: str) -> int | None:
        return self._index.get((kind, name))

    def id(self, name: str, kind: str) -> int:
        try:
            return self._index[(kind, name)]
        except KeyError:
            raise KeyError(f"unknown {kind} {name!r}") from None

    def name(self, sid: int) -> str:
        return self.symbols[sid].name

    def __len__(self) -> int:
        return len(self.symbols)

    def __iter__(self) -> Iterator[Symbol]:
        return iter(self.symbols)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def entities(self) -> list[int]:
        return [s.id for s in self.symbols if s.kind == CONSTANT]

    def predicates(self, include_slots: bool = False) -> list[int]:
        return [s.id for s in self.symbols if s.kind == PREDICATE and (include_slots or not s.is_slot)]

    def copy(self) -> "Vocab":
        v = Vocab()
        v.symbols = list(self.symbols)
        v._index = dict(self._index)
        return v


@dataclass(frozen=True)
class Rule:
    """``head :- body``; a fact when the body is empty.

    ``index`` is the 1-based clause number used in proof trails; it does not
    take part in equality.
    """

    head: Atom
    body: tuple = ()
    index: int = field(default=0, compare=False)

    @property
    def is_fact(self) -> bool:
        return not self.body

    def variables(self) -> list[Var]:
        seen: dict[Var, None] = {}
        for atom in (self.head, *self.body):
            for t in atom:
                if isinstance(t, Var):
                    seen.setdefault(t)
        return list(seen)

    def label(self) -> str:
        return f"{'fact' if self.is_fact else 'rule'}{self.index}"


class KnowledgeBase:
    """Facts and rules over a shared vocabulary.  Treated as immutable."""

    def __init__(self, vocab: Vocab, facts: Iterable[Rule] = (), rules: Iterable[Rule] = ()) -> None:
        self.vocab = vocab
        kept: list[Rule] = []
        seen: set[Atom] = set()
        for f in facts:
            if f.head in seen:
                logger.warning("dropping duplicate fact %s", render_atom(f.head, vocab))
                continue
            seen.add(f.head)
            kept.append(f)
        self.facts: tuple[Rule, ...] = tuple(kept)
        self.rules: tuple[Rule, ...] = tuple(rules)
        self.fact_set: frozenset[Atom] = frozenset(seen)
        self.fact_array = (
            np.array([f.head for f in self.facts], dtype=np.int64)
            if self.facts
            else np.zeros((0, 3), dtype=np.int64)
        )
        self._fact_pos = {f.head: i for i, f in enumerate(self.facts)}

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, KnowledgeBase)
            and self.vocab == other.vocab
            and self.facts == other.facts
            and self.rules == other.rules
        )

    def __repr__(self) -> str:
        return f"KnowledgeBase({len(self.facts)} facts, {len(self.rules)} rules, {len(self.vocab)} symbols)"

    def __contains__(self, atom: Atom) -> bool:
        return tuple(atom) in self.fact_set

    def fact_position(self, atom: Atom) -> int:
        """Row of ``atom`` in :attr:`facts` / :attr:`fact_array`."""
        return self._fact_pos[tuple(atom)]

    def next_index(self) -> int:
        return max((c.index for c in (*self.facts, *self.rules)), default=0) + 1

    def with_rules(self, rules: Iterable[Rule]) -> "KnowledgeBase":
        return KnowledgeBase(self.vocab, self.facts, (*self.rules, *rules))

    def with_facts(self, facts: Iterable[Rule]) -> "KnowledgeBase":
        return KnowledgeBase(self.vocab, (*self.facts, *facts), self.rules)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<neck>:-)|(?P<punct>[(),.])|(?P<slot>#\d+)|(?P<ident>[A-Za-z0-9_][A-Za-z0-9_\-]*)|(?P<bad>\S))"
)


def _tokens(line: str, lineno: int) -> list[tuple[str, str, int]]:
    out = []
    pos = 0
    line = line.rstrip()
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None:  # only trailing whitespace left
            break
        kind = m.lastgroup
        text = m.group(kind)
        col = m.start(kind) + 1
        if kind == "bad":
            raise ParseError(f"unexpected character {text!r}", lineno, col)
        out.append((kind, text, col))
        pos = m.end()
    return out


def _strip_comment(line: str) -> str:
    i = line.find("%")
    return line if i < 0 else line[:i]


def is_variable_name(name: str) -> bool:
    return name[:1].isupper()


class _Parser:
    def __init__(self, tokens, lineno: int, allow_slots: bool = False) -> None:
        self.toks = tokens
        self.i = 0
        self.lineno = lineno
        self.allow_slots = allow_slots

    def error(self, msg: str):
        col = self.toks[self.i][2] if self.i < len(self.toks) else (self.toks[-1][2] + 1 if self.toks else 1)
        return ParseError(msg, self.lineno, col)

    def peek(self) -> tuple[str, str, int] | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def expect(self, text: str) -> None:
        tok = self.peek()
        if tok is None or tok[1] != text:
            raise self.error(f"expected {text!r}")
        self.i += 1

    def atom(self) -> tuple[tuple[str, str, int], list[tuple[str, int]]]:
        tok = self.peek()
        if tok is None:
            raise self.error("expected an atom")
        kind, text, col = tok
        if kind == "slot":
            if not self.allow_slots:
                raise self.error("parameterised predicate outside a template")
        elif kind != "ident":
            raise self.error("expected a predicate name")
        elif is_variable_name(text):
            raise self.error("predicate must be a constant symbol")
        self.i += 1
        self.expect("(")
        args = []
        while True:
            tok = self.peek()
            if tok is None or tok[0] != "ident":
                raise self.error("expected a term")
            args.append((tok[1], tok[2]))
            self.i += 1
            tok = self.peek()
            if tok is not None and tok[1] == ",":
                self.i += 1
                continue
            break
        self.expect(")")
        if len(args) != 2:
            raise ParseError(f"arity must be 2, got {len(args)}", self.lineno, col)
        return (kind, text, col), args

    def clause(self):
        head = self.atom()
        body = []
        tok = self.peek()
        if tok is not None and tok[0] == "neck":
            self.i += 1
            body.append(self.atom())
            while (tok := self.peek()) is not None and tok[1] == ",":
                self.i += 1
                body.append(self.atom())
        self.expect(".")
        if self.peek() is not None:
            raise self.error("one clause per line")
        return head, body


def _lines(text: str) -> Iterator[tuple[int, str]]:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if line.strip():
            yield lineno, line


def parse_kb(text: str, *, fmt: str = "clauses", vocab: Vocab | None = None) -> KnowledgeBase:
    """Parse clause text (``fmt="clauses"``) or TSV triples (``fmt="tsv"``).

    Symbols are interned into ``vocab`` (a fresh one by default) in order of
    first appearance, so parsing the same text twice yields the same ids.
    """
    vocab = Vocab() if vocab is None else vocab
    if fmt == "tsv":
        return KnowledgeBase(vocab, parse_triples(text, vocab))
    if fmt != "clauses":
        raise ValueError(f"unknown format {fmt!r}")
    facts, rules = [], []
    for n, (lineno, line) in enumerate(_lines(text), start=1):
        head, body = _Parser(_tokens(line, lineno), lineno).clause()
        atoms = []
        for (_, pname, _), args in (head, *body):
            terms = [vocab.intern(pname, PREDICATE)]
            for name, col in args:
                if is_variable_name(name):
                    if not body:
                        raise ParseError(f"variable {name} in a fact", lineno, col)
                    terms.append(Var(name))
                else:
                    terms.append(vocab.intern(name, CONSTANT))
            atoms.append(tuple(terms))
        clause = Rule(atoms[0], tuple(atoms[1:]), index=n)
        (rules if body else facts).append(clause)
    return KnowledgeBase(vocab, facts, rules)


def parse_triples(text: str, vocab: Vocab, *, labelled: bool = False) -> list:
    """TSV ``subject\\tpredicate\\tobject`` lines -> fact rules.

    With ``labelled=True`` a fourth column holds a label (``1``/``-1`` or
    ``1``/``0``) and ``(atom, label)`` pairs are returned instead.
    """
    out = []
    for n, (lineno, line) in enumerate(_lines(text), start=1):
        cols = line.rstrip("\r\n").split("\t")
        want = 4 if labelled else 3
        if len(cols) != want:
            raise ParseError(f"expected {want} tab-separated columns, got {len(cols)}", lineno, 1)
        s, p, o = (c.strip() for c in cols[:3])
        atom = (vocab.intern(p, PREDICATE), vocab.intern(s, CONSTANT), vocab.intern(o, CONSTANT))
        if labelled:
            out.append((atom, 1 if int(cols[3]) > 0 else 0))
        else:
            out.append(Rule(atom, (), index=n))
    return out


def parse_atom(text: str, vocab: Vocab, *, intern: bool = True) -> Atom:
    """Parse a single atom such as ``grandpaOf(abe, bart)``; the trailing dot is optional."""
    text = text.strip()
    if not text.endswith("."):
        text += "."
    p = _Parser(_tokens(text, 1), 1)
    (_, pname, _), args = p.atom()
    p.expect(".")
    look = vocab.intern if intern else vocab.id
    terms = [look(pname, PREDICATE)]
    for name, _ in args:
        terms.append(Var(name) if is_variable_name(name) else look(name, CONSTANT))
    return tuple(terms)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_term(t: Term, vocab: Vocab) -> str:
    return t.name if isinstance(t, Var) else vocab.name(t)


def render_atom(atom: Atom, vocab: Vocab) -> str:
    p, s, o = atom
    return f"{render_term(p, vocab)}({render_term(s, vocab)}, {render_term(o, vocab)})"


def render_rule(rule: Rule, vocab: Vocab) -> str:
    head = render_atom(rule.head, vocab)
    if not rule.body:
        return head + "."
    return head + " :- " + ", ".join(render_atom(a, vocab) for a in rule.body) + "."


def render_kb(kb: KnowledgeBase) -> str:
    clauses = sorted((*kb.facts, *kb.rules), key=lambda c: c.index)
    return "".join(render_rule(c, kb.vocab) + "\n" for c in clauses)


# ---------------------------------------------------------------------------
# substitution
# ---------------------------------------------------------------------------


def resolve(t: Term, s: Mapping[Var, Term]) -> Term:
    """Follow variable bindings in ``s`` until a constant or an unbound variable."""
    seen = None
    while isinstance(t, Var) and t in s:
        if seen is None:
            seen = {t}
        t = s[t]
        if t in seen:
            raise ValueError(f"cyclic binding through {t}")
        if isinstance(t, Var):
            seen.add(t)
    return t


def substitute(atom: Atom, s: Mapping[Var, Term]) -> Atom:
    if not s:
        return atom
    return tuple(resolve(t, s) for t in atom)


def is_ground(atom: Atom) -> bool:
    return not any(isinstance(t, Var) for t in atom)


# ---------------------------------------------------------------------------
# rule templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemplateAtom:
    predicate: Union[int, str]  # slot number or a concrete predicate name
    args: tuple[str, str]


@dataclass(frozen=True)
class RuleTemplate:
    count: int
    head: TemplateAtom
    body: tuple[TemplateAtom, ...]

    @property
    def n_slots(self) -> int:
        return len(self.slots())

    def slots(self) -> list[int]:
        return sorted({a.predicate for a in (self.head, *self.body) if isinstance(a.predicate, int)})


_COUNT = re.compile(r"\s*(\d+)\s+")


def parse_templates(text: str) -> list[RuleTemplate]:
    """Lines ``N  #1(X, Y) :- #2(Y, X).``; ``#i`` marks a learned predicate slot."""
    out = []
    for lineno, line in _lines(text):
        m = _COUNT.match(line)
        if m is None:
            raise ParseError("expected an instantiation count", lineno, 1)
        count = int(m.group(1))
        if count < 1:
            raise ParseError("count must be >= 1", lineno, m.start(1) + 1)
        offset = m.end()
        toks = [(k, t, c + offset) for k, t, c in _tokens(line[offset:], lineno)]
        head, body = _Parser(toks, lineno, allow_slots=True).clause()
        if not body:
            raise ParseError("a template needs a body", lineno, offset + 1)
        atoms = []
        for (kind, pname, _), args in (head, *body):
            for name, col in args:
                if not is_variable_name(name):
                    raise ParseError("template arguments must be variables", lineno, col)
            pred = int(pname[1:]) if kind == "slot" else pname
            atoms.append(TemplateAtom(pred, (args[0][0], args[1][0])))
        tpl = RuleTemplate(count, atoms[0], tuple(atoms[1:]))
        slots = tpl.slots()
        if slots != list(range(1, len(slots) + 1)):
            missing = sorted(set(range(1, max(slots, default=0) + 1)) - set(slots))
            raise ParseError(f"slot indices must be contiguous from #1; missing #{missing[0]}", lineno, offset + 1)
        out.append(tpl)
    return out


def render_template(t: RuleTemplate) -> str:
    def atom(a: TemplateAtom) -> str:
        p = f"#{a.predicate}" if isinstance(a.predicate, int) else a.predicate
        return f"{p}({a.args[0]}, {a.args[1]})"

    return f"{t.count}\t{atom(t.head)} :- " + ", ".join(atom(a) for a in t.body) + "."


def atoms_of(rules: Sequence[Rule]) -> list[Atom]:
    return [r.head for r in rules]
