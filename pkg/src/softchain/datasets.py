"""Bundled datasets: the toy family KB, Nations and UMLS.

Nations and UMLS are stored as tab-separated ``subject predicate object``
lines with the usual train/valid/test splits.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .kb import Atom, KnowledgeBase, RuleTemplate, Vocab, parse_kb, parse_templates, parse_triples

BUILTIN = ("family", "nations", "umls")


@dataclass
class Dataset:
    name: str
    kb: KnowledgeBase  # training facts
    valid: list[Atom]
    test: list[Atom]
    templates: list[RuleTemplate]

    @property
    def known(self) -> set[Atom]:
        return set(self.kb.fact_set) | set(self.valid) | set(self.test)


def data_text(name: str, filename: str) -> str:
    """Contents of a bundled data file."""
    return resources.files(__package__).joinpath("data").joinpath(name).joinpath(filename).read_text()


def _read(spec: str) -> str:
    """``builtin:name/file`` or a filesystem path."""
    if spec.startswith("builtin:"):
        name, _, filename = spec[len("builtin:"):].partition("/")
        return data_text(name, filename)
    return Path(spec).read_text()


def read_kb(spec: str, vocab: Vocab | None = None) -> KnowledgeBase:
    """Clause file (``.pl``) or TSV triples, chosen by extension."""
    fmt = "clauses" if spec.endswith(".pl") else "tsv"
    return parse_kb(_read(spec), fmt=fmt, vocab=vocab)


def read_triples(spec: str, vocab: Vocab) -> list[Atom]:
    if spec.endswith(".pl"):
        return [f.head for f in parse_kb(_read(spec), vocab=vocab).facts]
    return [r.head for r in parse_triples(_read(spec), vocab)]


def read_templates(spec: str) -> list[RuleTemplate]:
    return parse_templates(_read(spec))


def load_dataset(name: str) -> Dataset:
    """One of :data:`BUILTIN`; all splits share a single vocabulary."""
    if name not in BUILTIN:
        raise ValueError(f"unknown dataset {name!r}; choose from {', '.join(BUILTIN)}")
    if name == "family":
        kb = read_kb("builtin:family/train.pl")
        return Dataset(name, kb, [], [], read_templates("builtin:family/templates.txt"))
    kb = read_kb(f"builtin:{name}/train.txt")
    valid = read_triples(f"builtin:{name}/valid.txt", kb.vocab)
    test = read_triples(f"builtin:{name}/test.txt", kb.vocab)
    return Dataset(name, kb, valid, test, read_templates(f"builtin:{name}/templates.txt"))
