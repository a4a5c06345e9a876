import pytest

from softchain.datasets import BUILTIN, load_dataset, read_kb


@pytest.mark.parametrize("name", BUILTIN)
def test_builtin_loads(name):
    ds = load_dataset(name)
    assert ds.kb.facts and ds.templates
    ents = set(ds.kb.vocab.entities())
    for s, o in [(a[1], a[2]) for a in ds.valid + ds.test]:
        assert s in ents and o in ents
    assert set(ds.kb.fact_set) <= ds.known


def test_split_sizes():
    nations = load_dataset("nations")
    umls = load_dataset("umls")
    assert len(nations.kb.vocab.entities()) == 14
    assert len(umls.kb.vocab.entities()) == 135
    assert nations.valid and nations.test and umls.valid and umls.test


def test_family_has_rule_and_facts():
    kb = read_kb("builtin:family/kb.pl")
    assert len(kb.rules) == 1
    assert len(load_dataset("family").templates) == 1


def test_unknown_dataset():
    with pytest.raises(ValueError):
        load_dataset("countries")


def test_read_from_path(tmp_path):
    p = tmp_path / "kb.tsv"
    p.write_text("a\tp\tb\nb\tp\tc\n")
    assert len(read_kb(str(p)).facts) == 2
