import json

import numpy as np
import pytest

from softchain.embed import init_embeddings
from softchain.kb import parse_kb, parse_templates
from softchain.prover import Prover, ProverConfig
from softchain.tape import Tape
from softchain.train import (
    SGD, Adam, TrainConfig, epoch_losses, loss, sample_negatives, train,
)

from conftest import FAMILY, SIMPSONS, random_fact_kb


def test_negatives_examples():
    kb = parse_kb(SIMPSONS)
    fact = kb.facts[0].head
    negs = sample_negatives(fact, kb, 2, 0)
    assert len(negs) == 2
    assert negs[0][0] == fact[0] and negs[0][2] == fact[2]  # subject replaced first
    assert negs[1][0] == fact[0] and negs[1][1] == fact[1]  # then the object
    assert all(n not in kb for n in negs)
    assert sample_negatives(fact, kb, 2, 0) == negs
    assert sample_negatives(fact, kb, 0, 0) == []


def test_negatives_exhaustion():
    kb = parse_kb("p(a, a).\np(a, b).\np(b, a).\np(b, b).")
    with pytest.raises(ValueError):
        sample_negatives(kb.facts[0].head, kb, 1, 0)


def test_loss_node():
    t = Tape()
    assert t.value(loss(t, t.const(0.5), 0)) == pytest.approx(0.6931471605599453, abs=1e-7)


def test_zero_epochs_leave_store_unchanged():
    kb = parse_kb(FAMILY)
    store = init_embeddings(kb.vocab, 4, 0)
    res = train(kb, [], TrainConfig(epochs=0, dim=4), store=store)
    assert np.array_equal(res.store.vectors, store.vectors)
    assert res.log == [] and res.rules == []


def test_given_store_not_modified():
    kb = parse_kb(FAMILY)
    store = init_embeddings(kb.vocab, 4, 0)
    before = store.vectors.copy()
    train(kb, [], TrainConfig(epochs=2, batch_size=3, dim=4, learning_rate=0.1), store=store)
    assert np.array_equal(store.vectors, before)


def test_sgd_zero_gradient_is_noop():
    p = np.arange(6.0).reshape(2, 3)
    SGD(0.5).step(p, np.zeros_like(p))
    assert np.array_equal(p, np.arange(6.0).reshape(2, 3))


def test_adam_first_step_is_lr_sized():
    p = np.zeros(3)
    Adam(0.1).step(p, np.array([2.0, -1.0, 0.0]))
    assert np.allclose(p, [-0.1, 0.1, 0.0], atol=1e-6)


def test_adam_grows_with_vocab():
    opt = Adam(0.1)
    p = np.zeros((2, 2))
    opt.step(p, np.ones((2, 2)))
    q = np.vstack([p, np.zeros((1, 2))])
    opt.step(q, np.ones((3, 2)))
    assert q.shape == (3, 2)


def test_masking_prevents_self_proof():
    kb = parse_kb(FAMILY)
    store = init_embeddings(kb.vocab, 4, 0)
    for row, f in enumerate(kb.facts):
        res = Prover(kb, store, mask=[row]).prove(f.head)
        assert f.label() not in [l for l, _ in res.trail]
        assert res.score < 1.0


def test_log_records():
    kb = parse_kb(FAMILY)
    tpl = parse_templates("1 #1(X, Y) :- #2(X, Z), #3(Z, Y).")
    lines = []

    class Sink:
        def write(self, s):
            lines.append(s)

    res = train(kb, tpl, TrainConfig(epochs=3, batch_size=2, dim=4, seed=1), log_file=Sink())
    assert len(res.log) == 6
    rec = json.loads(lines[0])
    assert set(rec) == {"epoch", "batch", "loss", "wall_ms", "index_rebuilds"}
    assert [r["epoch"] for r in res.log] == [0, 0, 1, 1, 2, 2]
    store, rules, log = res
    assert len(rules) == 1 and log is res.log


def test_index_rebuild_schedule():
    kb, *_ = random_fact_kb(20, 2, 6, seed=0)
    cfg = TrainConfig(epochs=2, batch_size=5, dim=4, rebuild_every=2, prover=ProverConfig(mode="exact_knn"))
    res = train(kb, [], cfg)
    assert [r["index_rebuilds"] for r in res.log] == [0, 1, 1, 2, 2, 3, 3, 4]
    default = train(kb, [], TrainConfig(epochs=2, batch_size=5, dim=4, prover=ProverConfig(mode="exact_knn")))
    assert [r["index_rebuilds"] for r in default.log] == [0, 0, 0, 1, 1, 1, 1, 2]


def test_reproducible():
    kb = parse_kb(FAMILY)
    tpl = parse_templates("1 #1(X, Y) :- #2(X, Z), #3(Z, Y).")
    cfg = TrainConfig(epochs=5, batch_size=2, dim=4, seed=3, learning_rate=0.05)
    a, b = train(kb, tpl, cfg), train(kb, tpl, cfg)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    assert np.array_equal(a.store.vectors, b.store.vectors)


def test_exhaustive_and_full_knn_train_identically():
    kb, *_ = random_fact_kb(30, 3, 8, seed=1)
    tpl = parse_templates("2 #1(X, Y) :- #2(Y, X).\n1 #1(X, Y) :- #2(X, Z), #3(Z, Y).")
    base = dict(epochs=3, batch_size=8, dim=5, seed=0, learning_rate=0.05, mu=2.0, negatives_per_positive=2)
    a = train(kb, tpl, TrainConfig(**base, prover=ProverConfig(mode="exhaustive")))
    b = train(kb, tpl, TrainConfig(**base, prover=ProverConfig(mode="exact_knn", k=len(kb.facts))))
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    assert np.array_equal(a.store.vectors, b.store.vectors)


@pytest.mark.parametrize("seed", range(4))
def test_positive_loss_non_increasing_on_family(seed):
    # without negatives the objective is the positive loss alone
    kb = parse_kb(FAMILY)
    tpl = parse_templates("3 #1(X, Y) :- #2(X, Z), #3(Z, Y).")
    cfg = TrainConfig(epochs=10, batch_size=3, dim=10, mu=5.0, learning_rate=0.1,
                      negatives_per_positive=0, seed=seed)
    losses = epoch_losses(train(kb, tpl, cfg).log)
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_config_validation():
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0), dict(mu=0),
                dict(negatives_per_positive=-1), dict(rebuild_every=0), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
