import math
import random

import numpy as np
import pytest

from ookgc.kg import TripleIndex, Vocab, inverse, inverse_triple
from ookgc.rules import (
    IncompleteRule,
    InterRuleCorrelation,
    LogicRule,
    RuleConfigError,
    RulePool,
    SPRule,
    candidate_rules,
    compute_rule_metrics,
    dump_pool,
    enumerate_incomplete_rules,
    generate_logic_rule_pool,
    load_pool,
    mine_rule_pool,
    parse_sp_rules,
    path_distance,
    score_confidences,
    search_inter_rule_paths,
    sp_rule_overlap_report,
)
from ookgc.synthetic import analogy_fixture, planted_rule_kg


def _closed(triples):
    return sorted(set(triples) | {inverse_triple(t) for t in triples})


def _adjacency(triples, n, num_rel):
    A = np.zeros((num_rel, n, n), dtype=np.int64)
    for h, r, t in triples:
        A[r, h, t] = 1
    return A


def join_oracle(A, head, body):
    """Support, HC and SC from boolean matrix products."""
    M = A[body[0]]
    for r in body[1:]:
        M = (M @ A[r] > 0).astype(np.int64)
    H = A[head]
    support = int(np.sum(M * H))
    n_body = int(M.sum())
    n_head = int(H.sum())
    if n_body == 0:
        return (0, 0.0, 0.0)
    return (support, support / n_head if n_head else 0.0, support / n_body)


def test_metrics_hand_example():
    # body r1 holds for 4 pairs, the head r for 2 of them and nothing else
    triples = [(0, 2, 1), (2, 2, 3), (4, 2, 5), (6, 2, 7), (0, 0, 1), (2, 0, 3)]
    idx = TripleIndex(_closed(triples))
    assert compute_rule_metrics(idx, LogicRule(0, (2,))) == (2, 1.0, 0.5)


def test_unused_body_gives_zero_metrics():
    idx = TripleIndex(_closed([(0, 0, 1)]))
    assert compute_rule_metrics(idx, LogicRule(0, (2, 4))) == (0, 0.0, 0.0)


def test_single_grounding_rule_filtered():
    idx = TripleIndex(_closed([(0, 0, 1), (0, 2, 1)]))
    assert generate_logic_rule_pool(idx, 0.0, 0.0) == []


def test_empty_graph_gives_empty_pool():
    assert generate_logic_rule_pool(TripleIndex([]), 0.0, 0.0) == []


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_join_oracle_on_random_graphs(seed):
    rng = random.Random(seed)
    n, base = 25, 3
    raw = {(rng.randrange(n), 2 * rng.randrange(base), rng.randrange(n)) for _ in range(70)}
    triples = _closed(raw)
    idx = TripleIndex(triples)
    A = _adjacency(triples, n, 2 * base)
    cands = candidate_rules(idx)
    assert cands
    for head, body in cands:
        assert compute_rule_metrics(idx, LogicRule(head, body)) == join_oracle(A, head, body)


def test_candidate_heads_are_base_relations():
    fx = planted_rule_kg(seed=1)
    assert all(h % 2 == 0 for h, _ in candidate_rules(fx.store.index))
    assert all(body != (h,) for h, body in candidate_rules(fx.store.index))


def test_enumerate_incomplete_rules_counts():
    rules = [LogicRule(0, (2,)), LogicRule(0, (2, 4)), LogicRule(2, (4, 1))]
    assert len(enumerate_incomplete_rules(rules)) == 5
    assert enumerate_incomplete_rules([]) == []


def test_incomplete_rule_observed_paths():
    rule = LogicRule(4, (0, 2))
    assert IncompleteRule(rule, 0).observed_path() == (4, inverse(2))
    assert IncompleteRule(rule, 1).observed_path() == (inverse(0), 4)
    assert IncompleteRule(LogicRule(4, (0,)), 0).observed_path() == (4,)
    with pytest.raises(ValueError):
        IncompleteRule(rule, 2)


# --------------------------------------------------------------------------
# Confidences


def test_confidence_hand_vectors():
    emb = np.zeros((6, 3))
    emb[0] = [1, 0, 0]
    emb[2] = [0, 1, 0]
    emb[4] = [1, 1, 1]
    assert path_distance(emb, (0, 2), 4) == pytest.approx(1.0)
    pool = score_confidences(RulePool([LogicRule(4, (0, 2))]), emb, top_k=None)
    assert pool.logic_rules[0].confidence == pytest.approx(math.exp(-1))
    assert pool.logic_rules[0].confidence == pytest.approx(0.36787944117144233)


def test_exact_composition_gives_confidence_one():
    emb = np.array([[1.0, 2.0], [0, 0], [3.0, -1.0], [0, 0], [4.0, 1.0], [0, 0]])
    pool = score_confidences(RulePool([LogicRule(4, (0, 2))]), emb, top_k=None)
    assert pool.logic_rules[0].confidence == 1.0


def test_missing_relation_embedding_is_config_error():
    with pytest.raises(RuleConfigError):
        score_confidences(RulePool([LogicRule(8, (0,))]), np.zeros((4, 2)))
    with pytest.raises(RuleConfigError):
        score_confidences(RulePool([LogicRule(0, (2,))]), np.zeros((4, 2)), decoder="complex")


def test_confidence_monotone_in_distance():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(8, 5))
    rules = [LogicRule(h, b) for h, b in [(0, (2,)), (0, (4, 6)), (2, (6,)), (4, (0, 3))]]
    pool = score_confidences(RulePool(rules), emb, top_k=None)
    pairs = sorted((path_distance(emb, r.body, r.head), r.confidence) for r in pool.logic_rules)
    confs = [c for _, c in pairs]
    assert all(0 < c <= 1 for c in confs)
    assert confs == sorted(confs, reverse=True)


def test_correlation_confidence_factorizes():
    fx = analogy_fixture()
    i = fx.info
    pool = mine_rule_pool(fx.store.index, i["alpha_hc"], i["alpha_sc"], i["alpha_pcra"])
    emb = np.random.default_rng(1).normal(size=(fx.store.num_relations, 4)) * 0.3
    scored = score_confidences(pool, emb)
    assert scored.correlations
    for c in scored.correlations:
        assert c.confidence == c.rule.confidence * c.incomplete.confidence
        d = path_distance(emb, c.incomplete.observed_path(), c.incomplete.missing_atom()[1])
        assert c.incomplete.confidence == pytest.approx(math.exp(-d))


def test_top_k_keeps_most_confident():
    emb = np.zeros((6, 2))
    emb[0] = [1, 0]
    emb[2] = [0, 3]
    emb[4] = [1, 0.5]
    rules = [LogicRule(4, (0,)), LogicRule(4, (2,)), LogicRule(0, (4,))]
    pool = score_confidences(RulePool(rules), emb, top_k=2)
    assert [r.key for r in pool.logic_rules] == [(4, (0,)), (0, (4,))]


# --------------------------------------------------------------------------
# Correlations


def test_analogy_fixture_yields_one_bridge_correlation():
    fx = analogy_fixture()
    i = fx.info
    pool = mine_rule_pool(fx.store.index, i["alpha_hc"], i["alpha_sc"], i["alpha_pcra"])
    assert len(pool.correlations) == 1
    c = pool.correlations[0]
    assert c.path == (i["bridge"],)
    assert c.anchor == 0 and c.incomplete.missing == 0
    assert (c.support, c.head_coverage, c.std_confidence) == (3, 3 / 7, 3 / 4)


def test_fanout_bridge_filtered_by_pcra():
    fx = analogy_fixture(fanout=200)
    i = fx.info
    pool = mine_rule_pool(fx.store.index, i["alpha_hc"], i["alpha_sc"], 0.01)
    assert pool.correlations == []
    assert len(pool.logic_rules) == 1


def test_unconnected_incomplete_grounding_gives_nothing():
    fx = analogy_fixture(n_pairs=4)
    store = fx.store
    sd = fx.info["bridge"]
    cut = [t for t in store.observed_triples() if t[1] not in (sd, inverse(sd))]
    idx = TripleIndex(cut)
    rule = LogicRule(*fx.rules[0])
    assert search_inter_rule_paths(idx, rule, IncompleteRule(rule, 0), 0.01, alpha_hc=0.3, alpha_sc=0.3) == []


def test_search_rejects_foreign_incomplete_rule():
    rule = LogicRule(4, (0, 2))
    with pytest.raises(ValueError):
        search_inter_rule_paths(TripleIndex([]), rule, IncompleteRule(LogicRule(4, (0, 2)), 0))


# --------------------------------------------------------------------------
# Serialization and determinism


def _pool_text(seed):
    fx = analogy_fixture()
    i = fx.info
    pool = mine_rule_pool(fx.store.index, i["alpha_hc"], i["alpha_sc"], i["alpha_pcra"], seed=seed)
    return fx, pool


def test_pool_round_trip_exact():
    fx, pool = _pool_text(0)
    emb = np.random.default_rng(2).normal(size=(fx.store.num_relations, 3))
    for p in (pool, score_confidences(pool, emb)):
        text = dump_pool(p, fx.store.vocab)
        again = load_pool(text, fx.store.vocab)
        assert dump_pool(again, fx.store.vocab) == text
        for a, b in zip(p.logic_rules, again.logic_rules):
            assert (a.key, a.support, a.head_coverage, a.std_confidence, a.confidence) == (
                b.key, b.support, b.head_coverage, b.std_confidence, b.confidence)


def test_mining_is_deterministic():
    fx = planted_rule_kg(seed=4)
    a = dump_pool(mine_rule_pool(fx.store.index, 0.1, 0.3, seed=1), fx.store.vocab)
    b = dump_pool(mine_rule_pool(fx.store.index, 0.1, 0.3, seed=1), fx.store.vocab)
    assert a == b


# --------------------------------------------------------------------------
# Symmetric-path rules


def test_sp_overlap_empty():
    assert sp_rule_overlap_report(RulePool(), []) == {"covered": 0, "total": 0, "fraction": 0.0}


def test_sp_overlap_eight_of_ten():
    v = Vocab(relations=[f"p{i}" for i in range(10)] + ["t"])
    t = v.relation_id("t")
    sps = [SPRule(t, (v.relation_id(f"p{i}"),)) for i in range(10)]
    corrs = []
    for sp in sps[:8]:
        # the correlation transfers a `t` triple across the symmetric bridge
        rule = LogicRule(v.relation_id("p9"), (t,))
        corrs.append(InterRuleCorrelation(rule, IncompleteRule(rule, 0), sp.bridge(), 0))
    report = sp_rule_overlap_report(RulePool([], corrs), sps)
    assert report == {"covered": 8, "total": 10, "fraction": 0.8}


def test_parse_sp_rules():
    v = Vocab(relations=["a", "b", "c"])
    rules = parse_sp_rules("# comment\nc <- a\nc <- a b_inv\n", v)
    assert rules == [SPRule(4, (0,)), SPRule(4, (0, 3))]
    assert rules[1].bridge() == (0, 3, 2, 1)
