"""Seeded synthetic knowledge graphs with planted rules and correlations."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .kg import SplitSpec, Triple, TripleStore, Vocab, make_ookg_split


@dataclass
class Fixture:
    store: TripleStore
    rules: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    info: dict = field(default_factory=dict)


def _store(vocab: Vocab, train, valid=(), test=()) -> TripleStore:
    return TripleStore(vocab, observed=train, valid=valid, test=test)


def planted_rule_kg(n_entities: int = 100, seed: int = 0, noise: int = 60) -> Fixture:
    """KG with two length-2 rules and one length-1 rule plus random noise.

    Planted: ``c <- a b``, ``f <- d e`` and ``h <- g``; relation ``n`` holds
    unrelated random edges.
    """
    rng = random.Random(seed)
    vocab = Vocab([f"e{i}" for i in range(n_entities)], list("abcdefghn"))
    R = {name: vocab.relation_id(name) for name in "abcdefghn"}
    ents = list(range(n_entities))
    facts: set[Triple] = set()

    def rand_edges(rel, per_entity):
        out = set()
        for x in ents:
            for _ in range(per_entity):
                out.add((x, rel, rng.choice(ents)))
        return out

    a = rand_edges(R["a"], 1)
    b = rand_edges(R["b"], 1)
    d = rand_edges(R["d"], 1)
    e = rand_edges(R["e"], 1)
    g = {(x, R["g"], rng.choice(ents)) for x in rng.sample(ents, n_entities // 2)}
    facts |= a | b | d | e | g
    b_out = {(h): [t for (hh, _, t) in b if hh == h] for h in ents}
    e_out = {(h): [t for (hh, _, t) in e if hh == h] for h in ents}
    for x, _, z in a:
        for y in b_out[z]:
            if rng.random() < 0.9:
                facts.add((x, R["c"], y))
    for x, _, z in d:
        for y in e_out[z]:
            if rng.random() < 0.8:
                facts.add((x, R["f"], y))
    for x, _, y in g:
        if rng.random() < 0.9:
            facts.add((x, R["h"], y))
    for _ in range(noise):
        facts.add((rng.choice(ents), R[rng.choice("cfhn")], rng.choice(ents)))
    planted = [(R["c"], (R["a"], R["b"])), (R["f"], (R["d"], R["e"])), (R["h"], (R["g"],))]
    return Fixture(_store(vocab, sorted(facts)), planted)


def analogy_fixture(n_pairs: int = 4, distractors: int = 5, fanout: int = 0) -> Fixture:
    """Solar-system/atom analogy with one missing ``surroundedBy`` fact.

    Each of ``n_pairs`` solar instances ``(S_i, P_i, G_i)`` satisfies
    ``attract <- surroundedBy composedOf`` and is bridged by ``scaleDown`` to
    an atom instance ``(N_i, E_i, F_i)``; the last atom lacks
    ``surroundedBy(N, E)``.  Extra ``composedOf`` edges into each ``G_i``
    keep the reversed rules below useful thresholds (0.3).  ``fanout`` adds
    that many extra ``scaleDown`` successors to the last solar centre.
    """
    vocab = Vocab(relations=["surroundedBy", "composedOf", "attract", "scaleDown"])
    sb, co, at, sd = (vocab.relation_id(n) for n in ["surroundedBy", "composedOf", "attract", "scaleDown"])
    facts: list[Triple] = []
    for i in range(n_pairs):
        S, P, G = (vocab.entity_id(f"{k}{i}") for k in ("sun", "planet", "gravity"))
        N, E, F = (vocab.entity_id(f"{k}{i}") for k in ("nucleus", "electron", "force"))
        facts += [(S, sb, P), (P, co, G), (S, at, G)]
        if i < n_pairs - 1:
            facts.append((N, sb, E))
        facts += [(E, co, F), (N, at, F), (S, sd, N)]
        for k in range(distractors):
            facts.append((vocab.entity_id(f"dust{i}_{k}"), co, G))
    last_sun = vocab.entity_id(f"sun{n_pairs - 1}")
    for k in range(fanout):
        facts.append((last_sun, sd, vocab.entity_id(f"particle{k}")))
    missing = (vocab.entity_id(f"nucleus{n_pairs - 1}"), sb, vocab.entity_id(f"electron{n_pairs - 1}"))
    store = _store(vocab, facts)
    return Fixture(
        store,
        [(at, (sb, co))],
        {"missing": missing, "bridge": sd, "alpha_hc": 0.3, "alpha_sc": 0.3, "alpha_pcra": 0.01},
    )


def ookg_benchmark(seed: int = 0, ookg_percent: float = 10.0, valid_fraction: float = 0.5) -> Fixture:
    """300-entity, 8-relation benchmark with an OOKG subject split.

    Entity roles: 150 ``X`` subjects, 75 ``Z`` parts, 75 ``Y`` targets.
    Planted structure:

    * ``attract(x, y) <- surroundedBy(x, z) & composedOf(z, y)``
    * ``likes(x, y) <- knows(x, y)``
    * ``owns(x, y) <- holds(x, z) & composedOf(z, y)``
    * ``analogOf`` bridges into 50 "clean" subjects whose ``attract``
      facts are all rule-generated; everyone else has three random
      ``attract`` edges, so ``surroundedBy`` is only recoverable through
      the bridge (an inter-rule correlation), not by a reversed rule.

    Hidden facts of 45 candidate subjects form the test pool; the split
    turns ``ookg_percent`` of all entities (drawn from those subjects) into
    OOKG entities and moves half of their test triples to validation.
    """
    rng = random.Random(seed)
    rel_names = ["surroundedBy", "composedOf", "attract", "likes", "knows", "owns", "holds", "analogOf"]
    X = [f"x{i}" for i in range(150)]
    Z = [f"z{i}" for i in range(75)]
    Y = [f"y{i}" for i in range(75)]
    vocab = Vocab(X + Z + Y, rel_names)
    sb, co, at, li, kn, ow, ho, an = (vocab.relation_id(n) for n in rel_names)
    xs = list(range(150))
    zs = list(range(150, 225))
    ys = list(range(225, 300))

    perm = ys[:]
    rng.shuffle(perm)
    part_of = dict(zip(zs, perm))  # composedOf is a bijection Z -> Y
    clean = set(rng.sample(xs, 50))
    facts: dict[Triple, str] = {}

    def add(t, kind="train"):
        facts.setdefault(t, kind)

    for z, y in part_of.items():
        add((z, co, y))
    around = {}
    for x in xs:
        z = rng.choice(zs)
        around[x] = z
        add((x, sb, z))
        add((x, at, part_of[z]))
        if x not in clean:
            for y in rng.sample(ys, 3):
                add((x, at, y))
        for y in rng.sample(ys, rng.randint(2, 3)):
            add((x, kn, y))
            if rng.random() < 0.9:
                add((x, li, y))
        for z2 in rng.sample(zs, 2):
            add((x, ho, z2))
            if rng.random() < 0.9:
                add((x, ow, part_of[z2]))
    sources = [x for x in xs if x not in clean]
    for x in sorted(clean):
        add((rng.choice(sources), an, x))

    candidates = rng.sample(sorted(clean), 15) + rng.sample(sources, 30)
    hidden: list[Triple] = []
    for x in candidates:
        if x in clean:
            hidden.append((x, sb, around[x]))
        else:
            hidden.append((x, at, part_of[around[x]]))
        hidden += [t for t in facts if t[0] == x and t[1] in (li, ow)]
    hidden_set = set(hidden)
    train = [t for t in facts if t not in hidden_set]
    full = TripleStore(vocab, observed=train, test=hidden)
    spec = SplitSpec(mode="subject", amount=ookg_percent, seed=seed, policy="entities", valid_from_test=valid_fraction)
    store = make_ookg_split(full, spec)
    return Fixture(
        store,
        [(at, (sb, co)), (li, (kn,)), (ow, (ho, co))],
        {"clean": sorted(clean), "candidates": candidates, "alpha_hc": 0.1, "alpha_sc": 0.5, "alpha_pcra": 0.01},
    )
