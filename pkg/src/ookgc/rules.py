"""Closed-path rule mining, inter-rule correlations, and confidence scoring.

A logic rule with body ``(r1, ..., rL)`` and head ``r`` uses variables
``0..L``: body atom ``k`` is ``(v_k, r_k, v_{k+1})`` and the head is
``(v_0, r, v_L)``.  Groundings are entity tuples indexed by variable.
"""

from __future__ import annotations

import math
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .kg import RelPath, Triple, TripleIndex, TripleStore, Vocab, inverse, path_flows, paths_between

Atom = tuple[int, int, int]  # (var, relation, var)
Binding = tuple[int, ...]


class RuleConfigError(ValueError):
    """Relation parameters do not cover the rule pool."""


@dataclass(eq=False)
class LogicRule:
    head: int
    body: tuple[int, ...]
    support: int = 0
    head_coverage: float = 0.0
    std_confidence: float = 0.0
    confidence: float | None = None

    def __post_init__(self):
        self.body = tuple(self.body)
        if len(self.body) not in (1, 2):
            raise ValueError("rule bodies have one or two atoms")

    @property
    def key(self) -> tuple[int, tuple[int, ...]]:
        return (self.head, self.body)

    @property
    def num_vars(self) -> int:
        return len(self.body) + 1

    def body_atoms(self) -> list[Atom]:
        return [(k, r, k + 1) for k, r in enumerate(self.body)]

    def head_atom(self) -> Atom:
        return (0, self.head, len(self.body))

    def format(self, vocab: Vocab | None = None) -> str:
        name = vocab.relation_label if vocab else str
        return f"{name(self.head)} <- {' '.join(name(r) for r in self.body)}"


@dataclass(eq=False)
class IncompleteRule:
    parent: LogicRule
    missing: int
    confidence: float | None = None

    def __post_init__(self):
        if not 0 <= self.missing < len(self.parent.body):
            raise ValueError("the missing atom must be a body atom")

    @property
    def key(self):
        return (self.parent.key, self.missing)

    def missing_atom(self) -> Atom:
        return self.parent.body_atoms()[self.missing]

    def observed_atoms(self) -> list[Atom]:
        atoms = [a for k, a in enumerate(self.parent.body_atoms()) if k != self.missing]
        return atoms + [self.parent.head_atom()]

    def observed_path(self) -> RelPath:
        """Relations walking from the missing atom's head to its tail without it."""
        body = self.parent.body
        i = self.missing
        back = tuple(inverse(body[k]) for k in range(i - 1, -1, -1))
        fwd_tail = tuple(inverse(body[k]) for k in range(len(body) - 1, i, -1))
        return back + (self.parent.head,) + fwd_tail


@dataclass(eq=False)
class InterRuleCorrelation:
    rule: LogicRule
    incomplete: IncompleteRule
    path: RelPath
    anchor: int
    support: int = 0
    head_coverage: float = 0.0
    std_confidence: float = 0.0
    confidence: float | None = None

    @property
    def key(self):
        return (self.rule.key, self.incomplete.missing, self.path, self.anchor)


@dataclass
class RulePool:
    logic_rules: list[LogicRule] = field(default_factory=list)
    correlations: list[InterRuleCorrelation] = field(default_factory=list)
    alpha_hc: float = 0.0
    alpha_sc: float = 0.0
    alpha_pcra: float = 0.01
    seed: int = 0
    mapping: str = "exp"

    def incomplete_rules(self) -> list[IncompleteRule]:
        seen: dict = {}
        for c in self.correlations:
            seen.setdefault(c.incomplete.key, c.incomplete)
        return list(seen.values())

    def only_logic(self) -> "RulePool":
        return replace(self, correlations=[])


# --------------------------------------------------------------------------
# Bindings


def _order_atoms(atoms: list[Atom], bound: set[int]) -> list[Atom] | None:
    """Order atoms so each one after the first touches a bound variable."""
    pending = list(atoms)
    ordered = []
    bound = set(bound)
    while pending:
        pick = next((a for a in pending if a[0] in bound or a[2] in bound), None)
        if pick is None:
            if bound:
                return None
            pick = pending[0]
        pending.remove(pick)
        ordered.append(pick)
        bound.update((pick[0], pick[2]))
    return ordered


def bind_atoms(index: TripleIndex, atoms: list[Atom], num_vars: int, fixed: dict[int, int] | None = None) -> list[Binding]:
    """All complete variable assignments satisfying every atom in ``index``."""
    fixed = dict(fixed or {})
    order = _order_atoms(atoms, set(fixed))
    if order is None:
        return []
    out: list[Binding] = []

    def rec(k: int, env: dict[int, int]):
        if k == len(order):
            if len(env) == num_vars:
                out.append(tuple(env[v] for v in range(num_vars)))
            return
        a, r, b = order[k]
        if a in env and b in env:
            if (env[a], r, env[b]) in index:
                rec(k + 1, env)
        elif a in env:
            for t in index.successors(env[a], r):
                env[b] = t
                rec(k + 1, env)
                del env[b]
        elif b in env:
            for h in index.successors(env[b], inverse(r)):
                env[a] = h
                rec(k + 1, env)
                del env[a]
        else:
            for h, t in index.pairs(r):
                if a == b and h != t:
                    continue
                env[a] = h
                env[b] = t
                rec(k + 1, env)
                del env[a]
                del env[b]

    rec(0, fixed)
    return out


def ground_atom(atom: Atom, binding: Binding) -> Triple:
    return (binding[atom[0]], atom[1], binding[atom[2]])


def _cap(items: list, cap: int | None, rng: random.Random) -> list:
    if cap is None or len(items) <= cap:
        return items
    return rng.sample(items, cap)


def body_groundings(index: TripleIndex, rule: LogicRule) -> list[Binding]:
    return bind_atoms(index, rule.body_atoms(), rule.num_vars)


def complete_groundings(index: TripleIndex, rule: LogicRule) -> list[Binding]:
    """Groundings whose body and head are all present."""
    return bind_atoms(index, rule.body_atoms() + [rule.head_atom()], rule.num_vars)


def incomplete_groundings(index: TripleIndex, inc: IncompleteRule) -> list[Binding]:
    """Bindings where every atom but the missing one is present."""
    return bind_atoms(index, inc.observed_atoms(), inc.parent.num_vars)


# --------------------------------------------------------------------------
# Logic rules


def _as_index(g) -> TripleIndex:
    return g.index if isinstance(g, TripleStore) else g


def compute_rule_metrics(graph, rule: LogicRule) -> tuple[int, float, float]:
    """(support, head coverage, standard confidence) over entity pairs."""
    index = _as_index(graph)
    n = rule.num_vars
    body_pairs = {(b[0], b[n - 1]) for b in body_groundings(index, rule)}
    if not body_pairs:
        return (0, 0.0, 0.0)
    head_pairs = set(index.pairs(rule.head))
    support = len(body_pairs & head_pairs)
    hc = support / len(head_pairs) if head_pairs else 0.0
    sc = support / len(body_pairs)
    return (support, hc, sc)


def candidate_rules(graph, max_heads: int | None = None, seed: int = 0) -> list[tuple[int, tuple[int, ...]]]:
    """Rule shapes (head, body) induced by paths parallel to observed triples.

    Heads are restricted to base relations; a rule over an inverse head is
    the same rule read backwards.
    """
    index = _as_index(graph)
    heads = sorted(t for t in index if not t[1] & 1)
    if max_heads is not None and len(heads) > max_heads:
        heads = sorted(random.Random(seed).sample(heads, max_heads))
    found: dict[tuple[int, tuple[int, ...]], None] = {}
    for h, r, t in heads:
        for body in paths_between(index, h, t, 2):
            if body == (r,):
                continue
            found.setdefault((r, body))
    return sorted(found)


def generate_logic_rule_pool(
    graph,
    alpha_hc: float,
    alpha_sc: float,
    max_heads: int | None = None,
    seed: int = 0,
) -> list[LogicRule]:
    index = _as_index(graph)
    rules = []
    for head, body in candidate_rules(index, max_heads, seed):
        rule = LogicRule(head, body)
        rule.support, rule.head_coverage, rule.std_confidence = compute_rule_metrics(index, rule)
        if rule.support > 1 and rule.head_coverage > alpha_hc and rule.std_confidence > alpha_sc:
            rules.append(rule)
    return rules


def enumerate_incomplete_rules(rules: Iterable[LogicRule]) -> list[IncompleteRule]:
    return [IncompleteRule(rule, i) for rule in rules for i in range(len(rule.body))]


# --------------------------------------------------------------------------
# Inter-rule correlations


class _FlowCache:
    def __init__(self, index: TripleIndex, max_len: int):
        self.index = index
        self.max_len = max_len
        self._cache: dict[int, dict[RelPath, dict[int, float]]] = {}

    def __call__(self, src: int) -> dict[RelPath, dict[int, float]]:
        got = self._cache.get(src)
        if got is None:
            got = self._cache[src] = path_flows(self.index, src, self.max_len)
        return got


def _by_position(bindings: list[Binding], pos: int) -> dict[int, list[Binding]]:
    out: dict[int, list[Binding]] = defaultdict(list)
    for b in bindings:
        out[b[pos]].append(b)
    return out


def search_inter_rule_paths(
    graph,
    rule: LogicRule,
    incomplete: IncompleteRule,
    alpha_pcra: float = 0.01,
    max_len: int = 3,
    alpha_hc: float = 0.0,
    alpha_sc: float = 0.0,
    cap: int | None = 1000,
    seed: int = 0,
    flows: Callable | None = None,
) -> list[InterRuleCorrelation]:
    """Paths linking a complete grounding to an incomplete one at one position.

    A ``(path, anchor)`` pair becomes a candidate when it reaches, with PCRA
    reliability above ``alpha_pcra``, an incomplete grounding whose missing
    triple is absent; per grounding pair only the shortest linking paths
    count.  Candidates are then scored over all reached incomplete
    groundings: body and support count distinct inferred missing triples,
    support only those already present.
    """
    if incomplete.parent is not rule:
        raise ValueError("incomplete rule does not derive from this rule")
    index = _as_index(graph)
    flows = flows or _FlowCache(index, max_len)
    rng = random.Random(seed)
    comp = _cap(complete_groundings(index, rule), cap, rng)
    every = incomplete_groundings(index, incomplete)
    missing = incomplete.missing_atom()
    absent = [b for b in every if ground_atom(missing, b) not in index]
    if not comp or not absent:
        return []

    positions = range(rule.num_vars)
    absent_at = [_by_position(absent, a) for a in positions]
    discovered: dict[tuple[Binding, Binding], list[tuple[int, RelPath]]] = defaultdict(list)
    for g in comp:
        for a in positions:
            targets = absent_at[a]
            for seq, dist in flows(g[a]).items():
                if len(seq) > max_len:
                    continue
                for ent, res in dist.items():
                    if res > alpha_pcra and ent in targets:
                        for g2 in targets[ent]:
                            discovered[(g, g2)].append((a, seq))
    candidates: dict[tuple[int, RelPath], None] = {}
    for links in discovered.values():
        shortest = min(len(s) for _, s in links)
        for a, s in sorted(links):
            if len(s) == shortest:
                candidates.setdefault((a, s))

    every_at = [_by_position(every, a) for a in positions]
    head_instances = len(index.pairs(missing[1]))
    out = []
    for a, seq in sorted(candidates, key=lambda c: (len(c[1]), c)):
        reached: set[Triple] = set()
        for g in comp:
            dist = flows(g[a]).get(seq, {})
            for ent, res in dist.items():
                if res <= alpha_pcra:
                    continue
                for g2 in every_at[a].get(ent, ()):
                    if g2 != g:
                        reached.add(ground_atom(missing, g2))
        body = len(reached)
        support = sum(t in index for t in reached)
        hc = support / head_instances if head_instances else 0.0
        sc = support / body if body else 0.0
        if support > 1 and hc > alpha_hc and sc > alpha_sc:
            out.append(InterRuleCorrelation(rule, incomplete, seq, a, support, hc, sc))
    return out


def mine_rule_pool(
    graph,
    alpha_hc: float,
    alpha_sc: float,
    alpha_pcra: float = 0.01,
    correlations: bool = True,
    max_heads: int | None = None,
    cap: int | None = 1000,
    seed: int = 0,
) -> RulePool:
    """Logic rules plus (optionally) their inter-rule correlations."""
    index = _as_index(graph)
    rules = generate_logic_rule_pool(index, alpha_hc, alpha_sc, max_heads, seed)
    corrs: list[InterRuleCorrelation] = []
    if correlations:
        flows = _FlowCache(index, 3)
        for inc in enumerate_incomplete_rules(rules):
            corrs.extend(
                search_inter_rule_paths(
                    index, inc.parent, inc, alpha_pcra,
                    alpha_hc=alpha_hc, alpha_sc=alpha_sc, cap=cap, seed=seed, flows=flows,
                )
            )
    return RulePool(rules, corrs, alpha_hc, alpha_sc, alpha_pcra, seed)


# --------------------------------------------------------------------------
# Confidences

MAPPINGS: dict[str, Callable[[float], float]] = {
    "exp": lambda d: math.exp(-d),
    "inverse": lambda d: 1.0 / (1.0 + d),
}


def path_distance(rel_emb: np.ndarray, path: Sequence[int], target: int) -> float:
    """Norm of the summed path embeddings minus the target embedding.

    For diagonal bilinear relations the Frobenius norm of the matrix
    difference equals the L2 norm of the diagonals, so one routine serves
    both decoder kinds.
    """
    n = rel_emb.shape[0]
    for r in (*path, target):
        if not 0 <= r < n:
            raise RuleConfigError(f"no embedding for relation id {r}")
    diff = rel_emb[list(path)].sum(axis=0) - rel_emb[target]
    return float(np.linalg.norm(diff))


def score_confidences(
    pool: RulePool,
    rel_emb: np.ndarray,
    decoder: str = "distmult",
    top_k: int | None = 2000,
) -> RulePool:
    """Return a copy of ``pool`` with embedding-derived confidences.

    ``decoder`` selects the path composition; both supported kinds compose
    by summation and differ only in how relation parameters are read.
    """
    if decoder not in ("distmult", "transe"):
        raise RuleConfigError(f"unsupported decoder {decoder!r}")
    rel_emb = np.asarray(rel_emb, dtype=np.float64)
    if rel_emb.ndim == 3:  # full matrices
        rel_emb = rel_emb.reshape(rel_emb.shape[0], -1)
    squash = MAPPINGS[pool.mapping]

    rules: dict = {}
    for rule in pool.logic_rules:
        rules[rule.key] = replace(rule, confidence=squash(path_distance(rel_emb, rule.body, rule.head)))
    incs: dict = {}
    corrs = []
    for c in pool.correlations:
        rule = rules.get(c.rule.key)
        if rule is None:
            rule = replace(c.rule, confidence=squash(path_distance(rel_emb, c.rule.body, c.rule.head)))
            rules[c.rule.key] = rule
        inc = incs.get(c.incomplete.key)
        if inc is None:
            inc = IncompleteRule(rule, c.incomplete.missing)
            inc.confidence = squash(path_distance(rel_emb, inc.observed_path(), inc.missing_atom()[1]))
            incs[inc.key] = inc
        corrs.append(replace(c, rule=rule, incomplete=inc, confidence=rule.confidence * inc.confidence))

    logic = [rules[r.key] for r in pool.logic_rules]
    if top_k is not None:
        logic = sorted(logic, key=lambda r: -r.confidence)[:top_k]
        corrs = sorted(corrs, key=lambda c: -c.confidence)[:top_k]
    return replace(pool, logic_rules=logic, correlations=corrs)


# --------------------------------------------------------------------------
# Serialization


def _fmt(x) -> str:
    return "-" if x is None else repr(float(x))


def _parse_float(s: str):
    return None if s == "-" else float(s)


def dump_pool(pool: RulePool, vocab: Vocab) -> str:
    lines = [
        f"# alpha_hc={pool.alpha_hc!r} alpha_sc={pool.alpha_sc!r} alpha_pcra={pool.alpha_pcra!r} "
        f"seed={pool.seed} mapping={pool.mapping}"
    ]
    for r in pool.logic_rules:
        lines.append(
            f"{r.format(vocab)} | {r.support} {_fmt(r.head_coverage)} {_fmt(r.std_confidence)} {_fmt(r.confidence)}"
        )
    for c in pool.correlations:
        path = " ".join(vocab.relation_label(x) for x in c.path)
        lines.append(
            f"{c.rule.format(vocab)} | {c.support} {_fmt(c.head_coverage)} {_fmt(c.std_confidence)} "
            f"{_fmt(c.confidence)} | {c.incomplete.missing} {_fmt(c.incomplete.confidence)} | {path} | {c.anchor}"
        )
    return "\n".join(lines) + "\n"


def load_pool(text: str, vocab: Vocab) -> RulePool:
    pool = RulePool()
    rules: dict = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for item in line[1:].split():
                k, _, v = item.partition("=")
                if k in ("alpha_hc", "alpha_sc", "alpha_pcra"):
                    setattr(pool, k, float(v))
                elif k == "seed":
                    pool.seed = int(v)
                elif k == "mapping":
                    pool.mapping = v
            continue
        parts = [p.strip() for p in line.split("|")]
        head_s, _, body_s = parts[0].partition("<-")
        head = vocab.relation_id(head_s.strip(), create=False)
        body = tuple(vocab.relation_id(b, create=False) for b in body_s.split())
        sup, hc, sc, conf = parts[1].split()
        if len(parts) == 2:
            rule = LogicRule(head, body, int(sup), float(hc), float(sc), _parse_float(conf))
            rules[rule.key] = rule
            pool.logic_rules.append(rule)
            continue
        rule = rules.get((head, body)) or LogicRule(head, body)
        miss_s, inc_conf = parts[2].split()
        inc = IncompleteRule(rule, int(miss_s), _parse_float(inc_conf))
        path = tuple(vocab.relation_id(p, create=False) for p in parts[3].split())
        pool.correlations.append(
            InterRuleCorrelation(rule, inc, path, int(parts[4]), int(sup), float(hc), float(sc), _parse_float(conf))
        )
    return pool


# --------------------------------------------------------------------------
# Symmetric-path rule overlap


@dataclass(frozen=True)
class SPRule:
    """``(x, p, w) & (x', p, w) & (x, target, y) -> (x', target, y)``."""

    target: int
    path: RelPath

    def bridge(self) -> RelPath:
        return self.path + tuple(inverse(r) for r in reversed(self.path))


def parse_sp_rules(text: str, vocab: Vocab) -> list[SPRule]:
    """One rule per line: ``target_rel <- p1 [p2 ...]``."""
    out = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, _, body = line.partition("<-")
        out.append(
            SPRule(
                vocab.relation_id(head.strip(), create=False),
                tuple(vocab.relation_id(p, create=False) for p in body.split()),
            )
        )
    return out


def sp_rule_overlap_report(pool: RulePool, sp_rules: Sequence[SPRule]) -> dict:
    """How many symmetric-path rules the mined correlations can express.

    An SP rule is covered when some correlation transfers a triple of the
    same relation across the SP rule's symmetric bridge path.
    """
    keys = {(c.incomplete.missing_atom()[1], c.path) for c in pool.correlations}
    keys |= {(inverse(rel), path) for rel, path in keys}
    covered = sum(1 for sp in sp_rules if (sp.target, sp.bridge()) in keys)
    total = len(sp_rules)
    return {"covered": covered, "total": total, "fraction": covered / total if total else 0.0}
