"""Rule grounding, virtual neighbors, and soft-label inference."""

from __future__ import annotations

import random
import weakref
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Container, Iterable, Mapping, Sequence

import numpy as np

from .kg import Triple, TripleIndex, Vocab
from .logic import logistic, t_and, t_implies, truncate
from .rules import (
    InterRuleCorrelation,
    LogicRule,
    RulePool,
    _FlowCache,
    bind_atoms,
    body_groundings,
    complete_groundings,
    ground_atom,
)


class InferenceError(ValueError):
    """A grounding refers to a virtual triple without a soft label."""


class OracleError(RuntimeError):
    pass


@dataclass(eq=False)
class Grounding:
    """One instantiated rule, reduced to ``premise -> conclusion``.

    ``premise`` lists observed triples; ``premise_virtual`` lists indices of
    virtual triples that also sit in the premise (only possible for a
    correlation whose incomplete-rule head is itself inferred).  For a logic
    grounding the conclusion is the head; for a correlation it is the
    incomplete rule's missing body triple, concluded from the complete
    grounding (truth 1) and the incomplete rule's remaining atoms.
    """

    kind: str
    rule: LogicRule | InterRuleCorrelation
    confidence: float
    premise: tuple[Triple, ...]
    conclusion: int
    premise_virtual: tuple[int, ...] = ()
    source: tuple = ()

    @property
    def virtual(self) -> tuple[int, ...]:
        return (self.conclusion,) + self.premise_virtual


@dataclass
class VirtualNeighborSet:
    triples: list[Triple] = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    truth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    support: list[list[int]] = field(default_factory=list)
    _pos: dict[Triple, int] = field(default_factory=dict, repr=False)

    def add(self, t: Triple) -> int:
        idx = self._pos.get(t)
        if idx is None:
            idx = self._pos[t] = len(self.triples)
            self.triples.append(t)
            self.support.append([])
        return idx

    def index_of(self, t: Triple) -> int | None:
        return self._pos.get(t)

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, t) -> bool:
        return t in self._pos

    def edges(self) -> list[Triple]:
        return list(self.triples)


# --------------------------------------------------------------------------
# Grounding


def _sample(items: list, cap: int | None, rng: random.Random, focus: Container[int] | None, touch) -> list:
    if focus is not None:
        items = [x for x in items if touch(x)]
    if cap is None or len(items) <= cap:
        return items
    return rng.sample(items, cap)


# Raw bindings depend only on the index, so they are reused across refreshes.
_BINDINGS: "weakref.WeakKeyDictionary[TripleIndex, dict]" = weakref.WeakKeyDictionary()


def _cached(index: TripleIndex, key, compute):
    store = _BINDINGS.setdefault(index, {})
    got = store.get(key)
    if got is None:
        got = store[key] = compute()
    return got


def _correlation_pairs(index: TripleIndex, corr: InterRuleCorrelation, alpha_pcra: float, flows) -> list:
    """``(g, g2)`` pairs, one per incomplete grounding ``g2``.

    The complete grounding ``g`` is taken as fully true, so pairs sharing
    ``g2`` are the same constraint; the first ``g`` found is kept.
    """
    atoms = corr.incomplete.observed_atoms()
    n = corr.rule.num_vars
    found: dict = {}
    by_anchor: dict[int, list] = {}
    for g in complete_groundings(index, corr.rule):
        dist = flows(g[corr.anchor]).get(corr.path, {})
        for ent, res in dist.items():
            if res <= alpha_pcra:
                continue
            if ent not in by_anchor:
                by_anchor[ent] = list(bind_atoms(index, atoms, n, {corr.anchor: ent}))
            for g2 in by_anchor[ent]:
                if g2 != g:
                    found.setdefault(g2, g)
    return [(g, g2) for g2, g in found.items()]


def ground_rules(
    index: TripleIndex,
    pool: RulePool,
    known: Container[Triple] | None = None,
    cap: int | None = 1000,
    seed: int = 0,
    focus: Container[int] | None = None,
    correlations: bool = True,
) -> tuple[VirtualNeighborSet, list[Grounding]]:
    """Instantiate every rule and correlation over ``index``.

    A triple is virtual when it is not in ``known`` (defaults to the index
    itself).  With ``focus`` set only groundings whose virtual triple touches
    a focus entity are kept.
    """
    known = index if known is None else known
    rng = random.Random(seed)
    vn = VirtualNeighborSet()
    groundings: list[Grounding] = []
    seen: set = set()

    def touches(t: Triple) -> bool:
        return focus is None or t[0] in focus or t[2] in focus

    for rule in pool.logic_rules:
        conf = 1.0 if rule.confidence is None else rule.confidence
        head = rule.head_atom()
        every = _cached(index, ("logic", rule.key), lambda: body_groundings(index, rule))
        bodies = [b for b in every if ground_atom(head, b) not in known]
        bodies = _sample(bodies, cap, rng, focus, lambda b: touches(ground_atom(head, b)))
        for b in bodies:
            key = ("logic", rule.key, b)
            if key in seen:
                continue
            seen.add(key)
            h = ground_atom(head, b)
            premise = tuple(ground_atom(a, b) for a in rule.body_atoms())
            groundings.append(Grounding("logic", rule, conf, premise, vn.add(h), source=b))

    if correlations:
        flows = _FlowCache(index, 3)
        for corr in pool.correlations:
            conf = 1.0 if corr.confidence is None else corr.confidence
            inc = corr.incomplete
            missing = inc.missing_atom()
            atoms = inc.observed_atoms()
            pairs = _cached(
                index, ("corr", corr.key, pool.alpha_pcra),
                lambda: _correlation_pairs(index, corr, pool.alpha_pcra, flows),
            )
            found = [p for p in pairs if ground_atom(missing, p[1]) not in known]
            found = _sample(found, cap, rng, focus, lambda p: touches(ground_atom(missing, p[1])))
            for g, g2 in found:
                key = ("corr", corr.key, g, g2)
                if key in seen:
                    continue
                seen.add(key)
                premise = tuple(ground_atom(a, g2) for a in atoms)
                observed = tuple(t for t in premise if t in known)
                virtual = tuple(vn.add(t) for t in premise if t not in known)
                concl = vn.add(ground_atom(missing, g2))
                groundings.append(Grounding("correlation", corr, conf, observed, concl, virtual, source=(g, g2)))

    for k, gr in enumerate(groundings):
        for v in gr.virtual:
            vn.support[v].append(k)
    vn.labels = np.zeros(len(vn))
    vn.truth = np.zeros(len(vn))
    return vn, groundings


# --------------------------------------------------------------------------
# Truth levels


def truth_level(phi, decoder: str = "distmult", margin: float = 1.0):
    """Squash a raw decoder score into (0, 1).

    TransE scores are negative distances, so the margin shifts them before
    the logistic.
    """
    if decoder == "transe":
        return logistic(np.asarray(phi) + margin)
    return logistic(phi)


def _premise_truth(g: Grounding, truth: Mapping[Triple, float] | Callable) -> float:
    get = truth if callable(truth) else truth.__getitem__
    p = 1.0
    for t in g.premise:
        p = t_and(p, float(get(t)))
    return p


def conditional_truth(g: Grounding, labels: Sequence[float], truth) -> float:
    """Truth of a grounding given soft labels for its virtual triples.

    For a correlation the complete-rule grounding is taken as fully true, so
    ``I(g_b -> g') = I(g')``.
    """
    n = len(labels)
    for v in g.virtual:
        if not 0 <= v < n:
            raise InferenceError(f"grounding refers to virtual triple {v} without a label")
    p = _premise_truth(g, truth)
    for v in g.premise_virtual:
        p = t_and(p, labels[v])
    inner = t_implies(p, labels[g.conclusion])
    if g.kind == "correlation":
        return t_implies(1.0, inner)
    return inner


def solve_soft_labels(
    vn: VirtualNeighborSet,
    groundings: Sequence[Grounding],
    C: float,
    truth,
    vn_truth: np.ndarray | None = None,
    sweeps: int = 2,
) -> np.ndarray:
    """Closed-form optimal soft labels.

    Each label is its truth level pushed up by ``C * sum(lambda * dI/ds)``
    over the groundings that touch it, then truncated to [0, 1].  Virtual
    premise atoms are held at the previous sweep's labels so every
    constraint stays linear in the label being solved.
    """
    n = len(vn)
    base = np.asarray(vn.truth if vn_truth is None else vn_truth, dtype=np.float64)
    if base.shape != (n,):
        raise InferenceError("truth levels do not match the virtual-neighbor set")
    prev = truncate(base.copy())
    nested = any(g.premise_virtual for g in groundings)
    for _ in range(sweeps if nested else 1):
        push = np.zeros(n)
        for g in groundings:
            for v in g.virtual:
                if not 0 <= v < n:
                    raise InferenceError(f"grounding refers to unregistered virtual triple {v}")
            p_obs = _premise_truth(g, truth)
            p = p_obs
            for v in g.premise_virtual:
                p *= prev[v]
            push[g.conclusion] += g.confidence * p
            for v in g.premise_virtual:
                others = p_obs
                for w in g.premise_virtual:
                    if w != v:
                        others *= prev[w]
                push[v] += g.confidence * others * (prev[g.conclusion] - 1.0)
        labels = truncate(base + C * push)
        prev = labels
    return prev


def hard_labels(vn: VirtualNeighborSet) -> np.ndarray:
    return np.ones(len(vn))


# --------------------------------------------------------------------------
# Reference solver


def _objective_parts(vn_truth, groundings, truth):
    lam = np.array([g.confidence for g in groundings], dtype=np.float64)
    p_obs = np.array([_premise_truth(g, truth) for g in groundings], dtype=np.float64)
    concl = np.array([g.conclusion for g in groundings], dtype=np.int64)
    nested = [g.premise_virtual for g in groundings]
    return np.asarray(vn_truth, dtype=np.float64), lam, p_obs, concl, nested


def soft_label_objective(labels, vn_truth, groundings, C, truth) -> float:
    """Rule-constrained objective with the slack variables eliminated.

    Each slack equals ``max(0, lambda * (1 - I(g|S)))`` at the optimum.
    """
    s = np.asarray(labels, dtype=np.float64)
    base, lam, p_obs, concl, nested = _objective_parts(vn_truth, groundings, truth)
    return _objective(s, base, lam, p_obs, concl, nested, C)


def _objective(s, base, lam, p_obs, concl, nested, C):
    p = p_obs.copy()
    for k, vs in enumerate(nested):
        for v in vs:
            p[k] *= s[v]
    cond = p * s[concl] - p + 1.0 if len(concl) else np.zeros(0)
    slack = np.maximum(0.0, lam * (1.0 - cond))
    return 0.5 * float(np.sum((s - base) ** 2)) + C * float(np.sum(slack))


def qp_oracle(
    vn_truth,
    groundings: Sequence[Grounding],
    C: float,
    truth,
    step: float = 0.5,
    h: float = 1e-4,
    tol: float = 1e-10,
    max_iter: int = 20000,
) -> np.ndarray:
    """Projected gradient descent on the box [0, 1].

    Gradients are finite differences of the eliminated-slack objective whose
    stencils stay inside the box: central in the interior, second-order
    one-sided near a bound, so they never straddle the hinge at ``s = 1``
    and are exact for piecewise quadratics.  Intended for small instances
    in tests.
    """
    base, lam, p_obs, concl, nested = _objective_parts(vn_truth, groundings, truth)
    n = len(base)
    s = truncate(base.copy())
    if n == 0:
        return s

    def f(x):
        return _objective(x, base, lam, p_obs, concl, nested, C)

    def shifted(x, i, d):
        y = x.copy()
        y[i] += d
        return y

    for _ in range(max_iter):
        grad = np.empty(n)
        f0 = f(s)
        for i in range(n):
            if s[i] - h >= 0.0 and s[i] + h <= 1.0:
                grad[i] = (f(shifted(s, i, h)) - f(shifted(s, i, -h))) / (2 * h)
            elif s[i] - 2 * h >= 0.0:
                grad[i] = (3 * f0 - 4 * f(shifted(s, i, -h)) + f(shifted(s, i, -2 * h))) / (2 * h)
            else:
                grad[i] = (-3 * f0 + 4 * f(shifted(s, i, h)) - f(shifted(s, i, 2 * h))) / (2 * h)
        new = truncate(s - step * grad)
        if np.max(np.abs(new - s)) < tol:
            return new
        s = new
    raise OracleError(f"projected gradient did not converge in {max_iter} iterations")


# --------------------------------------------------------------------------
# Output


def dump_vn(vn: VirtualNeighborSet, vocab: Vocab, path=None) -> str:
    rows = []
    for i, t in enumerate(vn.triples):
        h, r, tl = vocab.triple_labels(t)
        rows.append(f"{h}\t{r}\t{tl}\t{float(vn.labels[i]):.6f}\t{len(vn.support[i])}")
    text = "\n".join(rows) + ("\n" if rows else "")
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
