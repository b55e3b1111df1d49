"""Filtered link-prediction ranking and triple classification."""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .kg import Triple, TripleStore
from .model import VNCModel
from .pipeline import GraphState, entity_tables, test_time_graph
from .rules import RulePool


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    mr: float = float("nan")
    mrr: float = float("nan")
    hits1: float = float("nan")
    hits3: float = float("nan")
    hits10: float = float("nan")
    count: int = 0
    accuracy: float | None = None
    thresholds: dict[str, float] = field(default_factory=dict)
    note: str = "Hits@n pooled over head- and tail-side queries"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def table(self) -> str:
        if self.accuracy is not None and not self.count:
            return f"{'Accuracy':>9}\n{self.accuracy:9.1f}"
        head = f"{'MR':>8} {'MRR':>6} {'Hits@10':>8} {'Hits@3':>7} {'Hits@1':>7}"
        row = f"{self.mr:8.1f} {self.mrr:6.1f} {self.hits10:8.1f} {self.hits3:7.1f} {self.hits1:7.1f}"
        return f"# {self.note}\n{head}\n{row}"


def filtered_rank(scores: np.ndarray, target: int, exclude: Iterable[int] = ()) -> float:
    """1-based rank of ``target`` among candidates not in ``exclude``.

    Ties with the target share the mean position of the tied block.
    """
    scores = np.asarray(scores)
    if not 0 <= target < scores.shape[0]:
        raise EvaluationError(f"target {target} outside the candidate table")
    keep = np.ones(scores.shape[0], dtype=bool)
    ex = [e for e in exclude if e != target]
    if ex:
        keep[ex] = False
    keep[target] = False
    s = scores[keep]
    t = scores[target]
    higher = int(np.sum(s > t))
    ties = int(np.sum(s == t))
    return 1.0 + higher + ties / 2.0


def aggregate(ranks: Sequence[float]) -> EvalReport:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        return EvalReport()
    return EvalReport(
        mr=float(r.mean()),
        mrr=float(np.mean(1.0 / r) * 100),
        hits1=float(np.mean(r <= 1) * 100),
        hits3=float(np.mean(r <= 3) * 100),
        hits10=float(np.mean(r <= 10) * 100),
        count=int(r.size),
    )


def _filters(known: Iterable[Triple]):
    tails: dict[tuple[int, int], set[int]] = defaultdict(set)
    heads: dict[tuple[int, int], set[int]] = defaultdict(set)
    for h, r, t in known:
        tails[(h, r)].add(t)
        heads[(r, t)].add(h)
    return heads, tails


@torch.no_grad()
def rank_triples(
    model: VNCModel,
    graph: GraphState,
    triples: Sequence[Triple],
    known: Iterable[Triple],
) -> list[float]:
    """Head- and tail-side filtered ranks for every triple."""
    if not triples:
        return []
    heads, tails = _filters(known)
    tables = entity_tables(model, graph, {r for _, r, _ in triples})
    ranks = []
    for h, r, t in triples:
        E = tables[r]
        n = E.shape[0]
        if h >= n or t >= n:
            raise EvaluationError(f"entity missing from embedding table for {(h, r, t)}")
        rel = torch.full((n,), r, dtype=torch.int64)
        tail_scores = model.score_rows(E[h].expand(n, -1), rel, E).double().numpy()
        head_scores = model.score_rows(E, rel, E[t].expand(n, -1)).double().numpy()
        ranks.append(filtered_rank(tail_scores, t, tails[(h, r)]))
        ranks.append(filtered_rank(head_scores, h, heads[(r, t)]))
    return ranks


def link_prediction_eval(
    model: VNCModel,
    store: TripleStore,
    pool: RulePool | None,
    config: TrainConfig,
    split: str = "test",
    graph: GraphState | None = None,
) -> EvalReport:
    triples = store.test if split == "test" else store.valid
    graph = graph or test_time_graph(model, store, pool, config)
    return aggregate(rank_triples(model, graph, triples, store.all_true))


# --------------------------------------------------------------------------
# Triple classification


def best_threshold(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """Threshold maximising accuracy of ``score > threshold``.

    Candidates are midpoints between consecutive distinct scores plus one
    value below the minimum and one above the maximum.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.size == 0:
        return 0.5, 0.0
    uniq = np.unique(s)
    cands = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]])
    order = np.argsort(s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # below[k] = positives among scores <= cands[k]
    idx = np.searchsorted(s_sorted, cands, side="right")
    pos_cum = np.concatenate([[0], np.cumsum(y_sorted)])
    n_pos = pos_cum[-1]
    below = idx
    pos_below = pos_cum[idx]
    neg_below = below - pos_below
    correct = neg_below + (n_pos - pos_below)
    k = int(np.argmax(correct))
    return float(cands[k]), float(correct[k] / s.size)


def choose_thresholds(scores, labels, relations) -> tuple[dict[int, float], float]:
    by_rel: dict[int, list[int]] = defaultdict(list)
    for i, r in enumerate(relations):
        by_rel[int(r)].append(i)
    s = np.asarray(scores)
    y = np.asarray(labels)
    per = {r: best_threshold(s[ix], y[ix])[0] for r, ix in by_rel.items()}
    glob = best_threshold(s, y)[0]
    return per, glob


def classify(scores, relations, thresholds: dict[int, float], fallback: float) -> np.ndarray:
    return np.array([s > thresholds.get(int(r), fallback) for s, r in zip(scores, relations)], dtype=bool)


def corrupt_negatives(triples: Sequence[Triple], known, entities: Sequence[int], seed: int = 0) -> list[Triple]:
    """One corrupted triple per input, head or tail chosen uniformly."""
    rng = random.Random(seed)
    out = []
    for h, r, t in triples:
        for _ in range(1000):
            e = rng.choice(entities)
            cand = (e, r, t) if rng.random() < 0.5 else (h, r, e)
            if cand not in known:
                out.append(cand)
                break
    return out


def labeled_split(triples, negatives=None, known=(), entities=(), seed=0):
    if negatives is None:
        negatives = corrupt_negatives(triples, known, entities, seed)
    rows = list(triples) + list(negatives)
    labels = [1] * len(triples) + [0] * len(negatives)
    return rows, labels


@torch.no_grad()
def _truths(model: VNCModel, graph: GraphState, rows: Sequence[Triple]) -> np.ndarray:
    if not rows:
        return np.zeros(0)
    tables = entity_tables(model, graph, {r for _, r, _ in rows})
    t = torch.as_tensor(rows, dtype=torch.int64)
    out = np.empty(len(rows))
    for q, E in tables.items():
        sel = (t[:, 1] == q).nonzero(as_tuple=True)[0]
        x = t[sel]
        out[sel.numpy()] = model.truth(model.score_rows(E[x[:, 0]], x[:, 1], E[x[:, 2]])).double().numpy()
    return out


def triple_classification_eval(
    model: VNCModel,
    store: TripleStore,
    pool: RulePool | None,
    config: TrainConfig,
    valid_negatives=None,
    test_negatives=None,
    graph: GraphState | None = None,
) -> EvalReport:
    graph = graph or test_time_graph(model, store, pool, config)
    entities = list(range(store.num_entities))
    v_rows, v_lab = labeled_split(store.valid, valid_negatives, store.all_true, entities, config.seed)
    t_rows, t_lab = labeled_split(store.test, test_negatives, store.all_true, entities, config.seed + 1)
    v_scores = _truths(model, graph, v_rows)
    per, glob = choose_thresholds(v_scores, v_lab, [r for _, r, _ in v_rows])
    t_scores = _truths(model, graph, t_rows)
    pred = classify(t_scores, [r for _, r, _ in t_rows], per, glob)
    acc = float(np.mean(pred == np.asarray(t_lab, dtype=bool)) * 100) if t_rows else float("nan")
    names = {store.vocab.relation_label(r): v for r, v in per.items()}
    names["*"] = glob
    return EvalReport(accuracy=acc, thresholds=names)
