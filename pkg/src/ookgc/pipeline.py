"""Glue between rules, soft labels and the encoder graph.

Used by training (observed graph) and at test time (observed + auxiliary
graph with unseen entities zeroed at the input).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Container, Iterable

import numpy as np
import torch

from .config import TrainConfig
from .inference import Grounding, VirtualNeighborSet, ground_rules, solve_soft_labels
from .kg import Triple, TripleIndex, TripleStore, inverse_triple
from .model import Edges, VNCModel
from .rules import RulePool, score_confidences


@dataclass
class GraphState:
    edges: Edges
    vn: VirtualNeighborSet
    groundings: list[Grounding] = field(default_factory=list)
    pool: RulePool | None = None
    ookg_mask: torch.Tensor | None = None


def build_edges(triples: Iterable[Triple], vn_triples: Iterable[Triple] = ()) -> Edges:
    """Encoder edges; virtual triples enter in both directions."""
    rows: dict[Triple, None] = dict.fromkeys(triples)
    for t in vn_triples:
        rows.setdefault(t)
        rows.setdefault(inverse_triple(t))
    return Edges.from_triples(rows)


def ookg_mask(store: TripleStore) -> torch.Tensor:
    mask = torch.zeros(store.num_entities, dtype=torch.bool)
    if store.ookg:
        mask[sorted(store.ookg)] = True
    return mask


@torch.no_grad()
def triple_truth(model: VNCModel, edges: Edges, triples: list[Triple], mask=None) -> np.ndarray:
    """Truth levels of ``triples`` with the model in inference mode."""
    if not triples:
        return np.zeros(0)
    was = model.training
    model.eval()
    try:
        t = torch.as_tensor(triples, dtype=torch.int64)
        phi = model(edges, t, mask)
        return model.truth(phi).double().numpy()
    finally:
        model.train(was)


def scored_pool(pool: RulePool, model: VNCModel | None, config: TrainConfig) -> RulePool | None:
    if config.mode == "no_rules":
        return None
    if config.mode == "hard_rules":
        return pool.only_logic()
    base = pool if config.mode == "full" else pool.only_logic()
    return score_confidences(base, model.relation_embeddings(), config.decoder, config.top_k)


def infer_virtual_neighbors(
    model: VNCModel,
    pool: RulePool,
    config: TrainConfig,
    index: TripleIndex,
    known: Container[Triple],
    truth_edges: Edges,
    mask=None,
    focus: Container[int] | None = None,
    scored: RulePool | None = None,
) -> tuple[VirtualNeighborSet, list[Grounding], RulePool | None]:
    """Ground the pool and label the virtual triples for the current mode."""
    if config.mode == "no_rules":
        return VirtualNeighborSet(), [], None
    scored = scored if scored is not None else scored_pool(pool, model, config)
    vn, groundings = ground_rules(
        index, scored, known, config.grounding_cap, config.seed, focus, correlations=config.mode == "full"
    )
    if config.mode == "hard_rules" or not len(vn):
        vn.truth = np.ones(len(vn))
        vn.labels = np.ones(len(vn))
        return vn, groundings, scored

    premise = sorted({t for g in groundings for t in g.premise})
    needed = list(vn.triples) + premise
    values = triple_truth(model, truth_edges, needed, mask)
    vn.truth = values[: len(vn)]
    truth = dict(zip(premise, values[len(vn):]))
    vn.labels = solve_soft_labels(vn, groundings, config.C, truth, sweeps=config.label_sweeps)
    return vn, groundings, scored


def training_graph(model: VNCModel, store: TripleStore, pool: RulePool | None, config: TrainConfig,
                   previous: GraphState | None = None) -> GraphState:
    observed = store.observed_triples()
    if pool is None or config.mode == "no_rules":
        return GraphState(build_edges(observed), VirtualNeighborSet())
    truth_edges = previous.edges if previous is not None else build_edges(observed)
    vn, groundings, scored = infer_virtual_neighbors(
        model, pool, config, store.index, store.observed, truth_edges
    )
    return GraphState(build_edges(observed, vn.triples), vn, groundings, scored)


def test_time_graph(model: VNCModel, store: TripleStore, pool: RulePool | None, config: TrainConfig) -> GraphState:
    """Encoder graph for evaluation: observed, auxiliary and virtual edges.

    Virtual triples come from grounding the pool over the observed graph
    (as in training) and over observed plus auxiliary triples restricted to
    groundings that touch an unseen entity.  Unseen entities start from a
    zero input embedding.
    """
    mask = ookg_mask(store)
    base = store.observed_triples() + store.auxiliary_triples()
    plain = build_edges(base)
    if pool is None or config.mode == "no_rules":
        return GraphState(plain, VirtualNeighborSet(), ookg_mask=mask)

    scored = scored_pool(pool, model, config)
    train_vn, _, _ = infer_virtual_neighbors(
        model, pool, config, store.index, store.observed, build_edges(store.observed_triples()), scored=scored
    )
    known = store.observed | store.auxiliary
    new_vn, groundings, _ = infer_virtual_neighbors(
        model, pool, config, store.full_index, known, plain, mask,
        focus=store.ookg if store.ookg else None, scored=scored,
    )
    edges = build_edges(base, list(train_vn.triples) + list(new_vn.triples))
    return GraphState(edges, new_vn, groundings, scored, mask)


@torch.no_grad()
def entity_tables(model: VNCModel, graph: GraphState, queries: Iterable[int]) -> dict[int, torch.Tensor]:
    was = model.training
    model.eval()
    try:
        tables = model.encode(graph.edges, queries, graph.ookg_mask)
        return {q: model.entity_repr(E) for q, E in tables.items()}
    finally:
        model.train(was)
