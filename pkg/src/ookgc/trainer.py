"""Iterative training: rescore rules, relabel virtual neighbors, fit the model."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import TrainConfig
from .evaluation import EvalReport, link_prediction_eval
from .kg import Triple, TripleStore
from .model import ModelConfig, VNCModel
from .pipeline import GraphState, test_time_graph, training_graph
from .rules import RulePool, mine_rule_pool

logger = logging.getLogger(__name__)

EPS = 1e-12


class TrainingError(RuntimeError):
    pass


def sample_negatives(
    positives: Sequence[Triple],
    known,
    entities: Sequence[int],
    k: int,
    rng: np.random.Generator,
    max_tries: int = 100,
) -> list[Triple]:
    """``k`` corruptions per positive, never a known triple.

    Each corruption replaces the head or the tail (chosen uniformly) and is
    redrawn on collision; a positive that keeps colliding contributes fewer
    negatives.
    """
    ents = np.asarray(entities)
    out: list[Triple] = []
    for h, r, t in positives:
        for _ in range(k):
            for _ in range(max_tries):
                e = int(ents[rng.integers(len(ents))])
                cand = (e, r, t) if rng.random() < 0.5 else (h, r, e)
                if cand not in known:
                    out.append(cand)
                    break
    return out


def cross_entropy(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # float64 so the 1e-12 clamp survives (1 - 1e-12 rounds to 1 in float32)
    x = x.double().clamp(EPS, 1 - EPS)
    y = y.double()
    return -(y * torch.log(x) + (1 - y) * torch.log(1 - x))


def global_loss(
    truth_hard: torch.Tensor,
    labels_hard: torch.Tensor,
    truth_soft: torch.Tensor | None = None,
    labels_soft: torch.Tensor | None = None,
    reg_term: torch.Tensor | float = 0.0,
) -> torch.Tensor:
    """Mean cross-entropy over hard-labeled triples plus mean over virtual ones."""
    loss = cross_entropy(truth_hard, labels_hard).mean() if truth_hard.numel() else truth_hard.sum()
    if truth_soft is not None and truth_soft.numel():
        loss = loss + cross_entropy(truth_soft, labels_soft).mean()
    return loss + reg_term


def loss_gradients(truth_hard, labels_hard, truth_soft=None, labels_soft=None):
    """Loss value and its gradient with respect to every truth level."""
    th = truth_hard.detach().clone().requires_grad_(True)
    ts = None if truth_soft is None else truth_soft.detach().clone().requires_grad_(True)
    loss = global_loss(th, labels_hard, ts, labels_soft)
    wrt = [th] + ([ts] if ts is not None else [])
    grads = torch.autograd.grad(loss, wrt, allow_unused=True)
    gs = None if ts is None else grads[1]
    return loss.item(), grads[0], gs


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState, lr: float):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {name} {tuple(p.shape)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has the wrong shape")
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return params, state


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: VNCModel
    pool: RulePool | None
    config: TrainConfig
    log: list[dict]
    best_valid: EvalReport | None
    graph: GraphState


def _model_config(store: TripleStore, config: TrainConfig) -> ModelConfig:
    return ModelConfig(
        num_entities=store.num_entities,
        num_relations=store.num_relations,
        dim=config.dim,
        decoder=config.decoder,
        structure_layers=config.structure_layers,
        dropout=config.dropout,
        strict_query=config.strict_query,
        margin=config.margin,
    )


def train(
    store: TripleStore,
    config: TrainConfig,
    pool: RulePool | None = None,
    log_path=None,
    validate: bool = True,
) -> TrainResult:
    """Alternate rule inference and gradient steps for ``config.epochs`` epochs.

    Validation (when the store has a validation split) drives early stopping
    on filtered MRR and the returned model is the best one seen.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = VNCModel(_model_config(store, config), seed=config.seed)
    if config.mode != "no_rules" and pool is None:
        pool = mine_rule_pool(
            store.index, config.alpha_hc, config.alpha_sc, config.alpha_pcra,
            correlations=config.mode == "full", cap=config.grounding_cap, seed=config.seed,
        )
    params = model.named_tensors()
    state = AdamState()

    positives = list(store.observed_triples())
    known = store.observed
    entities = sorted({e for h, _, t in positives for e in (h, t)})
    validate = validate and bool(store.valid)

    log: list[dict] = []
    best: EvalReport | None = None
    best_state = None
    stale = 0
    graph = training_graph(model, store, pool, config)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            if epoch > 1 and config.refresh == "epoch" and config.mode in ("soft_rules", "full"):
                graph = training_graph(model, store, pool, config, graph)
            model.train()
            order = rng.permutation(len(positives))
            n_batches = max(1, math.ceil(len(positives) / config.batch_size))
            vn_order = rng.permutation(len(graph.vn))
            totals = {"loss": 0.0, "hard": 0.0, "soft": 0.0}
            for b in range(n_batches):
                if config.refresh == "step" and config.mode in ("soft_rules", "full") and (epoch > 1 or b > 0):
                    graph = training_graph(model, store, pool, config, graph)
                    vn_order = rng.permutation(len(graph.vn))
                pos = [positives[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
                neg = sample_negatives(pos, known, entities, config.negatives, rng)
                hard = torch.as_tensor(pos + neg, dtype=torch.int64)
                y = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]).to(model.rel.dtype)
                vn_sel = vn_order[b::n_batches] if len(graph.vn) else []
                soft = torch.as_tensor([graph.vn.triples[i] for i in vn_sel], dtype=torch.int64).reshape(-1, 3)
                s = torch.as_tensor(graph.vn.labels[vn_sel] if len(vn_sel) else [], dtype=model.rel.dtype)

                batch = torch.cat([hard, soft]) if len(soft) else hard
                phi = model(graph.edges, batch)
                truth = model.truth(phi)
                th, ts = truth[: len(hard)], truth[len(hard):]
                reg = config.reg * (model.rel[batch[:, 1]] ** 2).mean()
                hard_loss = cross_entropy(th, y).mean()
                soft_loss = cross_entropy(ts, s).mean() if len(soft) else torch.zeros((), dtype=th.dtype)
                loss = global_loss(th, y, ts, s, reg)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} batch {b}; lower the learning rate (currently {config.lr})"
                    )
                model.zero_grad(set_to_none=True)
                loss.backward()
                adam_step(params, {k: p.grad for k, p in params.items()}, state, config.lr)
                totals["loss"] += loss.item()
                totals["hard"] += hard_loss.item()
                totals["soft"] += soft_loss.item()

            entry = {
                "epoch": epoch,
                "loss": totals["loss"] / n_batches,
                "hard_loss": totals["hard"] / n_batches,
                "soft_loss": totals["soft"] / n_batches,
                "vn_count": len(graph.vn),
                "seconds": round(time.perf_counter() - t0, 3),
            }
            if validate and (epoch % config.eval_every == 0 or epoch == config.epochs):
                rep = link_prediction_eval(model, store, pool, config, split="valid")
                entry.update(valid_mrr=rep.mrr, valid_hits10=rep.hits10, valid_mr=rep.mr)
                if best is None or rep.mrr > best.mrr:
                    best, stale = rep, 0
                    best_state = copy.deepcopy(model.state_dict())
                else:
                    stale += 1
            log.append(entry)
            logger.info("epoch %d %s", epoch, entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if validate and stale >= config.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, pool, config, log, best, graph)


def test_time_pipeline(model: VNCModel, store: TripleStore, pool: RulePool | None, config: TrainConfig):
    """Embeddings for every entity (OOKG rows included) at test time.

    Returns ``(graph, tables)`` where ``tables`` maps each relation to the
    query-conditioned entity table.
    """
    from .pipeline import entity_tables

    graph = test_time_graph(model, store, pool, config)
    tables = entity_tables(model, graph, range(store.num_relations))
    return graph, tables
