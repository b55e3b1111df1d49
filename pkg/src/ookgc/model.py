"""GNN encoder (WGCN structure layers + query-aware attention) and decoders."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .kg import Triple


class ModelConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    num_entities: int
    num_relations: int
    dim: int = 200
    decoder: str = "distmult"
    structure_layers: int = 2
    dropout: float = 0.2
    strict_query: bool = False
    leaky_slope: float = 0.2
    margin: float = 1.0

    def __post_init__(self):
        if self.decoder not in ("distmult", "transe"):
            raise ModelConfigError(f"unsupported decoder {self.decoder!r}")
        if self.num_relations % 2:
            raise ModelConfigError("relation count must include inverses")


@dataclass(frozen=True)
class Edges:
    """Directed edges ``(src, rel, dst)``; ``src`` aggregates from ``dst``."""

    src: torch.Tensor
    rel: torch.Tensor
    dst: torch.Tensor

    @classmethod
    def from_triples(cls, triples: Iterable[Triple]) -> "Edges":
        arr = np.asarray(list(triples), dtype=np.int64).reshape(-1, 3)
        t = torch.from_numpy(arr)
        return cls(t[:, 0].contiguous(), t[:, 1].contiguous(), t[:, 2].contiguous())

    def __len__(self) -> int:
        return int(self.src.numel())


def _xavier(shape: tuple[int, ...], gen: torch.Generator) -> torch.Tensor:
    fan_in, fan_out = shape[-1], shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound


class VNCModel(nn.Module):
    """Entity encoder plus relation decoder.

    Parameter names follow the layer equations: ``h0`` input embeddings,
    ``W{l}`` and ``alpha`` (per layer, per relation) for the structure
    layers, ``u``/``W_e``/``W_q``/``z`` for the query layer and ``rel`` for
    the decoder.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        n, r, d = config.num_entities, config.num_relations, config.dim
        bound = 6.0 / math.sqrt(d)
        self.h0 = nn.Parameter((torch.rand((n, d), generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        self.W = nn.ParameterList([nn.Parameter(_xavier((d, d), gen)) for _ in range(config.structure_layers)])
        self.alpha = nn.Parameter(torch.ones((config.structure_layers, r), dtype=torch.float64))
        self.u = nn.Parameter(_xavier((1, 3 * d), gen).reshape(3 * d))
        self.W_e = nn.Parameter(_xavier((d, d), gen))
        self.W_q = nn.Parameter(_xavier((d, d), gen))
        self.z = nn.Parameter(_xavier((r, d), gen))
        self.rel = nn.Parameter(_xavier((r, d), gen))
        self.float()

    # -- layers ---------------------------------------------------------

    def structure_layer(self, layer: int, H: torch.Tensor, edges: Edges) -> torch.Tensor:
        W = self.W[layer]
        if H.shape[1] != W.shape[0]:
            raise ModelConfigError(f"input width {H.shape[1]} does not match layer width {W.shape[0]}")
        msg = self.alpha[layer, edges.rel].unsqueeze(1) * H[edges.dst]
        agg = torch.zeros_like(H).index_add(0, edges.src, msg)
        out = torch.tanh(agg @ W.T + H @ W)
        return F.dropout(out, self.config.dropout, self.training)

    def attention(self, H: torch.Tensor, edges: Edges, query: int) -> tuple[Edges, torch.Tensor]:
        """Per-edge softmax weights of the query layer and the edges used."""
        if self.config.strict_query:
            keep = edges.rel == query
            edges = Edges(edges.src[keep], edges.rel[keep], edges.dst[keep])
        d = H.shape[1]
        proj = H @ self.W_e.T
        q_term = (self.W_q @ self.z[query]) @ self.u[d : 2 * d]
        beta = F.leaky_relu(
            proj[edges.src] @ self.u[:d] + q_term + proj[edges.dst] @ self.u[2 * d :],
            self.config.leaky_slope,
        )
        n = H.shape[0]
        peak = torch.full((n,), -torch.inf, dtype=H.dtype).scatter_reduce(0, edges.src, beta, "amax", include_self=True)
        ex = torch.exp(beta - peak[edges.src])
        norm = torch.zeros(n, dtype=H.dtype).index_add(0, edges.src, ex)
        return edges, ex / norm[edges.src]

    def query_layer(self, H: torch.Tensor, edges: Edges, query: int) -> torch.Tensor:
        used, weights = self.attention(H, edges, query)
        out = torch.zeros_like(H).index_add(0, used.src, weights.unsqueeze(1) * H[used.dst])
        has = torch.zeros(H.shape[0], dtype=torch.bool)
        has[used.src] = True
        return torch.where(has.unsqueeze(1), out, H)

    def structure(self, edges: Edges, ookg_mask: torch.Tensor | None = None) -> torch.Tensor:
        H = self.h0
        if ookg_mask is not None:
            H = H * (~ookg_mask).unsqueeze(1).to(H.dtype)
        for layer in range(self.config.structure_layers):
            H = self.structure_layer(layer, H, edges)
        return H

    def encode(
        self,
        edges: Edges,
        queries: Iterable[int],
        ookg_mask: torch.Tensor | None = None,
    ) -> dict[int, torch.Tensor]:
        """Entity tables keyed by query relation."""
        H = self.structure(edges, ookg_mask)
        return {q: self.query_layer(H, edges, q) for q in sorted(set(int(q) for q in queries))}

    # -- decoder --------------------------------------------------------

    def entity_repr(self, E: torch.Tensor) -> torch.Tensor:
        if self.config.decoder == "distmult":
            return E / torch.sqrt((E * E).sum(-1, keepdim=True) + 1e-12)
        return E

    def score_rows(self, eh: torch.Tensor, rel: torch.Tensor, et: torch.Tensor) -> torch.Tensor:
        r = self.rel[rel]
        if self.config.decoder == "distmult":
            return (eh * r * et).sum(-1)
        diff = eh + r - et
        return -torch.sqrt((diff * diff).sum(-1) + 1e-12)

    def score(self, tables: dict[int, torch.Tensor], triples: torch.Tensor) -> torch.Tensor:
        """Raw scores for a ``(B, 3)`` tensor of triples."""
        out = torch.empty(triples.shape[0], dtype=self.rel.dtype)
        for q in torch.unique(triples[:, 1]).tolist():
            sel = (triples[:, 1] == q).nonzero(as_tuple=True)[0]
            E = self.entity_repr(tables[q])
            t = triples[sel]
            out = out.index_put((sel,), self.score_rows(E[t[:, 0]], t[:, 1], E[t[:, 2]]))
        return out

    def truth(self, phi: torch.Tensor) -> torch.Tensor:
        if self.config.decoder == "transe":
            return torch.sigmoid(phi + self.config.margin)
        return torch.sigmoid(phi)

    def forward(self, edges: Edges, triples: torch.Tensor, ookg_mask=None) -> torch.Tensor:
        tables = self.encode(edges, triples[:, 1].tolist(), ookg_mask)
        return self.score(tables, triples)

    # -- helpers --------------------------------------------------------

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def relation_embeddings(self) -> np.ndarray:
        return self.rel.detach().double().cpu().numpy()


# --------------------------------------------------------------------------
# Reverse pass


@dataclass
class ForwardCache:
    output: torch.Tensor
    params: dict[str, torch.Tensor]
    consumed: bool = False


def forward_cached(model: VNCModel, edges: Edges, triples: torch.Tensor, ookg_mask=None) -> ForwardCache:
    with torch.enable_grad():
        out = model(edges, triples, ookg_mask)
    return ForwardCache(out, model.named_tensors())


def backward(upstream: torch.Tensor, cache: ForwardCache | None) -> dict[str, torch.Tensor]:
    """Gradients of ``sum(upstream * output)`` for every parameter."""
    if cache is None or cache.consumed:
        raise UsageError("backward needs a fresh forward_cached() result")
    names = list(cache.params)
    tensors = [cache.params[k] for k in names]
    grads = torch.autograd.grad(cache.output, tensors, grad_outputs=upstream, allow_unused=True)
    cache.consumed = True
    return {k: torch.zeros_like(t) if g is None else g for k, t, g in zip(names, tensors, grads)}


# --------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, model: VNCModel, extra: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": asdict(model.config),
        "dtype": str(model.rel.dtype).replace("torch.", ""),
        "extra": extra or {},
    }
    meta["config_hash"] = config_hash({"model": meta["model"], "extra": meta["extra"].get("train_config", {})})
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.named_parameters()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[VNCModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelConfigError(f"unsupported checkpoint version {meta.get('version')}")
        model = VNCModel(ModelConfig(**meta["model"]))
        if meta.get("dtype") == "float64":
            model.double()
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model, meta
