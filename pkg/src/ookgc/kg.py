"""Triple store, OOKG splits, and relation-path primitives.

Relations are interned densely with inverses interleaved: base relation ``k``
has id ``2k`` and its inverse ``2k + 1``, so ``inverse(r) == r ^ 1``.
"""

from __future__ import annotations

import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

Triple = tuple[int, int, int]
RelPath = tuple[int, ...]

SPLITS = ("observed", "auxiliary", "valid", "test")
_SPLIT_ALIASES = {
    "train": "observed",
    "observed": "observed",
    "aux": "auxiliary",
    "auxiliary": "auxiliary",
    "valid": "valid",
    "validation": "valid",
    "dev": "valid",
    "test": "test",
}


class TripleParseError(ValueError):
    """Malformed line in a triple file."""

    def __init__(self, path, lineno: int, line: str):
        super().__init__(f"{path}:{lineno}: expected 'head<TAB>relation<TAB>tail', got {line!r}")
        self.path = path
        self.lineno = lineno


class SplitError(ValueError):
    """The requested OOKG split cannot be built."""


class AuxiliaryError(ValueError):
    """An auxiliary triple violates the one-unseen-endpoint rule."""


def inverse(r: int) -> int:
    return r ^ 1


def is_inverse(r: int) -> bool:
    return bool(r & 1)


def base_relation(r: int) -> int:
    return r & ~1


def inverse_triple(t: Triple) -> Triple:
    h, r, tl = t
    return (tl, r ^ 1, h)


def canonical_split(tag: str) -> str:
    try:
        return _SPLIT_ALIASES[tag.lower()]
    except KeyError:
        raise ValueError(f"unknown split tag {tag!r}; expected one of {sorted(_SPLIT_ALIASES)}") from None


class Vocab:
    """Bijective label <-> id maps for entities and base relations."""

    def __init__(self, entities: Iterable[str] = (), relations: Iterable[str] = ()):
        self.entities: list[str] = []
        self.relations: list[str] = []
        self._ent: dict[str, int] = {}
        self._rel: dict[str, int] = {}
        for e in entities:
            self.entity_id(e)
        for r in relations:
            self.relation_id(r)

    def entity_id(self, label: str, create: bool = True) -> int:
        idx = self._ent.get(label)
        if idx is None:
            if not create:
                raise KeyError(f"unknown entity {label!r}")
            idx = self._ent[label] = len(self.entities)
            self.entities.append(label)
        return idx

    def relation_id(self, label: str, create: bool = True) -> int:
        """Id of a relation label; a trailing ``_inv`` names the inverse."""
        if label.endswith("_inv") and label[:-4] in self._rel:
            return self.relation_id(label[:-4], create) ^ 1
        idx = self._rel.get(label)
        if idx is None:
            if not create:
                raise KeyError(f"unknown relation {label!r}")
            idx = self._rel[label] = len(self.relations)
            self.relations.append(label)
        return 2 * idx

    def relation_label(self, r: int) -> str:
        name = self.relations[r >> 1]
        return name + "_inv" if r & 1 else name

    def entity_label(self, e: int) -> str:
        return self.entities[e]

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        """Relation vocabulary size including inverses."""
        return 2 * len(self.relations)

    def triple_labels(self, t: Triple) -> tuple[str, str, str]:
        return (self.entities[t[0]], self.relation_label(t[1]), self.entities[t[2]])

    def intern(self, h: str, r: str, t: str) -> Triple:
        return (self.entity_id(h), self.relation_id(r), self.entity_id(t))

    def copy(self) -> "Vocab":
        return Vocab(self.entities, self.relations)


@dataclass(frozen=True)
class TripleDelta:
    split: str
    triples: tuple[Triple, ...]


def read_tsv(path) -> Iterator[tuple[int, tuple[str, str, str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise TripleParseError(path, lineno, line)
            yield lineno, (parts[0].strip(), parts[1].strip(), parts[2].strip())


def load_triples(path, split: str, vocab: Vocab) -> TripleDelta:
    """Intern a TSV file into ``vocab``.

    Observed and auxiliary deltas are closed under inverse; duplicate lines
    collapse while preserving first-seen order.
    """
    split = canonical_split(split)
    seen: dict[Triple, None] = {}
    for _, (h, r, t) in read_tsv(path):
        trip = vocab.intern(h, r, t)
        seen.setdefault(trip)
        if split in ("observed", "auxiliary"):
            seen.setdefault(inverse_triple(trip))
    return TripleDelta(split, tuple(seen))


class TripleIndex:
    """Read-only adjacency indices over a triple set."""

    def __init__(self, triples: Iterable[Triple]):
        out: dict[int, dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
        by_rel: dict[int, list[tuple[int, int]]] = defaultdict(list)
        by_pair: dict[tuple[int, int], set[int]] = defaultdict(set)
        members = set()
        for h, r, t in triples:
            if (h, r, t) in members:
                continue
            members.add((h, r, t))
            out[h][r].append(t)
            by_rel[r].append((h, t))
            by_pair[(h, t)].add(r)
        self._members = frozenset(members)
        self._out = {h: {r: tuple(ts) for r, ts in rs.items()} for h, rs in out.items()}
        self._by_rel = {r: tuple(p) for r, p in by_rel.items()}
        self._by_pair = {k: frozenset(v) for k, v in by_pair.items()}

    def __contains__(self, t) -> bool:
        return t in self._members

    def __len__(self) -> int:
        return len(self._members)

    def __iter__(self):
        return iter(self._members)

    def successors(self, h: int, r: int) -> tuple[int, ...]:
        return self._out.get(h, {}).get(r, ())

    def out_edges(self, h: int) -> dict[int, tuple[int, ...]]:
        return self._out.get(h, {})

    def pairs(self, r: int) -> tuple[tuple[int, int], ...]:
        return self._by_rel.get(r, ())

    def relations_between(self, h: int, t: int) -> frozenset[int]:
        return self._by_pair.get((h, t), frozenset())

    @property
    def relations(self) -> frozenset[int]:
        return frozenset(self._by_rel)

    @property
    def entities(self) -> frozenset[int]:
        return frozenset(self._out)


class TripleStore:
    """Immutable multi-split knowledge graph.

    ``observed`` and ``auxiliary`` hold triples closed under inverse;
    ``valid`` and ``test`` hold triples as given.
    """

    def __init__(
        self,
        vocab: Vocab,
        observed: Iterable[Triple] = (),
        auxiliary: Iterable[Triple] = (),
        valid: Iterable[Triple] = (),
        test: Iterable[Triple] = (),
        ookg: Iterable[int] | None = None,
        meta: dict | None = None,
    ):
        self.vocab = vocab
        obs: dict[Triple, None] = {}
        for t in observed:
            obs.setdefault(t)
            obs.setdefault(inverse_triple(t))
        self.observed: frozenset[Triple] = frozenset(obs)
        self._observed_order = tuple(obs)

        aux: dict[Triple, None] = {}
        for t in auxiliary:
            if t in self.observed:
                continue
            aux.setdefault(t)
            aux.setdefault(inverse_triple(t))
        self.auxiliary: frozenset[Triple] = frozenset(aux)
        self._aux_order = tuple(aux)

        if ookg is None:
            seen = {e for h, _, t in self.observed for e in (h, t)}
            ookg = {e for h, _, t in self.auxiliary for e in (h, t) if e not in seen}
        self.ookg: frozenset[int] = frozenset(ookg)
        self._check_auxiliary()

        self.valid = self._dedupe_against_observed(valid, "valid")
        self.test = self._dedupe_against_observed(test, "test")
        self.meta = dict(meta or {})

    def _dedupe_against_observed(self, triples: Iterable[Triple], name: str) -> tuple[Triple, ...]:
        kept: dict[Triple, None] = {}
        dropped = 0
        for t in triples:
            if t in self.observed:
                dropped += 1
                continue
            kept.setdefault(t)
        if dropped:
            logger.warning("removed %d %s triples already present in the observed set", dropped, name)
        return tuple(kept)

    def _check_auxiliary(self) -> None:
        if not self.auxiliary:
            return
        obs_rel = {base_relation(r) for _, r, _ in self.observed}
        for h, r, t in self.auxiliary:
            n_unseen = (h in self.ookg) + (t in self.ookg)
            if n_unseen != 1:
                raise AuxiliaryError(
                    f"auxiliary triple {self.vocab.triple_labels((h, r, t))} has {n_unseen} OOKG endpoints"
                )
            if base_relation(r) not in obs_rel:
                raise AuxiliaryError(f"relation {self.vocab.relation_label(r)!r} does not occur in the observed set")
        leaked = {e for h, _, t in self.observed for e in (h, t)} & self.ookg
        if leaked:
            raise AuxiliaryError(f"{len(leaked)} OOKG entities occur in the observed set")

    @property
    def num_entities(self) -> int:
        return self.vocab.num_entities

    @property
    def num_relations(self) -> int:
        return self.vocab.num_relations

    def observed_triples(self, base_only: bool = False) -> tuple[Triple, ...]:
        if base_only:
            return tuple(t for t in self._observed_order if not t[1] & 1)
        return self._observed_order

    def auxiliary_triples(self, base_only: bool = False) -> tuple[Triple, ...]:
        if base_only:
            return tuple(t for t in self._aux_order if not t[1] & 1)
        return self._aux_order

    @cached_property
    def index(self) -> TripleIndex:
        """Index over the observed split."""
        return TripleIndex(self._observed_order)

    @cached_property
    def full_index(self) -> TripleIndex:
        """Index over observed plus auxiliary triples."""
        return TripleIndex(self._observed_order + self._aux_order)

    def known(self, t: Triple) -> bool:
        return t in self.observed or t in self.auxiliary

    @cached_property
    def all_true(self) -> frozenset[Triple]:
        """Every known positive in any split, used for filtered ranking."""
        s = set(self.observed) | set(self.auxiliary)
        s.update(self.valid)
        s.update(self.test)
        return frozenset(s)

    def replace(self, **kw) -> "TripleStore":
        args = dict(
            vocab=self.vocab,
            observed=self._observed_order,
            auxiliary=self._aux_order,
            valid=self.valid,
            test=self.test,
            ookg=self.ookg,
            meta=self.meta,
        )
        args.update(kw)
        return TripleStore(**args)

    def __repr__(self) -> str:
        return (
            f"TripleStore(entities={self.num_entities}, relations={len(self.vocab.relations)}, "
            f"observed={len(self.observed)}, aux={len(self.auxiliary)}, valid={len(self.valid)}, "
            f"test={len(self.test)}, ookg={len(self.ookg)})"
        )


def load_store(train, valid=None, test=None, aux=None) -> TripleStore:
    vocab = Vocab()
    deltas = {"observed": load_triples(train, "observed", vocab)}
    for split, path in (("valid", valid), ("test", test), ("auxiliary", aux)):
        if path is not None:
            deltas[split] = load_triples(path, split, vocab)
    return TripleStore(
        vocab,
        observed=deltas["observed"].triples,
        auxiliary=deltas["auxiliary"].triples if "auxiliary" in deltas else (),
        valid=deltas["valid"].triples if "valid" in deltas else (),
        test=deltas["test"].triples if "test" in deltas else (),
    )


def write_tsv(path, triples: Iterable[Triple], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write("\t".join(vocab.triple_labels(t)) + "\n")


# --------------------------------------------------------------------------
# OOKG splits


@dataclass(frozen=True)
class SplitSpec:
    """How to carve OOKG entities out of a transductive dataset.

    ``amount`` below 1 is read as a fraction, a percentage in ``(1, 100]``
    when ``mode`` is subject/object and ``policy`` is not ``count``, and an
    absolute number of test triples when ``policy == "count"``.
    """

    mode: str = "subject"
    amount: float = 10
    seed: int = 0
    policy: str = "triples"  # "triples" | "entities" | "count"
    valid_from_test: float = 0.0

    def __post_init__(self):
        if self.mode not in ("subject", "object", "both"):
            raise ValueError(f"split mode must be subject, object or both, got {self.mode!r}")
        if self.policy not in ("triples", "entities", "count"):
            raise ValueError(f"unknown split policy {self.policy!r}")
        if self.amount <= 0:
            raise ValueError("split amount must be positive")

    @property
    def fraction(self) -> float:
        return self.amount / 100.0 if self.amount > 1 else float(self.amount)


def _test_sides(t: Triple, mode: str) -> tuple[int, ...]:
    if mode == "subject":
        return (t[0],)
    if mode == "object":
        return (t[2],)
    return (t[0], t[2])


def _sample_ookg(store: TripleStore, spec: SplitSpec) -> list[int]:
    rng = random.Random(spec.seed)
    test = list(store.test)
    candidates = sorted({e for t in test for e in _test_sides(t, spec.mode)})
    rng.shuffle(candidates)
    if spec.policy == "entities":
        n = round(spec.fraction * store.num_entities)
        return sorted(candidates[:n])

    if spec.policy == "count":
        target = int(spec.amount)
    else:
        target = spec.fraction * len(test)
    touching: dict[int, int] = defaultdict(int)
    for t in test:
        for e in set(_test_sides(t, spec.mode)):
            touching[e] += 1
    chosen: list[int] = []
    covered = 0
    for e in candidates:
        if covered >= target:
            break
        chosen.append(e)
        covered += touching[e]
    return sorted(chosen)


def make_ookg_split(store: TripleStore, spec: SplitSpec) -> TripleStore:
    """Remove sampled entities from the observed graph and build AUX.

    Training triples touching exactly one OOKG entity become auxiliary; those
    touching two are discarded.  Test triples are kept iff they touch an OOKG
    entity on the side(s) named by ``spec.mode``.
    """
    ookg = set(_sample_ookg(store, spec))
    return _apply_split(store, ookg, spec)


def _apply_split(store: TripleStore, ookg: set[int], spec: SplitSpec, keep_test: Sequence[Triple] | None = None):
    observed, aux = [], []
    for t in store.observed_triples(base_only=True):
        n = (t[0] in ookg) + (t[2] in ookg)
        if n == 0:
            observed.append(t)
        elif n == 1:
            aux.append(t)
    obs_rel = {r for _, r, _ in observed}
    if not observed or not obs_rel:
        raise SplitError("observed split is empty after removing OOKG entities")
    aux = [t for t in aux if t[1] in obs_rel]
    aux_rel_ok = {base_relation(r) for r in obs_rel}

    def usable(t):
        return base_relation(t[1]) in aux_rel_ok

    if keep_test is None:
        test = [t for t in store.test if usable(t) and any(e in ookg for e in _test_sides(t, spec.mode))]
        if spec.policy == "count":
            rng = random.Random(spec.seed + 1)
            if len(test) > spec.amount:
                test = sorted(rng.sample(test, int(spec.amount)))
    else:
        test = list(keep_test)

    valid = [t for t in store.valid if t[0] not in ookg and t[2] not in ookg and usable(t)]
    if spec.valid_from_test > 0 and keep_test is None:
        rng = random.Random(spec.seed + 2)
        order = list(range(len(test)))
        rng.shuffle(order)
        n_val = int(round(spec.valid_from_test * len(test)))
        moved = set(order[:n_val])
        valid = [test[i] for i in sorted(moved)]
        test = [t for i, t in enumerate(test) if i not in moved]

    meta = {
        "split": {
            "mode": spec.mode,
            "amount": spec.amount,
            "seed": spec.seed,
            "policy": spec.policy,
            "valid_from_test": spec.valid_from_test,
            "alternative_policy": "entities" if spec.policy == "triples" else "triples",
        }
    }
    return TripleStore(
        store.vocab,
        observed=observed,
        auxiliary=aux,
        valid=valid,
        test=test,
        ookg=ookg,
        meta=meta,
    )


def split_manifest(store: TripleStore) -> dict:
    """JSON-ready description of an OOKG split."""
    v = store.vocab
    return {
        "version": 1,
        "spec": store.meta.get("split", {}),
        "ookg_entities": sorted(v.entity_label(e) for e in store.ookg),
        "auxiliary": [list(v.triple_labels(t)) for t in store.auxiliary_triples(base_only=True)],
        "valid": [list(v.triple_labels(t)) for t in store.valid],
        "test": [list(v.triple_labels(t)) for t in store.test],
    }


def save_manifest(store: TripleStore, path) -> None:
    Path(path).write_text(json.dumps(split_manifest(store), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def apply_manifest(store: TripleStore, manifest: dict) -> TripleStore:
    """Rebuild a split of ``store`` exactly as recorded in ``manifest``."""
    v = store.vocab
    ookg = {v.entity_id(e, create=False) for e in manifest["ookg_entities"]}
    spec_d = manifest.get("spec") or {}
    spec = SplitSpec(
        mode=spec_d.get("mode", "both"),
        amount=spec_d.get("amount", 1),
        seed=spec_d.get("seed", 0),
        policy=spec_d.get("policy", "triples"),
    )

    def conv(rows):
        return [(v.entity_id(h, False), v.relation_id(r, False), v.entity_id(t, False)) for h, r, t in rows]

    out = _apply_split(store, ookg, spec, keep_test=conv(manifest["test"]))
    out = out.replace(valid=conv(manifest["valid"]))
    out.meta["split"] = spec_d
    expected = set(conv(manifest["auxiliary"]))
    got = set(out.auxiliary_triples(base_only=True))
    if expected != got:
        raise SplitError("manifest auxiliary triples do not match the rebuilt split")
    return out


def load_manifest(store: TripleStore, path) -> TripleStore:
    return apply_manifest(store, json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# Path primitives


def _as_index(g) -> TripleIndex:
    return g.index if isinstance(g, TripleStore) else g


def paths_between(graph, src: int, dst: int, max_len: int = 3) -> list[RelPath]:
    """Distinct relation sequences of length 1..max_len that walk src to dst."""
    if not 1 <= max_len <= 3:
        raise ValueError("max_len must be in 1..3")
    index = _as_index(graph)
    found: dict[RelPath, None] = {}

    def walk(node: int, prefix: RelPath):
        for r, succ in index.out_edges(node).items():
            seq = prefix + (r,)
            for nxt in succ:
                if nxt == dst:
                    found.setdefault(seq)
                if len(seq) < max_len:
                    walk(nxt, seq)

    walk(src, ())
    return sorted(found, key=lambda p: (len(p), p))


def pcra_reliability(graph, src: int, path: Sequence[int], dst: int) -> float:
    """Resource reaching ``dst`` when a unit at ``src`` flows along ``path``.

    At each hop a node's resource splits evenly over its successors under the
    hop's relation.
    """
    if len(path) > 3:
        raise ValueError("paths longer than 3 are not supported")
    return resource_flow(graph, src, path).get(dst, 0.0)


def resource_flow(graph, src: int, path: Sequence[int]) -> dict[int, float]:
    index = _as_index(graph)
    res = {src: 1.0}
    for r in path:
        nxt: dict[int, float] = defaultdict(float)
        for node, amount in res.items():
            succ = index.successors(node, r)
            if not succ:
                continue
            share = amount / len(succ)
            for s in succ:
                nxt[s] += share
        res = nxt
        if not res:
            break
    return dict(res)


def path_flows(graph, src: int, max_len: int = 3, max_paths: int | None = None) -> dict[RelPath, dict[int, float]]:
    """Resource distribution for every relation sequence leaving ``src``."""
    index = _as_index(graph)
    out: dict[RelPath, dict[int, float]] = {}
    frontier: dict[RelPath, dict[int, float]] = {(): {src: 1.0}}
    for _ in range(max_len):
        nxt_frontier: dict[RelPath, dict[int, float]] = {}
        for prefix, dist in frontier.items():
            by_rel: dict[int, dict[int, float]] = {}
            for node, amount in dist.items():
                edges = index.out_edges(node)
                for r, succ in edges.items():
                    share = amount / len(succ)
                    acc = by_rel.setdefault(r, {})
                    for s in succ:
                        acc[s] = acc.get(s, 0.0) + share
            for r, acc in by_rel.items():
                nxt_frontier[prefix + (r,)] = acc
        out.update(nxt_frontier)
        frontier = nxt_frontier
        if max_paths is not None and len(out) > max_paths:
            break
    return out
