import math

import numpy as np
import pytest
import torch

from ookgc.model import (
    Edges,
    ModelConfig,
    ModelConfigError,
    UsageError,
    VNCModel,
    backward,
    forward_cached,
    load_checkpoint,
    save_checkpoint,
)


def _model(n=12, r=6, d=4, seed=0, **kw):
    kw.setdefault("dropout", 0.0)
    m = VNCModel(ModelConfig(num_entities=n, num_relations=r, dim=d, **kw), seed=seed).double()
    m.eval()
    return m


def _random_edges(n, r, m, seed):
    rng = np.random.default_rng(seed)
    rows = {(int(rng.integers(n)), int(rng.integers(r)), int(rng.integers(n))) for _ in range(m)}
    closed = rows | {(t, rel ^ 1, h) for h, rel, t in rows}
    return Edges.from_triples(sorted(closed))


def _set(p, value):
    with torch.no_grad():
        p.copy_(torch.as_tensor(value, dtype=p.dtype))


# --------------------------------------------------------------------------
# Structure layer


def test_zero_input_gives_zero_output():
    m = _model(n=5)
    H = torch.zeros(5, 4, dtype=torch.float64)
    assert torch.equal(m.structure_layer(0, H, _random_edges(5, 6, 8, 0)), H)


def test_isolated_node_uses_self_term_only():
    m = _model(n=3)
    H = torch.randn(3, 4, dtype=torch.float64)
    out = m.structure_layer(0, H, Edges.from_triples([(0, 0, 1)]))
    assert torch.allclose(out[2], torch.tanh(H[2] @ m.W[0]))


def test_structure_layer_two_node_hand_case():
    m = _model(n=2, r=2, d=2)
    _set(m.W[0], [[1.0, 2.0], [3.0, 4.0]])
    H = torch.eye(2, dtype=torch.float64)
    out = m.structure_layer(0, H, Edges.from_triples([(0, 0, 1)]))
    # row 0: W.(0,1) + (1,0).W = (2,4) + (1,2); row 1: no neighbours, (0,1).W = (3,4)
    expected = np.tanh(np.array([[3.0, 6.0], [3.0, 4.0]]))
    assert np.allclose(out.detach().numpy(), expected, atol=1e-12)


def test_structure_layer_width_mismatch():
    m = _model(n=3)
    with pytest.raises(ModelConfigError):
        m.structure_layer(0, torch.zeros(3, 5, dtype=torch.float64), Edges.from_triples([]))


# --------------------------------------------------------------------------
# Query layer


def test_single_neighbour_copies_it():
    m = _model(n=3)
    H = torch.randn(3, 4, dtype=torch.float64)
    out = m.query_layer(H, Edges.from_triples([(0, 2, 1)]), 2)
    assert torch.allclose(out[0], H[1])
    # nodes without neighbours keep their input
    assert torch.equal(out[2], H[2])


def test_identical_neighbours_split_evenly():
    m = _model(n=3)
    H = torch.randn(3, 4, dtype=torch.float64)
    H[2] = H[1]
    _, w = m.attention(H, Edges.from_triples([(0, 0, 1), (0, 2, 2)]), 0)
    assert torch.allclose(w, torch.tensor([0.5, 0.5], dtype=torch.float64))


def test_query_layer_hand_case():
    m = _model(n=3, r=2, d=2)
    _set(m.W_e, np.eye(2))
    _set(m.W_q, np.eye(2))
    _set(m.z, np.zeros((2, 2)))
    _set(m.u, [0, 0, 0, 0, 1, 0])
    H = torch.tensor([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    out = m.query_layer(H, Edges.from_triples([(0, 0, 1), (0, 0, 2)]), 0)
    # beta = (1, leaky(-1) = -0.2)
    w1 = math.exp(1.0) / (math.exp(1.0) + math.exp(-0.2))
    assert out[0].tolist() == pytest.approx([w1 - (1 - w1), 0.0], abs=1e-12)


def test_attention_weights_positive_and_normalised():
    m = _model(n=12)
    edges = _random_edges(12, 6, 30, 1)
    H = torch.randn(12, 4, dtype=torch.float64)
    for q in range(6):
        used, w = m.attention(H, edges, q)
        assert torch.all(w > 0)
        sums = torch.zeros(12, dtype=torch.float64).index_add(0, used.src, w)
        has = torch.zeros(12, dtype=torch.bool)
        has[used.src] = True
        assert torch.allclose(sums[has], torch.ones(int(has.sum()), dtype=torch.float64))


def test_strict_query_attends_only_matching_edges():
    m = _model(n=4, strict_query=True)
    used, _ = m.attention(torch.randn(4, 4, dtype=torch.float64), Edges.from_triples([(0, 0, 1), (0, 2, 2)]), 2)
    assert used.rel.tolist() == [2]


# --------------------------------------------------------------------------
# Encoder


def test_ookg_entity_without_edges_encodes_to_zero():
    m = _model(n=5)
    mask = torch.zeros(5, dtype=torch.bool)
    mask[4] = True
    tables = m.encode(_random_edges(4, 6, 6, 2), [0], mask)
    assert torch.equal(tables[0][4], torch.zeros(4, dtype=torch.float64))


def test_encode_composes_layers():
    m = _model(n=12)
    edges = _random_edges(12, 6, 20, 3)
    H = m.h0
    for layer in range(2):
        H = m.structure_layer(layer, H, edges)
    assert torch.equal(m.encode(edges, [3])[3], m.query_layer(H, edges, 3))


def test_permutation_equivariance():
    m = _model(n=12)
    edges = _random_edges(12, 6, 25, 4)
    perm = torch.from_numpy(np.random.default_rng(5).permutation(12))
    before = m.encode(edges, [0, 1])
    m2 = _model(n=12)
    m2.load_state_dict(m.state_dict())
    inv = torch.argsort(perm)
    with torch.no_grad():
        m2.h0.copy_(m.h0[inv])
    pe = Edges(perm[edges.src], edges.rel, perm[edges.dst])
    after = m2.encode(pe, [0, 1])
    for q in (0, 1):
        assert torch.allclose(after[q][perm], before[q], atol=1e-12)


def test_inference_passes_are_bit_identical():
    m = VNCModel(ModelConfig(12, 6, dim=4, dropout=0.5), seed=1)
    m.eval()
    edges = _random_edges(12, 6, 20, 6)
    t = torch.tensor([[0, 1, 2], [3, 0, 4]])
    assert torch.equal(m(edges, t), m(edges, t))
    m.train()
    assert not torch.equal(m.structure(edges), m.structure(edges))


# --------------------------------------------------------------------------
# Decoders


def test_distmult_unit_vectors():
    m = _model(n=2, r=2, d=2)
    e = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    _set(m.rel, [[1.0, 1.0], [1.0, 1.0]])
    assert m.score_rows(e, torch.tensor([0]), e).item() == pytest.approx(1.0)
    _set(m.rel, np.zeros((2, 2)))
    assert m.score_rows(e, torch.tensor([0]), e).item() == 0.0


def test_distmult_symmetric_transe_not():
    rng = torch.Generator().manual_seed(0)
    eh, et = torch.randn(50, 4, generator=rng, dtype=torch.float64), torch.randn(50, 4, generator=rng, dtype=torch.float64)
    rel = torch.randint(0, 6, (50,), generator=rng)
    dm = _model()
    assert torch.allclose(dm.score_rows(eh, rel, et), dm.score_rows(et, rel, eh))
    te = _model(decoder="transe")
    assert not torch.allclose(te.score_rows(eh, rel, et), te.score_rows(et, rel, eh))


def test_bad_decoder_and_relation_count():
    with pytest.raises(ModelConfigError):
        ModelConfig(3, 2, decoder="complex")
    with pytest.raises(ModelConfigError):
        ModelConfig(3, 3)


# --------------------------------------------------------------------------
# Gradients


def _numeric_grad(model, p, f, h=1e-4):
    g = torch.zeros_like(p)
    flat = p.data.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g.view(-1)[i] = (fp - fm) / (2 * h)
    return g


def gradient_check(model, edges, triples, upstream, mask=None):
    """Largest relative error between analytic and central-difference gradients.

    The denominator is floored at 1e-6 so tensors whose true gradient is
    zero (softmax shift invariance) are compared on an absolute scale.
    """
    cache = forward_cached(model, edges, triples, mask)
    analytic = backward(upstream, cache)

    def f():
        with torch.no_grad():
            return float((upstream * model(edges, triples, mask)).sum())

    worst = {}
    for name, p in model.named_parameters():
        num = _numeric_grad(model, p, f)
        a = analytic[name]
        scale = torch.maximum(a.abs().max(), num.abs().max()).clamp_min(1e-6)
        worst[name] = float((a - num).abs().max() / scale)
    return worst


@pytest.mark.parametrize("decoder", ["distmult", "transe"])
def test_gradients_match_central_differences(decoder):
    m = _model(n=12, d=4, seed=3, decoder=decoder)
    edges = _random_edges(12, 6, 24, 7)
    triples = torch.tensor([[0, 0, 1], [2, 3, 5], [4, 1, 7], [9, 4, 11], [6, 2, 3]])
    upstream = torch.linspace(-1.0, 1.0, 5, dtype=torch.float64)
    mask = torch.zeros(12, dtype=torch.bool)
    mask[10] = True
    worst = gradient_check(m, edges, triples, upstream, mask)
    assert set(worst) >= {"h0", "W.0", "W.1", "alpha", "u", "W_e", "W_q", "z", "rel"}
    assert max(worst.values()) <= 1e-4, worst


def test_scalar_network_chain_rule():
    # d=1, one structure layer, no edges: e = tanh(h0 * w); TransE phi = -|e_h + r - e_t|
    m = _model(n=2, r=2, d=1, decoder="transe", structure_layers=1)
    _set(m.h0, [[0.3], [-0.7]])
    _set(m.W[0], [[1.5]])
    _set(m.rel, [[0.2], [0.0]])
    cache = forward_cached(m, Edges.from_triples([]), torch.tensor([[0, 0, 1]]))
    g = backward(torch.ones(1, dtype=torch.float64), cache)
    a, b, w, r = 0.3, -0.7, 1.5, 0.2
    eh, et = math.tanh(w * a), math.tanh(w * b)
    sign = 1.0 if eh + r - et > 0 else -1.0
    assert g["rel"][0, 0].item() == pytest.approx(-sign)
    assert g["h0"][0, 0].item() == pytest.approx(-sign * (1 - eh**2) * w)
    assert g["h0"][1, 0].item() == pytest.approx(sign * (1 - et**2) * w)
    assert g["W.0"][0, 0].item() == pytest.approx(-sign * ((1 - eh**2) * a - (1 - et**2) * b))


def test_zero_upstream_gives_zero_gradients():
    m = _model()
    cache = forward_cached(m, _random_edges(12, 6, 10, 8), torch.tensor([[0, 0, 1]]))
    grads = backward(torch.zeros(1, dtype=torch.float64), cache)
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_backward_needs_fresh_cache():
    m = _model()
    with pytest.raises(UsageError):
        backward(torch.ones(1), None)
    cache = forward_cached(m, _random_edges(12, 6, 10, 8), torch.tensor([[0, 0, 1]]))
    backward(torch.ones(1, dtype=torch.float64), cache)
    with pytest.raises(UsageError):
        backward(torch.ones(1, dtype=torch.float64), cache)


# --------------------------------------------------------------------------
# Checkpoints


@pytest.mark.parametrize("double", [False, True])
def test_checkpoint_round_trip_is_exact(tmp_path, double):
    m = VNCModel(ModelConfig(12, 6, dim=4), seed=9)
    if double:
        m.double()
    m.eval()
    edges = _random_edges(12, 6, 20, 9)
    t = torch.tensor([[0, 1, 2], [5, 4, 3], [7, 0, 8]])
    save_checkpoint(tmp_path / "m.npz", m, {"note": "x"})
    again, meta = load_checkpoint(tmp_path / "m.npz")
    assert meta["extra"] == {"note": "x"} and len(meta["config_hash"]) == 16
    assert torch.equal(m(edges, t), again(edges, t))
