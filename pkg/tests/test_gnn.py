import numpy as np
import pytest

from nodecul import autodiff as ad
from nodecul.errors import ConfigError, DataError, ShapeError
from nodecul.gnn import (GnnModel, ModelSpec, embed, gcn_layer, gin_adjacency, gin_layer, load_checkpoint,
                         normalized_adjacency, predict, save_checkpoint)
from nodecul.graph import Graph, induced_subgraph, khop_view

from conftest import path_graph, random_graph
from gradcheck import check_params


def spec_for(g, arch="gcn", **kw):
    kw.setdefault("hidden_dim", 6)
    kw.setdefault("embedding_dim", 5)
    return ModelSpec(arch=arch, in_dim=g.feature_dim, num_classes=g.num_classes, **kw)


def mlp(rng, d_in, hidden, d_out):
    return [(ad.Tensor(rng.normal(size=(d_in, hidden))), ad.Tensor(rng.normal(size=(1, hidden)))),
            (ad.Tensor(rng.normal(size=(hidden, d_out))), ad.Tensor(rng.normal(size=(1, d_out))))]


def apply_mlp(layers, x):
    (w1, b1), (w2, b2) = layers
    return np.maximum(x @ w1.values + b1.values, 0) @ w2.values + b2.values


# --- adjacency --------------------------------------------------------------


def test_normalized_adjacency_symmetric(rng):
    g = random_graph(rng, 40, 0.1)
    A = normalized_adjacency(g).to_dense()
    assert np.max(np.abs(A - A.T)) == 0
    raw = (A != 0).sum(axis=1)
    assert np.array_equal(raw, g.degrees + 1)


def test_gcn_single_isolated_node(rng):
    g = Graph.from_edges(1, [], [], np.ones((1, 3)), [0], 1)
    A = normalized_adjacency(g)
    assert A.to_dense().tolist() == [[1.0]]
    h, w = rng.normal(size=(1, 3)), rng.normal(size=(3, 2))
    out = gcn_layer(ad.Tensor(h), A, ad.Tensor(w)).values
    assert np.allclose(out, np.maximum(h @ w, 0))


def test_gcn_path_hand_computed():
    g = path_graph(3)
    out = gcn_layer(ad.Tensor(np.eye(3)), normalized_adjacency(g), ad.Tensor(np.eye(3))).values
    s = 1 / np.sqrt(6)
    assert np.allclose(out, [[1 / 2, s, 0], [s, 1 / 3, s], [0, s, 1 / 2]], atol=1e-15)


def test_gcn_zero_weight(rng):
    g = random_graph(rng, 10)
    out = gcn_layer(ad.Tensor(rng.normal(size=(10, 4))), normalized_adjacency(g), ad.Tensor(np.zeros((4, 3))))
    assert np.all(out.values == 0)


def test_gcn_shape_error(rng):
    g = random_graph(rng, 5)
    with pytest.raises(ShapeError):
        gcn_layer(ad.Tensor(np.zeros((5, 4))), normalized_adjacency(g), ad.Tensor(np.zeros((3, 2))))


def test_gin_isolated_node(rng):
    g = Graph.from_edges(1, [], [], np.ones((1, 3)), [0], 1)
    layers = mlp(rng, 3, 4, 2)
    h = rng.normal(size=(1, 3))
    out = gin_layer(ad.Tensor(h), gin_adjacency(g), layers, apply_relu=False).values
    assert np.allclose(out, apply_mlp(layers, h))
    out = gin_layer(ad.Tensor(h), gin_adjacency(g, eps=-1.0), layers, apply_relu=False).values
    assert np.allclose(out, apply_mlp(layers, np.zeros((1, 3))))


def test_gin_star_sum(rng):
    g = Graph.from_edges(4, [0, 0, 0], [1, 2, 3], np.ones((4, 3)), [0] * 4, 1)
    leaf, center = rng.normal(size=3), rng.normal(size=3)
    h = np.vstack([center, leaf, leaf, leaf])
    layers = mlp(rng, 3, 4, 2)
    out = gin_layer(ad.Tensor(h), gin_adjacency(g), layers, apply_relu=False).values
    assert np.allclose(out[0], apply_mlp(layers, (center + 3 * leaf)[None])[0])


# --- models -----------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec("gat", 3, 2)
    with pytest.raises(ConfigError):
        ModelSpec("gcn", 3, 2, num_layers=4)


@pytest.mark.parametrize("arch", ["gcn", "gin"])
def test_zero_model_embeds_zero(rng, arch):
    g = random_graph(rng, 12)
    m = GnnModel(spec_for(g, arch))
    for p in m.params.values():
        p.values = np.zeros_like(p.values)
    assert np.all(embed(m, g.full_view, np.arange(12)).values == 0)
    assert np.all(predict(m, g.full_view, np.arange(12)).values == 0)


@pytest.mark.parametrize("arch", ["gcn", "gin"])
def test_isomorphic_components_match(rng, arch):
    half = random_graph(rng, 8, 0.4)
    src, dst = half.edge_list()
    feats = np.vstack([half.features, half.features])
    g = Graph.from_edges(16, np.r_[src, src + 8], np.r_[dst, dst + 8], feats,
                         np.r_[half.labels, half.labels], half.num_classes)
    m = GnnModel(spec_for(g, arch), seed=3)
    h = embed(m, g.full_view, np.arange(16)).values
    assert np.allclose(h[:8], h[8:], atol=1e-12)


@pytest.mark.parametrize("arch", ["gcn", "gin"])
def test_permutation_equivariance(rng, arch):
    for _ in range(5):
        n = int(rng.integers(5, 51))
        g = random_graph(rng, n, 0.15)
        perm = rng.permutation(n)  # new id of old node i is perm[i]
        src, dst = g.edge_list()
        feats = np.empty_like(g.features)
        feats[perm] = g.features
        labels = np.empty_like(g.labels)
        labels[perm] = g.labels
        h = Graph.from_edges(n, perm[src], perm[dst], feats, labels, g.num_classes)
        m = GnnModel(spec_for(g, arch), seed=1)
        a = predict(m, g.full_view, np.arange(n)).values
        b = predict(m, h.full_view, perm).values
        assert np.allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("arch", ["gcn", "gin"])
@pytest.mark.parametrize("layers", [1, 2, 3])
def test_khop_locality(rng, arch, layers):
    for _ in range(5):
        g = random_graph(rng, 60, 0.05)
        m = GnnModel(spec_for(g, arch, num_layers=layers), seed=2)
        full = m.forward(g).values
        for u in rng.choice(60, size=5, replace=False):
            view = khop_view(g, [u], layers)
            local = predict(m, view, view.to_local([u])).values
            assert np.max(np.abs(local - full[u])) < 1e-10


def test_embed_index_error(rng):
    g = random_graph(rng, 6)
    m = GnnModel(spec_for(g))
    view = induced_subgraph(g, [0, 1])
    with pytest.raises(IndexError):
        embed(m, view, [2])


def test_wrong_feature_dim(rng):
    g = random_graph(rng, 6)
    m = GnnModel(ModelSpec("gcn", g.feature_dim + 1, g.num_classes))
    with pytest.raises(ShapeError):
        m.forward(g)


@pytest.mark.parametrize("arch", ["gcn", "gin"])
def test_model_gradients_match_finite_differences(rng, arch):
    g = random_graph(rng, 10, 0.3, dim=4)
    m = GnnModel(spec_for(g, arch, hidden_dim=4, embedding_dim=3), seed=4)
    nodes = np.arange(10)

    def loss():
        return ad.cross_entropy(m.forward(g), g.labels[nodes])

    assert check_params(loss, m.params) < 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    g = random_graph(rng, 10)
    for arch in ("gcn", "gin"):
        m = GnnModel(spec_for(g, arch, num_layers=3), seed=9)
        save_checkpoint(m, tmp_path / f"{arch}.ckpt")
        back = load_checkpoint(tmp_path / f"{arch}.ckpt")
        assert back.spec == m.spec and back.seed == 9
        for k, p in m.params.items():
            assert np.array_equal(back.params[k].values, p.values)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"hello\n")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path, rng):
    g = random_graph(rng, 10)
    path = tmp_path / "m.ckpt"
    save_checkpoint(GnnModel(spec_for(g)), path)
    data = path.read_bytes()
    for cut in (len(data) - 8, data.index(b"end"), 30):
        path.write_bytes(data[:cut])
        with pytest.raises(DataError):
            load_checkpoint(path)
    path.write_bytes(data + b"\0" * 8)
    with pytest.raises(DataError):
        load_checkpoint(path)
