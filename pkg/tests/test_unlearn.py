import json

import numpy as np
import pytest

from nodecul import autodiff as ad
from nodecul.errors import ConfigError, ContractError
from nodecul.gnn import GnnModel, ModelSpec
from nodecul.graph import Graph, NodePartition, k_hop_layers, split_nodes
from nodecul.trainer import TrainConfig, accuracies, train
from nodecul.unlearn import (ContrastiveSets, ReconstructionAnchors, UnlearnConfig, build_contrastive_sets,
                             build_reconstruction_anchors, make_optimizer, neighbor_loss,
                             neighborhood_reconstruction, node_loss, node_representation_unlearn_step,
                             reconstruction_loss, run_node_cul, termination_check, unlearn_loss)

from conftest import path_graph, random_graph, sbm_graph
from gradcheck import check, check_params, relu_margin


def T(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- reference implementations ----------------------------------------------


def naive_unlearn_loss(h_u, h_nb, h_r, positive, negative, tau, inside=True):
    total = 0.0
    for i in range(len(h_u)):
        pos = [j for j in range(len(h_nb)) if positive[i, j]]
        neg = [j for j in range(len(h_r)) if negative[i, j]]
        if not pos or not neg:
            continue
        acc = 0.0
        for n in neg:
            if inside:
                num = np.exp(np.dot(h_u[i], h_r[n]) / tau)
                den = sum(np.exp(np.dot(h_u[i], h_nb[p]) / tau) for p in pos)
            else:
                num = np.exp(np.dot(h_u[i], h_r[n])) / tau
                den = sum(np.exp(np.dot(h_u[i], h_nb[p])) / tau for p in pos)
            acc += np.log(num / den)
        total += -acc / len(neg)
    return total


def naive_reconstruction_loss(h_layer, h_next, mask, tau):
    total = 0.0
    for i in range(len(h_layer)):
        s = [j for j in range(len(h_next)) if mask[i, j]]
        if s:
            total += -sum(np.dot(h_layer[i], h_next[j]) / tau for j in s) / len(s)
    return total


def random_sets(rng, max_nodes=16):
    n_u = int(rng.integers(1, 5))
    n_nb = int(rng.integers(1, max_nodes - n_u - 1))
    n_r = int(rng.integers(1, max_nodes - n_u - n_nb + 1))
    d = int(rng.integers(2, 6))
    pos = rng.random((n_u, n_nb)) < 0.5
    neg = rng.random((n_u, n_r)) < 0.5
    sets = ContrastiveSets(np.arange(n_u), np.arange(n_nb), np.arange(n_r), pos, neg)
    unit = lambda x: x / np.linalg.norm(x, axis=1, keepdims=True)
    return sets, unit(rng.normal(size=(n_u, d))), unit(rng.normal(size=(n_nb, d))), unit(rng.normal(size=(n_r, d)))


def random_anchors(rng, max_nodes=16):
    n = int(rng.integers(1, max_nodes // 2 + 1))
    m = int(rng.integers(1, max_nodes - n + 1))
    d = int(rng.integers(2, 6))
    mask = rng.random((n, m)) < 0.4
    unit = lambda x: x / np.linalg.norm(x, axis=1, keepdims=True)
    return (ReconstructionAnchors(np.arange(n), np.arange(m), mask),
            unit(rng.normal(size=(n, d))), unit(rng.normal(size=(m, d))))


# --- contrastive sets -------------------------------------------------------


def test_contrastive_sets_rule():
    # v=0 with neighbors a=1 (same class) and b=2 (other); remaining c=3 (same), d=4 (other)
    g = Graph.from_edges(5, [0, 0], [1, 2], np.zeros((5, 1)), [0, 0, 1, 0, 1], 2)
    sets = build_contrastive_sets(g, g.labels, [0], [3, 4])
    assert sets.neighbors[sets.positive[0]].tolist() == [1]
    assert sets.remain[sets.negative[0]].tolist() == [4]
    assert sets.active.tolist() == [True]


def test_contrastive_sets_flags():
    g = Graph.from_edges(4, [1], [2], np.zeros((4, 1)), [0, 0, 0, 1], 2)
    iso = build_contrastive_sets(g, g.labels, [0], [3])
    assert iso.empty_positive.tolist() == [True] and not iso.active.any()
    same = build_contrastive_sets(g, g.labels, [1], [0])
    assert same.empty_negative.tolist() == [True] and not same.active.any()


def test_masked_labels_never_positive():
    g = Graph.from_edges(3, [0, 0], [1, 2], np.zeros((3, 1)), [0, 0, 1], 2)
    labels = g.labels.copy()
    labels[1] = -1
    sets = build_contrastive_sets(g, labels, [0], [2])
    assert not sets.positive.any()


def test_contrastive_invariants(rng):
    for _ in range(30):
        g = random_graph(rng, 30, 0.2)
        bu = rng.choice(30, size=4, replace=False)
        br = np.setdiff1d(np.arange(30), bu)[:10]
        sets = build_contrastive_sets(g, g.labels, bu, br)
        for i, v in enumerate(bu):
            for p in sets.neighbors[sets.positive[i]]:
                assert p in g.neighbors(v) and g.labels[p] == g.labels[v]
            for q in sets.remain[sets.negative[i]]:
                assert q in br and g.labels[q] != g.labels[v]


def test_reconstruction_anchor_invariants(rng):
    for _ in range(20):
        g = random_graph(rng, 40, 0.1)
        seeds = rng.choice(40, size=3, replace=False)
        v_u = rng.choice(40, size=6, replace=False)
        layers = k_hop_layers(g, seeds, 2, exclude=v_u).layers
        a = build_reconstruction_anchors(g, layers[0], layers[1], exclude=v_u)
        assert not set(a.next_layer.tolist()) & set(v_u.tolist())
        for i, v in enumerate(a.layer):
            for s in a.next_layer[a.mask[i]]:
                assert s in g.neighbors(v)


# --- losses -----------------------------------------------------------------


def test_unlearn_loss_symmetric_case_is_zero():
    h = np.array([[0.6, 0.8]])
    sets = ContrastiveSets(np.arange(1), np.arange(1), np.arange(1), np.ones((1, 1), bool), np.ones((1, 1), bool))
    assert unlearn_loss(T(h), T(h), T(h), sets, tau=0.7).item() == pytest.approx(0.0, abs=1e-15)


def test_unlearn_loss_singleton_closed_form():
    sets = ContrastiveSets(np.arange(1), np.arange(1), np.arange(1), np.ones((1, 1), bool), np.ones((1, 1), bool))
    loss = unlearn_loss(T([[1.0]]), T([[0.9]]), T([[0.5]]), sets, tau=1.0).item()
    assert loss == pytest.approx(0.4, abs=1e-14)


def test_unlearn_loss_matches_naive(rng):
    for _ in range(100):
        sets, h_u, h_nb, h_r = random_sets(rng)
        tau = float(rng.uniform(0.1, 2.0))
        for placement in ("inside", "outside"):
            got = unlearn_loss(T(h_u), T(h_nb), T(h_r), sets, tau, placement).item()
            want = naive_unlearn_loss(h_u, h_nb, h_r, sets.positive, sets.negative, tau, placement == "inside")
            assert abs(got - want) < 1e-10


def test_reconstruction_loss_examples():
    a = ReconstructionAnchors(np.arange(1), np.arange(1), np.ones((1, 1), bool))
    h = np.array([[0.6, 0.8]])
    assert reconstruction_loss(T(h), T(h), a, tau=1.0).item() == pytest.approx(-1.0)
    assert reconstruction_loss(T([[1.0, 0.0]]), T([[0.0, 1.0]]), a, tau=1.0).item() == 0.0


def test_reconstruction_loss_matches_naive(rng):
    for _ in range(100):
        a, h, h_next = random_anchors(rng)
        tau = float(rng.uniform(0.1, 2.0))
        got = reconstruction_loss(T(h), T(h_next), a, tau).item()
        assert abs(got - naive_reconstruction_loss(h, h_next, a.mask, tau)) < 1e-10


def test_empty_sets_are_neutral(rng):
    sets, h_u, h_nb, h_r = random_sets(rng)
    pos = sets.positive.copy()
    pos[0] = False
    sets = ContrastiveSets(sets.anchors, sets.neighbors, sets.remain, pos, sets.negative)
    tu = T(h_u, grad=True)
    ad.backward(unlearn_loss(tu, T(h_nb), T(h_r), sets))
    assert np.all(tu.grad[0] == 0)

    a, h, h_next = random_anchors(rng)
    mask = a.mask.copy()
    mask[0] = False
    th = T(h, grad=True)
    ad.backward(reconstruction_loss(th, T(h_next), ReconstructionAnchors(a.layer, a.next_layer, mask)))
    assert np.all(th.grad[0] == 0)


def test_losses_match_finite_differences(rng):
    for _ in range(20):
        sets, h_u, h_nb, h_r = random_sets(rng)
        fn = lambda u, nb, r: unlearn_loss(ad.l2_normalize_rows(u), ad.l2_normalize_rows(nb),
                                           ad.l2_normalize_rows(r), sets, 0.5)
        assert check(fn, [h_u * 2, h_nb * 3, h_r]) < 1e-4
        a, h, h_next = random_anchors(rng)
        fn = lambda x, y: reconstruction_loss(ad.l2_normalize_rows(x), ad.l2_normalize_rows(y), a, 0.5)
        assert check(fn, [h, h_next * 0.5]) < 1e-4


# --- steps on a small fixture ------------------------------------------------


def fixture(seed=0, n=10, classes=2):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, 0.35, dim=4, classes=classes)
    m = GnnModel(ModelSpec("gcn", 4, classes, hidden_dim=5, embedding_dim=4, dropout=0.0), seed=seed)
    return g, m


KINK_MARGIN = 1e-3  # ten finite-difference steps


def smooth_instances(make, count=20):
    """Yield ``count`` fixtures whose relu inputs all stay clear of zero."""
    seed, found = 0, 0
    while found < count:
        inst = make(seed)
        seed += 1
        if inst is not None and relu_margin(inst[-1]) >= KINK_MARGIN:
            found += 1
            yield inst
    assert seed < 5 * count


def test_node_loss_gradient():
    def make(seed):
        g, m = fixture(seed)
        cfg = UnlearnConfig(tau=0.5, beta=8.0)
        return m, lambda: node_loss(m, g, g.labels, np.array([0, 1, 2]), np.array([5, 6, 7, 8, 9]), cfg)[0]

    for m, fn in smooth_instances(make):
        assert check_params(fn, m.params) < 1e-4


def test_neighbor_loss_gradient():
    def make(seed):
        g, m = fixture(seed, n=12)
        layers = k_hop_layers(g, [0], 2, exclude=[1]).layers
        if not len(layers[0]) or not len(layers[1]):
            return None
        cfg = UnlearnConfig(gamma=float(seed % 2))
        return m, lambda: neighbor_loss(m, g, g.labels, layers[0], layers[1], cfg, exclude=[1])

    for m, fn in smooth_instances(make):
        assert check_params(fn, m.params) < 1e-4


def test_beta_zero_empty_sets_leave_model_unchanged():
    g = Graph.from_edges(4, [1], [2], np.eye(4), [0, 1, 0, 1], 2)
    m = GnnModel(ModelSpec("gcn", 4, 2, hidden_dim=3, embedding_dim=3), seed=1)
    before = m.state()
    cfg = UnlearnConfig(beta=0.0)
    parts = node_representation_unlearn_step(m, g, g.labels, [0], [1, 3], cfg, make_optimizer(m, cfg))
    assert parts["loss"] == 0.0 and parts["active"] == 0
    for k, v in before.items():
        assert np.array_equal(m.params[k].values, v)


def test_small_steps_decrease_node_loss():
    g, m = fixture(3, n=12)
    bu, br = np.array([0, 1, 2]), np.arange(5, 12)
    cfg = UnlearnConfig(lr=1e-4, optimizer="sgd")
    opt = make_optimizer(m, cfg)
    losses = [node_representation_unlearn_step(m, g, g.labels, bu, br, cfg, opt)["loss"] for _ in range(30)]
    assert np.all(np.diff(losses) < 0)


# --- neighborhood reconstruction --------------------------------------------


def test_single_layer_is_ce_only():
    g, m = fixture(0)
    events = []
    steps = neighborhood_reconstruction(m, g, g.labels, [np.array([1, 2]), np.array([], int)],
                                        UnlearnConfig(), make_optimizer(m, UnlearnConfig()), callback=events.append)
    assert steps == 1 and events[0]["next"] is None


def test_all_layers_empty_does_nothing():
    g, m = fixture(0)
    before = m.state()
    assert neighborhood_reconstruction(m, g, g.labels, [np.array([], int)] * 3, UnlearnConfig(),
                                       make_optimizer(m, UnlearnConfig())) == 0
    assert all(np.array_equal(m.params[k].values, v) for k, v in before.items())


def test_update_order_is_deepest_first():
    g = path_graph(6, dim=6, labels=np.array([0, 1, 0, 1, 0, 1]))
    m = GnnModel(ModelSpec("gcn", 6, 2, hidden_dim=4, embedding_dim=4), seed=0)
    layers = k_hop_layers(g, [0], 3).layers  # [1], [2], [3], [4]
    events = []
    cfg = UnlearnConfig()
    steps = neighborhood_reconstruction(m, g, g.labels, layers, cfg, make_optimizer(m, cfg),
                                        callback=events.append)
    assert steps == 3
    assert [(e["layer"], e["next"]) for e in events] == [(2, 3), (1, 2), (0, 1)]


def test_empty_layer_truncates():
    g = path_graph(4, dim=4)
    m = GnnModel(ModelSpec("gcn", 4, 1, hidden_dim=3, embedding_dim=3), seed=0)
    layers = [np.array([1]), np.array([2]), np.array([], int), np.array([3])]
    events = []
    cfg = UnlearnConfig()
    neighborhood_reconstruction(m, g, g.labels, layers, cfg, make_optimizer(m, cfg), callback=events.append)
    assert [(e["layer"], e["next"]) for e in events] == [(0, 1)]


def test_reconstruction_pulls_toward_anchors():
    g = path_graph(5, dim=5, labels=np.array([0, 1, 0, 1, 0]))
    m = GnnModel(ModelSpec("gcn", 5, 2, hidden_dim=4, embedding_dim=4), seed=3)
    layers = k_hop_layers(g, [0], 1).layers  # [1], [2]
    cfg = UnlearnConfig(gamma=0.0, lr=0.01)

    def mean_dot():
        h = ad.l2_normalize_rows(m.encode(g)).values
        return float(h[1] @ h[2])

    start = mean_dot()
    opt = make_optimizer(m, cfg)
    for _ in range(50):
        neighborhood_reconstruction(m, g, g.labels, layers, cfg, opt)
    assert mean_dot() > start


# --- termination ------------------------------------------------------------


class FixedModel:
    def __init__(self, pred):
        self.pred = np.asarray(pred)

    def predict_labels(self, graph):
        return self.pred


@pytest.mark.parametrize("u_correct,e_correct,expect", [(85, 86, True), (86, 86, True), (90, 86, False)])
def test_termination_examples(u_correct, e_correct, expect):
    labels = np.zeros(200, dtype=np.int64)
    g = Graph.from_edges(200, [], [], np.zeros((200, 1)), labels, 2)
    pred = np.ones(200, dtype=np.int64)
    pred[:u_correct] = 0
    pred[100:100 + e_correct] = 0
    assert termination_check(FixedModel(pred), g, np.arange(100), np.arange(100, 200)) is expect


def test_termination_empty_set():
    g = path_graph(3)
    with pytest.raises(ContractError):
        termination_check(FixedModel([0, 0, 0]), g, [], [1])


def test_config_validation():
    for kw in ({"tau": 0.0}, {"omega": 0}, {"max_rounds": 0}, {"temperature": "middle"},
               {"batch_size_u": 0}, {"lr": -1.0}, {"reduction": "max"}):
        with pytest.raises(ConfigError):
            UnlearnConfig(**kw)
    assert UnlearnConfig(omega=1).reconstruction_passes == 1
    assert UnlearnConfig(omega=2).reconstruction_passes == 1
    assert UnlearnConfig(omega=3).reconstruction_passes == 2


# --- full runs on a synthetic graph ------------------------------------------


def sbm_run(seed=0, **kw):
    g = sbm_graph(n=80, p_in=0.2, p_out=0.02, seed=seed)
    p = split_nodes(g, seed, 0.25, 0.2)
    spec = ModelSpec("gcn", g.feature_dim, 2, hidden_dim=16, embedding_dim=16)
    model, _ = train(g, p, spec, TrainConfig(epochs=100, lr=0.05, seed=seed))
    cfg = UnlearnConfig(batch_size_u=8, batch_size_r=16, max_rounds=kw.pop("max_rounds", 10), seed=seed, **kw)
    return g, p, model, cfg


def test_empty_unlearn_set_returns_immediately():
    g, p, model, cfg = sbm_run()
    empty = NodePartition(p.num_nodes, p.train_nodes, p.test_nodes, [], p.train_nodes, p.eval_nodes)
    out, report = run_node_cul(model, g, empty, cfg)
    assert report.rounds == 0 and report.condition_met
    for k, v in model.state().items():
        assert np.array_equal(out.params[k].values, v)


@pytest.mark.parametrize("seed", range(3))
def test_report_condition_holds(seed):
    g, p, model, cfg = sbm_run(seed)
    out, report = run_node_cul(model, g, p, cfg)
    assert report.rounds >= 1
    assert report.history[0]["round"] == 0 and len(report.history) == report.rounds + 1
    if report.condition_met:
        assert termination_check(out, g, p.unlearn_nodes, p.eval_nodes)
    else:
        assert report.rounds == cfg.max_rounds


def test_run_does_not_touch_input_model():
    g, p, model, cfg = sbm_run()
    before = model.state()
    run_node_cul(model, g, p, cfg)
    assert all(np.array_equal(model.params[k].values, v) for k, v in before.items())


def test_run_is_deterministic():
    g, p, model, cfg = sbm_run(1)
    a, ra = run_node_cul(model, g, p, cfg)
    b, rb = run_node_cul(model, g, p, cfg)
    assert ra.to_json(include_time=False) == rb.to_json(include_time=False)
    assert all(np.array_equal(a.params[k].values, b.params[k].values) for k in a.params)


def test_test_labels_never_enter_a_loss():
    g, p, model, cfg = sbm_run(2)
    hidden = np.setdiff1d(p.test_nodes, p.eval_nodes)
    flipped = g.labels.copy()
    flipped[hidden] = 1 - flipped[hidden]
    h = Graph(g.num_nodes, g.csr_offsets, g.csr_targets, g.features, flipped, 2)
    a, ra = run_node_cul(model, g, p, cfg)
    b, rb = run_node_cul(model, h, p, cfg)
    assert ra.rounds == rb.rounds
    assert all(np.array_equal(a.params[k].values, b.params[k].values) for k in a.params)


def test_callback_sees_both_kinds():
    g, p, model, cfg = sbm_run(0, max_rounds=1)
    kinds = set()
    _, report = run_node_cul(model, g, p, cfg, callback=lambda ev: kinds.add(ev["kind"]))
    assert kinds == {"node", "reconstruct"}
    assert report.node_steps == cfg.omega * int(np.ceil(len(p.unlearn_nodes) / cfg.batch_size_u))


def test_no_reconstruction_flag():
    g, p, model, cfg = sbm_run(0, max_rounds=1, reconstruction=False)
    _, report = run_node_cul(model, g, p, cfg)
    assert report.reconstruction_steps == 0


def test_report_json():
    g, p, model, cfg = sbm_run(0, max_rounds=2)
    _, report = run_node_cul(model, g, p, cfg)
    d = json.loads(report.to_json())
    assert {"rounds", "condition_met", "history", "wall_time", "config"} <= set(d)
    assert "wall_time" not in json.loads(report.to_json(include_time=False))
    assert d["config"]["beta"] == 8.0
