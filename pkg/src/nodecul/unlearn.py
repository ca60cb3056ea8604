"""Node-level contrastive unlearning.

The procedure alternates two kinds of updates per batch of unlearning
nodes:

* node representation steps, which push each unlearning node's embedding
  away from same-class neighbors and toward remaining nodes of other
  classes, with a cross-entropy term on a remaining batch;
* neighborhood reconstruction, which walks the hop layers around the
  batch from the deepest pair inward and pulls every layer toward its
  next-deeper remaining neighbors.

Rounds repeat until the model is no more accurate on the unlearning nodes
than on held-out evaluation nodes.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .gnn import GnnModel
from .graph import Graph, NodePartition, k_hop_layers, khop_view
from .trainer import accuracies

log = logging.getLogger(__name__)

TEMPERATURE_PLACEMENTS = ("inside", "outside")


@dataclass(frozen=True)
class UnlearnConfig:
    """Knobs of the unlearning loop.

    ``temperature="inside"`` scales similarities before exponentiation,
    exp(s / tau). ``"outside"`` divides after it, exp(s) / tau, in which
    case tau cancels from the unlearning loss.
    """

    tau: float = 0.5
    beta: float = 8.0
    gamma: float = 1.0
    omega: int = 2
    batch_size_u: int = 128
    batch_size_r: int = 128
    k: Optional[int] = None
    max_rounds: int = 50
    lr: float = 0.005
    seed: int = 0
    normalize: bool = True
    temperature: str = "inside"
    reduction: str = "mean"
    optimizer: str = "adam"
    reconstruction: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.omega < 1:
            raise ConfigError("omega must be >= 1")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.batch_size_u < 1 or self.batch_size_r < 1:
            raise ConfigError("batch sizes must be positive")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("reduction must be 'mean' or 'sum'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.temperature not in TEMPERATURE_PLACEMENTS:
            raise ConfigError(f"temperature must be one of {TEMPERATURE_PLACEMENTS}")

    @property
    def reconstruction_passes(self) -> int:
        return math.ceil(self.omega / 2)


# --- contrastive sets -------------------------------------------------------


@dataclass(frozen=True)
class ContrastiveSets:
    """Positive and negative sets for a batch of unlearning nodes.

    Row i of ``positive`` marks which ``neighbors`` are same-class one-hop
    neighbors of ``anchors[i]``; row i of ``negative`` marks which
    ``remain`` nodes carry a different class.
    """

    anchors: np.ndarray
    neighbors: np.ndarray
    remain: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    @property
    def empty_positive(self) -> np.ndarray:
        return ~self.positive.any(axis=1)

    @property
    def empty_negative(self) -> np.ndarray:
        return ~self.negative.any(axis=1)

    @property
    def active(self) -> np.ndarray:
        """Anchors that contribute to the loss (both sets nonempty)."""
        return ~(self.empty_positive | self.empty_negative)


def build_contrastive_sets(graph: Graph, labels: np.ndarray, batch_u, batch_r) -> ContrastiveSets:
    """Sets for ``batch_u`` against ``batch_r``.

    ``labels`` holds -1 for nodes whose label may not be used; such nodes
    are never positives. Negatives come from ``batch_r`` (remaining nodes,
    always labeled).
    """
    bu = np.asarray(batch_u, dtype=np.int64)
    br = np.asarray(batch_r, dtype=np.int64)
    labels = np.asarray(labels)
    nbr_lists = [graph.neighbors(v) for v in bu]
    neighbors = np.unique(np.concatenate(nbr_lists)) if nbr_lists else np.zeros(0, np.int64)
    positive = np.zeros((len(bu), len(neighbors)), dtype=bool)
    for i, (v, nb) in enumerate(zip(bu, nbr_lists)):
        same = nb[(labels[nb] == labels[v]) & (labels[nb] >= 0)]
        positive[i, np.searchsorted(neighbors, same)] = True
    negative = (labels[br][None, :] != labels[bu][:, None]) & (labels[br][None, :] >= 0)
    return ContrastiveSets(bu, neighbors, br, positive, negative)


@dataclass(frozen=True)
class ReconstructionAnchors:
    """For each node of ``layer``, its neighbors inside ``next_layer`` (mask rows)."""

    layer: np.ndarray
    next_layer: np.ndarray
    mask: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return ~self.mask.any(axis=1)


def build_reconstruction_anchors(graph: Graph, layer, next_layer, exclude=()) -> ReconstructionAnchors:
    layer = np.asarray(layer, dtype=np.int64)
    nxt = np.setdiff1d(np.asarray(next_layer, dtype=np.int64), np.asarray(exclude, dtype=np.int64))
    mask = np.zeros((len(layer), len(nxt)), dtype=bool)
    for i, v in enumerate(layer):
        nb = graph.neighbors(v)
        pos = np.searchsorted(nxt, nb)
        hit = pos < len(nxt)
        hit[hit] = nxt[pos[hit]] == nb[hit]
        mask[i, pos[hit]] = True
    return ReconstructionAnchors(layer, nxt, mask)


# --- losses -----------------------------------------------------------------


def _maybe_normalize(h: ad.Tensor, normalize: bool) -> ad.Tensor:
    return ad.l2_normalize_rows(h) if normalize else h


def unlearn_loss(h_u: ad.Tensor, h_nb: ad.Tensor, h_r: ad.Tensor, sets: ContrastiveSets,
                 tau: float = 0.5, temperature: str = "inside") -> ad.Tensor:
    """Sum over anchors of ``-mean_n s_in/tau + logsumexp_p s_ip/tau``.

    That is the negative mean log-ratio of each negative's exp-similarity
    to the summed exp-similarity of the positives. Anchors with no
    positive or no negative contribute nothing. Embeddings are used as
    given; normalize them beforehand if wanted.
    """
    scale = 1.0 / tau if temperature == "inside" else 1.0
    active = sets.active.astype(np.float64)
    neg = sets.negative.astype(np.float64)
    counts = neg.sum(axis=1)
    weights = neg * (active / np.where(counts > 0, counts, 1.0))[:, None]
    s_neg = ad.scale(ad.pairwise_dot(h_u, h_r), scale)
    s_pos = ad.scale(ad.pairwise_dot(h_u, h_nb), scale)
    pull = ad.sum(ad.mul(s_neg, weights))
    push = ad.sum(ad.mul(ad.masked_logsumexp_rows(s_pos, sets.positive), active))
    return push - pull


def reconstruction_loss(h_layer: ad.Tensor, h_next: ad.Tensor, anchors: ReconstructionAnchors,
                        tau: float = 0.5) -> ad.Tensor:
    """``-sum_i mean_{j in S(i)} h_i . h_j / tau``; empty S(i) contributes nothing."""
    mask = anchors.mask.astype(np.float64)
    counts = mask.sum(axis=1, keepdims=True)
    weights = mask / np.where(counts > 0, counts, 1.0)
    return ad.scale(ad.sum(ad.mul(ad.pairwise_dot(h_layer, h_next), weights)), -1.0 / tau)


# --- steps ------------------------------------------------------------------


def _encode_nodes(model: GnnModel, graph: Graph, nodes: np.ndarray):
    """Raw embeddings of ``nodes`` computed on their k-hop subgraph."""
    view = khop_view(graph, nodes, model.num_layers)
    return ad.gather_rows(model.encode(view), view.to_local(nodes))


def _encode_many(model: GnnModel, graph: Graph, groups: list[np.ndarray]) -> list[ad.Tensor]:
    """One forward on the union subgraph, split back into the requested groups."""
    union = np.unique(np.concatenate(groups))
    view = khop_view(graph, union, model.num_layers)
    h = model.encode(view)
    return [ad.gather_rows(h, view.to_local(g)) for g in groups]


def _step(model: GnnModel, loss: ad.Tensor, opt: ad.Adam) -> None:
    model.zero_grad()
    ad.backward(loss)
    opt.step()


def node_loss(model: GnnModel, graph: Graph, labels: np.ndarray, batch_u, batch_r,
              cfg: UnlearnConfig) -> tuple[ad.Tensor, dict]:
    """``L_U + beta * CE(batch_r)`` on the current parameters, plus its parts.

    ``labels`` must already have non-training labels masked to -1.
    """
    sets = build_contrastive_sets(graph, labels, batch_u, batch_r)
    h_u, h_nb, h_r = _encode_many(model, graph, [sets.anchors, sets.neighbors, sets.remain])
    z_u, z_nb, z_r = (_maybe_normalize(h, cfg.normalize) for h in (h_u, h_nb, h_r))
    l_u = unlearn_loss(z_u, z_nb, z_r, sets, cfg.tau, cfg.temperature)
    if cfg.reduction == "mean":
        l_u = ad.scale(l_u, 1.0 / max(int(sets.active.sum()), 1))
    l_c = ad.cross_entropy(model.head(h_r), labels[sets.remain])
    loss = l_u + ad.scale(l_c, cfg.beta)
    return loss, {"unlearn": l_u.item(), "ce": l_c.item(), "active": int(sets.active.sum())}


def node_representation_unlearn_step(model: GnnModel, graph: Graph, labels: np.ndarray,
                                     batch_u, batch_r, cfg: UnlearnConfig,
                                     opt: ad.Adam) -> dict[str, float]:
    """One update on :func:`node_loss`; returns the loss parts."""
    loss, parts = node_loss(model, graph, labels, batch_u, batch_r, cfg)
    _step(model, loss, opt)
    return {"loss": loss.item(), **parts}


def _labeled(nodes: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return nodes[labels[nodes] >= 0]


def neighborhood_reconstruction(model: GnnModel, graph: Graph, labels: np.ndarray, layers,
                                cfg: UnlearnConfig, opt: ad.Adam, exclude=(),
                                callback: Optional[Callable[[dict], None]] = None) -> int:
    """Deepest-first reconstruction over hop ``layers``; returns the number of updates.

    Each adjacent pair (l, l+1), starting from the deepest, takes one step
    on ``L_N(H_l, H_{l+1}) + gamma * CE(layer l+1)`` and then hands the
    freshly recomputed layer-l embeddings to the next shallower pair. The
    cross-entropy only uses labeled nodes of the deeper layer. When a
    single layer is available it only gets the cross-entropy anchoring
    step. Layers after the first empty one are ignored.
    """
    trimmed = []
    for layer in layers:
        layer = np.asarray(layer, dtype=np.int64)
        if not len(layer):
            break
        trimmed.append(layer)
    if not trimmed:
        return 0
    exclude = np.asarray(exclude, dtype=np.int64)

    if len(trimmed) == 1:
        target = _labeled(trimmed[0], labels)
        if not len(target) or cfg.gamma == 0:
            return 0
        loss = ad.scale(ad.cross_entropy(model.head(_encode_nodes(model, graph, target)), labels[target]),
                        cfg.gamma)
        _step(model, loss, opt)
        if callback:
            callback({"layer": 0, "next": None, "loss": loss.item()})
        return 1

    steps = 0

    def recurse(i: int, top: bool):
        # returns raw embeddings of trimmed[i] computed after all deeper updates
        nonlocal steps
        if i == len(trimmed) - 1:
            return _encode_nodes(model, graph, trimmed[i])
        h_next = recurse(i + 1, False)
        loss = neighbor_loss(model, graph, labels, trimmed[i], trimmed[i + 1], cfg, exclude, h_next)
        _step(model, loss, opt)
        steps += 1
        if callback:
            callback({"layer": i, "next": i + 1, "loss": loss.item()})
        return None if top else _encode_nodes(model, graph, trimmed[i])

    recurse(0, True)
    return steps


def neighbor_loss(model: GnnModel, graph: Graph, labels: np.ndarray, layer, next_layer,
                  cfg: UnlearnConfig, exclude=(), h_next: Optional[ad.Tensor] = None) -> ad.Tensor:
    """``L_N(layer, next_layer) + gamma * CE(labeled nodes of next_layer)``.

    ``h_next`` are raw embeddings of ``next_layer``; they are computed from
    the current parameters when not given.
    """
    layer = np.asarray(layer, dtype=np.int64)
    next_layer = np.asarray(next_layer, dtype=np.int64)
    if h_next is None:
        h_next = _encode_nodes(model, graph, next_layer)
    anchors = build_reconstruction_anchors(graph, layer, next_layer, exclude)
    h_cur = _encode_nodes(model, graph, layer)
    keep = np.flatnonzero(np.isin(next_layer, anchors.next_layer))
    loss = reconstruction_loss(_maybe_normalize(h_cur, cfg.normalize),
                               _maybe_normalize(ad.gather_rows(h_next, keep), cfg.normalize),
                               anchors, cfg.tau)
    if cfg.reduction == "mean":
        loss = ad.scale(loss, 1.0 / max(int((~anchors.empty).sum()), 1))
    target = np.flatnonzero(labels[next_layer] >= 0)
    if len(target) and cfg.gamma:
        logits = model.head(ad.gather_rows(h_next, target))
        loss = loss + ad.scale(ad.cross_entropy(logits, labels[next_layer[target]]), cfg.gamma)
    return loss


def termination_check(model: GnnModel, graph: Graph, unlearn_nodes, eval_nodes) -> bool:
    """True iff accuracy on the unlearning nodes is at most accuracy on eval nodes."""
    acc = accuracies(model, graph, {"u": unlearn_nodes, "eval": eval_nodes})
    return acc["u"] <= acc["eval"]


# --- driver -----------------------------------------------------------------


@dataclass
class UnlearnReport:
    rounds: int = 0
    condition_met: bool = False
    reason: str = ""
    history: list[dict] = field(default_factory=list)
    node_steps: int = 0
    reconstruction_steps: int = 0
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self, include_time: bool = True) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d

    def to_json(self, include_time: bool = True) -> str:
        return json.dumps(self.to_dict(include_time), indent=2, sort_keys=True) + "\n"


def make_optimizer(model: GnnModel, cfg: UnlearnConfig):
    if cfg.optimizer == "sgd":
        return ad.Sgd(model.params, lr=cfg.lr)
    return ad.Adam(model.params, lr=cfg.lr)


def _batches(nodes: np.ndarray, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(nodes)
    return [np.sort(perm[i:i + size]) for i in range(0, len(perm), size)]


class _RemainSampler:
    """Cycles through shuffled remaining-node batches; reshuffled every round."""

    def __init__(self, nodes: np.ndarray, size: int, rng: np.random.Generator):
        self.nodes, self.size, self.rng = nodes, size, rng
        self.queue: list[np.ndarray] = []

    def new_round(self) -> None:
        self.queue = _batches(self.nodes, self.size, self.rng)

    def draw(self) -> np.ndarray:
        if not self.queue:
            self.new_round()
        return self.queue.pop(0)


def run_node_cul(model: GnnModel, graph: Graph, partition: NodePartition, cfg: UnlearnConfig,
                 callback: Optional[Callable[[dict], None]] = None) -> tuple[GnnModel, UnlearnReport]:
    """Unlearn ``partition.unlearn_nodes`` from a copy of ``model``.

    At least one full pass over the unlearning batches always runs; the
    termination condition is tested after every pass. Round 0 of the
    history records the starting accuracies. Only training labels enter
    any loss; test labels are read only for the evaluation-set accuracy.
    """
    start = time.perf_counter()
    model = model.copy()
    report = UnlearnReport(config=asdict(cfg))
    v_u, v_r, v_eval = partition.unlearn_nodes, partition.remain_nodes, partition.eval_nodes
    if not len(v_u):
        report.condition_met, report.reason = True, "empty unlearn set"
        report.wall_time = time.perf_counter() - start
        return model, report
    if not len(v_eval):
        raise ContractError("the termination condition needs evaluation nodes")
    if not len(v_r):
        raise ContractError("no remaining nodes to contrast against")
    k = cfg.k or model.num_layers
    labels = partition.known_labels(graph.labels)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model, cfg)
    remain = _RemainSampler(v_r, cfg.batch_size_r, rng)

    def record(rnd: int) -> bool:
        acc = accuracies(model, graph, {"u": v_u, "eval": v_eval})
        met = acc["u"] <= acc["eval"]
        report.history.append({"round": rnd, "acc_unlearn": acc["u"], "acc_eval": acc["eval"],
                               "condition_met": met})
        log.info("round %d: acc(V_u)=%.4f acc(V_eval)=%.4f", rnd, acc["u"], acc["eval"])
        return met

    record(0)
    met = False
    while not met and report.rounds < cfg.max_rounds:
        report.rounds += 1
        remain.new_round()
        for batch_u in _batches(v_u, cfg.batch_size_u, rng):
            for _ in range(cfg.omega):
                parts = node_representation_unlearn_step(model, graph, labels, batch_u, remain.draw(), cfg, opt)
                report.node_steps += 1
                if callback:
                    callback({"kind": "node", "round": report.rounds, **parts})
            if not cfg.reconstruction:
                continue
            layers = k_hop_layers(graph, batch_u, k, exclude=v_u).layers
            for _ in range(cfg.reconstruction_passes):
                report.reconstruction_steps += neighborhood_reconstruction(
                    model, graph, labels, layers, cfg, opt, exclude=v_u,
                    callback=(lambda ev: callback({"kind": "reconstruct", "round": report.rounds, **ev}))
                    if callback else None,
                )
        met = record(report.rounds)
    report.condition_met = met
    report.reason = "condition met" if met else "max rounds"
    report.wall_time = time.perf_counter() - start
    return model, report
