"""Full-batch transductive training, the retrain-from-scratch baseline, accuracy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .gnn import GnnModel, ModelSpec
from .graph import Graph, NodePartition, induced_subgraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr: float = 0.01
    weight_decay: float = 5e-4
    patience: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_eval_acc: float = 0.0

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,eval_acc"]
        lines += [f"{e},{loss:.10g},{acc:.10g}" for e, loss, acc in self.rows]
        return "\n".join(lines) + "\n"


def accuracy(model: GnnModel, graph: Graph, nodes) -> float:
    """Fraction of ``nodes`` whose argmax prediction matches the label."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if not len(nodes):
        raise ContractError("accuracy over an empty node set")
    pred = model.predict_labels(graph)
    return float(np.mean(pred[nodes] == graph.labels[nodes]))


def accuracies(model: GnnModel, graph: Graph, node_sets: dict) -> dict[str, float]:
    """Accuracy of several node sets from a single forward pass."""
    pred = model.predict_labels(graph)
    out = {}
    for key, nodes in node_sets.items():
        nodes = np.asarray(nodes, dtype=np.int64)
        if not len(nodes):
            raise ContractError(f"accuracy over an empty node set ({key})")
        out[key] = float(np.mean(pred[nodes] == graph.labels[nodes]))
    return out


def _eval(model: GnnModel, graph: Graph, nodes: np.ndarray) -> tuple[float, float]:
    with ad.no_grad():
        logits = model.forward(graph)
        loss = ad.cross_entropy(ad.gather_rows(logits, nodes), graph.labels[nodes]).item()
    acc = float(np.mean(np.argmax(logits.values[nodes], axis=1) == graph.labels[nodes]))
    return acc, loss


def fit(graph: Graph, supervised, eval_nodes, spec: ModelSpec, cfg: TrainConfig) -> tuple[GnnModel, TrainLog]:
    """Train on ``supervised`` labels; keep the parameters with the best eval accuracy.

    Ties on accuracy go to the lower eval loss. The forward pass always sees
    the whole graph.
    """
    supervised = np.asarray(supervised, dtype=np.int64)
    eval_nodes = np.asarray(eval_nodes, dtype=np.int64)
    if not len(supervised):
        raise ContractError("no supervised nodes to train on")
    model = GnnModel(spec, seed=cfg.seed)
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    opt = ad.Adam(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    labels = graph.labels[supervised]
    view = graph.full_view
    train_log = TrainLog()
    has_eval = len(eval_nodes) > 0
    best_acc, best_loss = _eval(model, graph, eval_nodes) if has_eval else (0.0, np.inf)
    best_state = model.state()
    train_log.best_eval_acc = best_acc
    wait = 0
    for epoch in range(1, cfg.epochs + 1):
        model.zero_grad()
        try:
            logits = model.forward(view, training=True, rng=dropout_rng)
            loss = ad.cross_entropy(ad.gather_rows(logits, supervised), labels)
            ad.backward(loss)
            opt.step()
            if has_eval:
                acc, eval_loss = _eval(model, graph, eval_nodes)
        except NumericError as exc:
            raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
        if not has_eval:
            train_log.rows.append((epoch, loss.item(), float("nan")))
            best_state, train_log.best_epoch = model.state(), epoch
            continue
        train_log.rows.append((epoch, loss.item(), acc))
        if acc > best_acc or (acc == best_acc and eval_loss < best_loss):
            best_acc, best_loss, wait = acc, eval_loss, 0
            best_state = model.state()
            train_log.best_epoch, train_log.best_eval_acc = epoch, acc
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    model.load_state(best_state)
    log.debug("trained %s: best epoch %d, eval acc %.4f", spec.arch, train_log.best_epoch, best_acc)
    return model, train_log


def train(graph: Graph, partition: NodePartition, spec: ModelSpec, cfg: TrainConfig):
    """The original model: supervised on all training nodes."""
    return fit(graph, partition.train_nodes, partition.eval_nodes, spec, cfg)


def retrain_reference(graph: Graph, partition: NodePartition, spec: ModelSpec, cfg: TrainConfig,
                      retain_structure: bool = False):
    """Train from scratch without the unlearning nodes.

    By default the unlearning nodes and their edges are deleted from the
    training graph. With ``retain_structure`` they stay in the graph and
    only lose their supervision.
    """
    if retain_structure or not len(partition.unlearn_nodes):
        return fit(graph, partition.remain_nodes, partition.eval_nodes, spec, cfg)
    keep = np.setdiff1d(np.arange(graph.num_nodes), partition.unlearn_nodes)
    view = induced_subgraph(graph, keep)
    reduced = view.to_graph()
    return fit(reduced, view.to_local(partition.remain_nodes), view.to_local(partition.eval_nodes), spec, cfg)
