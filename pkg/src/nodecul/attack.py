"""Offline likelihood-ratio membership inference against node classifiers.

Shadow models are trained on the full graph with supervision on the
remaining training nodes plus a random half of the candidate nodes. For
each candidate, the logit-scaled confidence of the shadows that did *not*
train on it defines a Gaussian; the target model's confidence is scored by
its CDF under that Gaussian, so larger scores look more like members.
"""

from __future__ import annotations

import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, ndtr
from scipy.stats import rankdata

from ._io import atomic_write_bytes, atomic_write_text
from .errors import ContractError, InsufficientShadowsError
from .gnn import GnnModel, ModelSpec, save_checkpoint
from .graph import Graph, NodePartition
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)

PHI_CLAMP = 30.0
VAR_FLOOR = 1e-4
MIN_OUT_FOR_OWN_VARIANCE = 4
FPR_TARGETS = (0.01, 0.05, 0.1)


def confidence_transform(logits, label) -> float:
    """log(p_y / (1 - p_y)) under softmax, clamped to +-30."""
    z = np.asarray(logits, dtype=np.float64)
    return float(confidence_transform_rows(z[None, :], np.array([label]))[0])


def confidence_transform_rows(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise ``z_y - logsumexp_{c != y} z_c``, the stable form of the logit ratio."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(z))
    others = z.copy()
    others[rows, labels] = -np.inf
    phi = z[rows, labels] - logsumexp(others, axis=1)
    return np.clip(phi, -PHI_CLAMP, PHI_CLAMP)


def select_candidates(partition: NodePartition, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced attack set: unlearning nodes as members, as many test nodes as non-members.

    If there are more unlearning nodes than test nodes, the members are
    subsampled to keep the classes balanced. Returns (nodes, is_member).
    """
    rng = np.random.default_rng([seed, 7])
    members = partition.unlearn_nodes
    n = min(len(members), len(partition.test_nodes))
    if n == 0:
        raise ContractError("need unlearning nodes and test nodes to build an attack set")
    if n < len(members):
        members = np.sort(rng.choice(members, size=n, replace=False))
    non_members = np.sort(rng.choice(partition.test_nodes, size=n, replace=False))
    nodes = np.concatenate([members, non_members])
    is_member = np.concatenate([np.ones(n, dtype=bool), np.zeros(n, dtype=bool)])
    return nodes, is_member


@dataclass
class ShadowEnsemble:
    """Shadow models with their exact membership over ``candidates``.

    ``in_mask[s, i]`` tells whether shadow ``s`` was supervised on
    ``candidates[i]``; ``phi[s, i]`` is that shadow's confidence on it.
    """

    candidates: np.ndarray
    in_mask: np.ndarray
    phi: np.ndarray
    models: list[GnnModel] = field(default_factory=list)

    @property
    def n_shadow(self) -> int:
        return len(self.in_mask)

    def members(self, s: int) -> np.ndarray:
        return self.candidates[self.in_mask[s]]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        np.savez(buf, candidates=self.candidates, in_mask=self.in_mask, phi=self.phi)
        atomic_write_bytes(d / "shadows.npz", buf.getvalue())
        for s, m in enumerate(self.models):
            save_checkpoint(m, d / f"shadow_{s:03d}.ckpt")


def _shadow_seed(seed: int, s: int) -> int:
    return int(np.random.SeedSequence([seed, s]).generate_state(1)[0])


_worker_graph: Graph | None = None


def _init_worker(graph: Graph) -> None:
    global _worker_graph
    _worker_graph = graph


def _train_shadow(args):
    graph = _worker_graph
    supervised, eval_nodes, spec, cfg, candidates = args
    model, _ = fit(graph, supervised, eval_nodes, spec, cfg)
    phi = confidence_transform_rows(model.logits(graph)[candidates], graph.labels[candidates])
    return model.state(), phi


def train_shadows(graph: Graph, partition: NodePartition, candidates, n_shadow: int, spec: ModelSpec,
                  train_cfg: TrainConfig, seed: int = 0, jobs: int = 1,
                  keep_models: bool = False) -> ShadowEnsemble:
    """Train ``n_shadow`` shadows, each on the remaining nodes plus a random half of ``candidates``.

    Membership is balanced per candidate: every candidate is IN for
    exactly ``n_shadow // 2`` shadows, so each one has OUT shadows and
    each shadow holds about half the candidates. Early stopping for a shadow uses the test nodes it was not trained on.
    Results do not depend on ``jobs``.
    """
    if n_shadow < 2:
        raise ContractError("need at least two shadow models")
    candidates = np.asarray(candidates, dtype=np.int64)
    rng = np.random.default_rng([seed, 11])
    # each candidate is IN for exactly half of the shadows (random which half)
    order = rng.random((n_shadow, len(candidates))).argsort(axis=0)
    in_mask = order < n_shadow // 2
    tasks = []
    for s in range(n_shadow):
        inside = candidates[in_mask[s]]
        supervised = np.union1d(partition.remain_nodes, inside)
        eval_nodes = np.setdiff1d(partition.test_nodes, inside)
        cfg = TrainConfig(epochs=train_cfg.epochs, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
                          patience=train_cfg.patience, seed=_shadow_seed(seed, s))
        tasks.append((supervised, eval_nodes, spec, cfg, candidates))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(graph,)) as pool:
            results = list(pool.map(_train_shadow, tasks))
    else:
        _init_worker(graph)
        results = [_train_shadow(t) for t in tasks]
    phi = np.vstack([r[1] for r in results])
    models = []
    if keep_models:
        for state, _ in results:
            m = GnnModel(spec)
            m.load_state(state)
            models.append(m)
    return ShadowEnsemble(candidates=candidates, in_mask=in_mask, phi=phi, models=models)


def _pooled_variance(phi: np.ndarray, out: np.ndarray) -> float:
    dev, dof = 0.0, 0
    for i in range(phi.shape[1]):
        vals = phi[out[:, i], i]
        if len(vals) >= 2:
            dev += float(((vals - vals.mean()) ** 2).sum())
            dof += len(vals) - 1
    return max(dev / dof, VAR_FLOOR) if dof else VAR_FLOOR


def lira_scores(target_phi, shadow_phi, in_mask) -> np.ndarray:
    """Offline LiRA score per candidate column.

    Gaussian fit to the OUT shadows' confidences (variance floored at
    1e-4; pooled across nodes when fewer than 4 OUT shadows exist), then
    the normal CDF of the target's confidence.
    """
    target_phi = np.asarray(target_phi, dtype=np.float64)
    shadow_phi = np.asarray(shadow_phi, dtype=np.float64)
    out = ~np.asarray(in_mask, dtype=bool)
    n_out = out.sum(axis=0)
    if (n_out == 0).any():
        bad = np.flatnonzero(n_out == 0)[:5].tolist()
        raise InsufficientShadowsError(f"candidates {bad} are never OUT in any shadow")
    pooled = None
    scores = np.empty(len(target_phi))
    for i in range(len(target_phi)):
        vals = shadow_phi[out[:, i], i]
        mu = vals.mean()
        if len(vals) >= MIN_OUT_FOR_OWN_VARIANCE:
            var = max(float(vals.var()), VAR_FLOOR)
        else:
            if pooled is None:
                pooled = _pooled_variance(shadow_phi, out)
            var = pooled
        scores[i] = ndtr((target_phi[i] - mu) / np.sqrt(var))
    return scores


def lira_score(target: GnnModel, ensemble: ShadowEnsemble, graph: Graph, node: int) -> float:
    """Score for one candidate node under ``target``."""
    hits = np.flatnonzero(ensemble.candidates == node)
    if not len(hits):
        raise ContractError(f"node {node} is not an attack candidate")
    i = hits[0]
    phi = confidence_transform(target.logits(graph)[node], graph.labels[node])
    return float(lira_scores([phi], ensemble.phi[:, [i]], ensemble.in_mask[:, [i]])[0])


def target_scores(target: GnnModel, ensemble: ShadowEnsemble, graph: Graph) -> np.ndarray:
    c = ensemble.candidates
    phi = confidence_transform_rows(target.logits(graph)[c], graph.labels[c])
    return lira_scores(phi, ensemble.phi, ensemble.in_mask)


# --- ROC / AUC --------------------------------------------------------------


@dataclass
class MiaResult:
    scores: np.ndarray
    labels: np.ndarray
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    tpr_at: dict

    def summary(self) -> dict:
        return {
            "auc": self.auc,
            "n_members": int(self.labels.sum()),
            "n_non_members": int((~self.labels).sum()),
            "tpr_at_fpr": {f"{k:g}": v for k, v in self.tpr_at.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def roc_csv(self) -> str:
        lines = ["fpr,tpr,threshold"]
        lines += [f"{f:.10g},{t:.10g},{th:.10g}" for f, t, th in zip(self.fpr, self.tpr, self.thresholds)]
        return "\n".join(lines) + "\n"

    def write(self, directory, prefix: str = "mia") -> None:
        d = Path(directory)
        atomic_write_text(d / f"{prefix}.json", self.to_json())
        atomic_write_text(d / f"{prefix}_roc.csv", self.roc_csv())


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points at every distinct threshold, from (0, 0) to (1, 1).

    A sample is predicted member when its score is >= the threshold. The
    first point uses threshold +inf.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def mia_auc(scores, labels) -> MiaResult:
    """AUC as the normalized Mann-Whitney statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be 1-d arrays of equal length")
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("membership labels must contain both classes")
    ranks = rankdata(scores)
    auc = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    fpr, tpr, thr = roc_curve(scores, labels)
    tpr_at = {t: float(tpr[fpr <= t + 1e-12].max()) for t in FPR_TARGETS}
    return MiaResult(scores, labels, float(auc), fpr, tpr, thr, tpr_at)


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)
