"""End-to-end runs: train, unlearn, retrain, evaluate, attack, summarize.

Every artifact is written atomically under the run directory:

``original.ckpt``, ``train_log.csv``   trained model and its log
``unlearned.ckpt``, ``unlearn_report.json``
``retrain.ckpt``                        reference model without V_u
``metrics_<model>.json``                accuracies and unlearn score
``mia_<model>.json``, ``mia_<model>_roc.csv``
``summary.csv``                         one row per (ratio, method)
"""

from __future__ import annotations

import io
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attack
from ._io import atomic_write_bytes, atomic_write_json, atomic_write_text
from .config import ExperimentConfig
from .datasets import load_dataset, load_planetoid_files
from .errors import DataError
from .gnn import GnnModel, ModelSpec, load_checkpoint, save_checkpoint
from .graph import Graph, NodePartition, split_nodes
from .trainer import accuracies, retrain_reference, train
from .unlearn import run_node_cul

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("ratio", "method", "test_acc", "unlearn_acc", "unlearn_score", "auc",
                   "tpr_at_fpr_0.05", "rounds", "runtime_s")
TIMING_COLUMNS = ("runtime_s",)


def load_graph(cfg: ExperimentConfig) -> Graph:
    d = cfg.data
    if d.dataset is not None:
        return load_dataset(d.dataset)
    return load_planetoid_files(d.content, d.cites)


def model_spec(cfg: ExperimentConfig, graph: Graph) -> ModelSpec:
    m = cfg.model
    return ModelSpec(arch=m.arch, in_dim=graph.feature_dim, num_classes=graph.num_classes,
                     hidden_dim=m.hidden_dim, embedding_dim=m.embedding_dim,
                     num_layers=m.num_layers, dropout=m.dropout, gin_eps=m.gin_eps)


def partition_for(cfg: ExperimentConfig, graph: Graph) -> NodePartition:
    d = cfg.data
    return split_nodes(graph, cfg.seed, d.test_fraction, d.unlearn_fraction, d.eval_fraction)


def save_partition(p: NodePartition, path) -> None:
    buf = io.BytesIO()
    np.savez(buf, train=p.train_nodes, test=p.test_nodes, unlearn=p.unlearn_nodes,
             remain=p.remain_nodes, eval=p.eval_nodes)
    atomic_write_bytes(path, buf.getvalue())


def model_metrics(model: GnnModel, graph: Graph, p: NodePartition) -> dict:
    sets = {"test": p.test_nodes, "eval": p.eval_nodes}
    if len(p.unlearn_nodes):
        sets["unlearn"] = p.unlearn_nodes
    acc = accuracies(model, graph, sets)
    out = {"test_acc": acc["test"], "eval_acc": acc["eval"]}
    if "unlearn" in acc:
        out["unlearn_acc"] = acc["unlearn"]
        out["unlearn_score"] = 100.0 * abs(acc["test"] - acc["unlearn"])
    return out


def require_checkpoint(path: Path) -> GnnModel:
    if not path.is_file():
        raise DataError(f"missing checkpoint {path}; run the producing command first")
    return load_checkpoint(path)


# --- single stages ----------------------------------------------------------


def stage_train(cfg, graph, p, out: Path):
    t0 = time.perf_counter()
    model, train_log = train(graph, p, model_spec(cfg, graph), cfg.train)
    runtime = time.perf_counter() - t0
    save_checkpoint(model, out / "original.ckpt")
    atomic_write_text(out / "train_log.csv", train_log.to_csv())
    atomic_write_json(out / "metrics_original.json", model_metrics(model, graph, p))
    return model, runtime


def stage_retrain(cfg, graph, p, out: Path):
    t0 = time.perf_counter()
    model, _ = retrain_reference(graph, p, model_spec(cfg, graph), cfg.train,
                                 retain_structure=cfg.retain_structure)
    runtime = time.perf_counter() - t0
    save_checkpoint(model, out / "retrain.ckpt")
    atomic_write_json(out / "metrics_retrain.json", model_metrics(model, graph, p))
    return model, runtime


def unlearned_name(cfg: ExperimentConfig) -> str:
    return "unlearned" if cfg.unlearn.reconstruction else "unlearned_norecon"


def stage_unlearn(cfg, graph, p, original: GnnModel, out: Path):
    model, report = run_node_cul(original, graph, p, cfg.unlearn)
    name = unlearned_name(cfg)
    save_checkpoint(model, out / f"{name}.ckpt")
    atomic_write_text(out / f"{name}_report.json", report.to_json())
    atomic_write_json(out / f"metrics_{name}.json", model_metrics(model, graph, p))
    return model, report


def stage_mia(cfg, graph, p, targets: dict[str, GnnModel], out: Path, jobs: int = 1):
    nodes, is_member = attack.select_candidates(p, cfg.seed)
    ens = attack.train_shadows(graph, p, nodes, cfg.attack.n_shadow, model_spec(cfg, graph), cfg.train,
                               seed=cfg.seed, jobs=jobs)
    buf = io.BytesIO()
    np.savez(buf, candidates=ens.candidates, in_mask=ens.in_mask, phi=ens.phi, is_member=is_member)
    atomic_write_bytes(out / "shadows.npz", buf.getvalue())
    results = {}
    for name, model in targets.items():
        res = attack.mia_auc(attack.target_scores(model, ens, graph), is_member)
        res.write(out, f"mia_{name}")
        results[name] = res
    return results


# --- full experiment --------------------------------------------------------


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def summary_csv(rows: list[dict], include_timing: bool = True) -> str:
    cols = [c for c in SUMMARY_COLUMNS if include_timing or c not in TIMING_COLUMNS]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in cols))
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, ratios=None, jobs: int = 1, graph: Graph | None = None) -> list[dict]:
    """Train once, then for each unlearning ratio unlearn, retrain, attack and summarize.

    The training split does not depend on the ratio (see ``split_nodes``),
    so one original model serves every ratio.
    """
    graph = graph if graph is not None else load_graph(cfg)
    ratios = list(ratios or cfg.ratios or [cfg.data.unlearn_fraction])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "config.json", _config_echo(cfg, ratios))
    base_p = partition_for(cfg.with_ratio(ratios[0]), graph)
    original, train_time = stage_train(cfg, graph, base_p, out)
    rows = []
    for ratio in ratios:
        rcfg = cfg.with_ratio(ratio)
        rdir = out / f"ratio_{ratio:.2f}"
        rdir.mkdir(parents=True, exist_ok=True)
        p = partition_for(rcfg, graph)
        save_partition(p, rdir / "partition.npz")
        unlearned, report = stage_unlearn(rcfg, graph, p, original, rdir)
        retrained, retrain_time = stage_retrain(rcfg, graph, p, rdir)
        method = "node-cul" if cfg.unlearn.reconstruction else "node-cul-no-reconstruction"
        models = {"original": (original, None, train_time),
                  method: (unlearned, report.rounds, report.wall_time),
                  "retrain": (retrained, None, retrain_time)}
        mia = {}
        if cfg.attack.enabled and cfg.attack.n_shadow >= 2:
            names = {"original": "original", method: unlearned_name(cfg), "retrain": "retrain"}
            mia = stage_mia(rcfg, graph, p, {names[k]: v[0] for k, v in models.items()}, rdir, jobs)
            mia = {k: mia[names[k]] for k in models}
        atomic_write_json(rdir / "metrics_original.json", model_metrics(original, graph, p))
        for name, (model, rounds, runtime) in models.items():
            m = model_metrics(model, graph, p)
            res = mia.get(name)
            rows.append({
                "ratio": f"{ratio:.2f}", "method": name,
                "test_acc": m["test_acc"], "unlearn_acc": m["unlearn_acc"],
                "unlearn_score": m["unlearn_score"],
                "auc": res.auc if res else None,
                "tpr_at_fpr_0.05": res.tpr_at[0.05] if res else None,
                "rounds": rounds if rounds is not None else "",
                "runtime_s": runtime,
            })
        log.info("ratio %.2f done", ratio)
    atomic_write_text(out / "summary.csv", summary_csv(rows))
    atomic_write_text(out / "summary_metrics.csv", summary_csv(rows, include_timing=False))
    return rows


def _config_echo(cfg: ExperimentConfig, ratios) -> dict:
    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
        if isinstance(obj, Path):
            return str(obj)
        if isinstance(obj, tuple):
            return list(obj)
        return obj
    d = plain(replace(cfg, out=Path(".")))
    d.pop("out", None)
    d["ratios"] = list(ratios)
    return json.loads(json.dumps(d))
