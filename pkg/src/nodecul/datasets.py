"""Planetoid-style dataset ingestion and the canonical on-disk dataset format.

Raw format (LINQS):

* ``<name>.content``: ``<node_id> <f_0> ... <f_{d-1}> <label>`` per line
* ``<name>.cites``: ``<cited_id> <citing_id>`` per line

A canonical dataset directory holds ``graph.npz`` plus ``manifest.txt``
(key=value lines).
"""

from __future__ import annotations

import gzip
import hashlib
import io
import logging
import os
import pickle
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from ._io import atomic_write_bytes
from .errors import DataError, DimensionError, EmptyInputError, ParseError
from .graph import Graph

log = logging.getLogger(__name__)

ByteSource = Union[bytes, BinaryIO]

MANIFEST_NAME = "manifest.txt"
GRAPH_NAME = "graph.npz"


def _read_bytes(src: ByteSource) -> bytes:
    data = src if isinstance(src, (bytes, bytearray)) else src.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return bytes(data)


def open_maybe_gz(path: str | os.PathLike) -> bytes:
    with open(path, "rb") as fh:
        return _read_bytes(fh)


def load_planetoid(content_source: ByteSource, cites_source: ByteSource) -> Graph:
    """Parse LINQS ``.content``/``.cites`` streams into a :class:`Graph`.

    Node ids map to ``[0, n)`` in content order, labels to class indices in
    order of first appearance. Citations naming unknown ids are dropped and
    counted in ``graph.meta["unknown_edges_dropped"]``. Gzip input is
    accepted transparently.
    """
    content = _read_bytes(content_source).decode("utf-8")
    cites = _read_bytes(cites_source).decode("utf-8")

    names: list[str] = []
    index: dict[str, int] = {}
    rows: list[np.ndarray] = []
    label_names: list[str] = []
    label_index: dict[str, int] = {}
    labels: list[int] = []
    dim = None
    for lineno, line in enumerate(content.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise ParseError("expected '<id> <features...> <label>'", lineno, "content")
        node, feats, label = parts[0], parts[1:-1], parts[-1]
        if node in index:
            raise ParseError(f"duplicate node id {node!r}", lineno, "content")
        try:
            row = np.array(feats, dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"bad feature value ({exc})", lineno, "content") from None
        if dim is None:
            dim = len(row)
        elif len(row) != dim:
            raise DimensionError(
                f"content line {lineno}: expected {dim} features, found {len(row)}"
            )
        index[node] = len(names)
        names.append(node)
        rows.append(row)
        if label not in label_index:
            label_index[label] = len(label_names)
            label_names.append(label)
        labels.append(label_index[label])
    if not names:
        raise EmptyInputError("content stream has no nodes")

    src, dst, unknown = [], [], 0
    for lineno, line in enumerate(cites.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise ParseError("expected '<cited_id> <citing_id>'", lineno, "cites")
        a, b = index.get(parts[0]), index.get(parts[1])
        if a is None or b is None:
            unknown += 1
            continue
        src.append(a)
        dst.append(b)
    if unknown:
        log.warning("dropped %d citation(s) referring to unknown node ids", unknown)

    features = np.vstack(rows) if dim else np.zeros((len(names), 0))
    return Graph.from_edges(
        len(names),
        np.array(src, dtype=np.int64),
        np.array(dst, dtype=np.int64),
        features,
        np.array(labels, dtype=np.int64),
        len(label_names),
        node_names=tuple(names),
        class_names=tuple(label_names),
        meta={"unknown_edges_dropped": unknown},
    )


def load_planetoid_files(content_path, cites_path) -> Graph:
    return load_planetoid(open_maybe_gz(content_path), open_maybe_gz(cites_path))


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() and abs(x) < 2**53 else repr(float(x))


def to_planetoid(graph: Graph) -> tuple[bytes, bytes]:
    """Serialize to raw content/cites bytes; ``load_planetoid`` inverts this."""
    names = graph.node_names or tuple(str(i) for i in range(graph.num_nodes))
    classes = graph.class_names or tuple(f"class_{c}" for c in range(graph.num_classes))
    out = io.StringIO()
    for i in range(graph.num_nodes):
        feats = " ".join(map(_fmt, graph.features[i]))
        out.write(f"{names[i]} {feats} {classes[graph.labels[i]]}\n")
    cites = io.StringIO()
    src, dst = graph.edge_list()
    for a, b in zip(src[src < dst], dst[src < dst]):
        cites.write(f"{names[a]} {names[b]}\n")
    return out.getvalue().encode(), cites.getvalue().encode()


def planetoid_ind_to_raw(directory: str | os.PathLike, name: str) -> tuple[bytes, bytes]:
    """Convert the pickled Planetoid ``ind.<name>.*`` split files to raw format.

    Follows the usual reconstruction: ``allx``/``tx`` stacked, test rows
    reordered by ``test.index``, and test indices missing from the file
    (Citeseer's isolated nodes) filled with zero features and class 0.
    The pickles are only loaded from trusted, vendored files.
    """
    d = Path(directory)

    def obj(suffix):
        with open(d / f"ind.{name}.{suffix}", "rb") as fh:
            return pickle.load(fh, encoding="latin1")

    x_all, tx, y_all, ty, adj = obj("allx"), obj("tx"), obj("ally"), obj("ty"), obj("graph")
    test_idx = [int(line) for line in (d / f"ind.{name}.test.index").read_text().split()]
    test_sorted = np.sort(test_idx)
    tx = np.asarray(tx.todense())
    if name == "citeseer":
        full = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_ext = np.zeros((len(full), tx.shape[1]))
        tx_ext[test_sorted - test_sorted.min()] = tx
        ty_ext = np.zeros((len(full), ty.shape[1]))
        ty_ext[test_sorted - test_sorted.min()] = ty
        tx, ty = tx_ext, ty_ext
    feats = np.vstack([np.asarray(x_all.todense()), tx])
    onehot = np.vstack([y_all, ty])
    feats[test_idx] = feats[test_sorted]
    onehot[test_idx] = onehot[test_sorted]
    labels = onehot.argmax(axis=1)
    n = feats.shape[0]

    content = io.StringIO()
    for i in range(n):
        content.write(f"{i} {' '.join(map(_fmt, feats[i]))} class_{labels[i]}\n")
    cites = io.StringIO()
    for u in sorted(adj):
        for v in adj[u]:
            if u < n and v < n:
                cites.write(f"{v} {u}\n")
    return content.getvalue().encode(), cites.getvalue().encode()


def edge_checksum(graph: Graph) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(graph.csr_offsets, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(graph.csr_targets, dtype="<i8").tobytes())
    return h.hexdigest()


def manifest(graph: Graph, name: str = "") -> dict[str, str]:
    m = {
        "name": name,
        "num_nodes": str(graph.num_nodes),
        "feature_dim": str(graph.feature_dim),
        "num_classes": str(graph.num_classes),
        "class_names": ",".join(graph.class_names),
        "num_edge_entries": str(graph.num_edge_entries),
        "edge_checksum": edge_checksum(graph),
    }
    for key in ("self_loops_removed", "duplicate_edges_removed", "unknown_edges_dropped"):
        if key in graph.meta:
            m[key] = str(graph.meta[key])
    return m


def save_dataset(graph: Graph, out_dir: str | os.PathLike, name: str = "") -> dict[str, str]:
    """Write ``graph.npz`` and ``manifest.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(
        buf,
        csr_offsets=graph.csr_offsets,
        csr_targets=graph.csr_targets,
        features=graph.features,
        labels=graph.labels,
        num_classes=np.array(graph.num_classes),
        node_names=np.array(graph.node_names, dtype=str),
        class_names=np.array(graph.class_names, dtype=str),
    )
    atomic_write_bytes(out / GRAPH_NAME, buf.getvalue())
    m = manifest(graph, name)
    text = "".join(f"{k}={v}\n" for k, v in m.items())
    atomic_write_bytes(out / MANIFEST_NAME, text.encode())
    return m


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def load_dataset(directory: str | os.PathLike) -> Graph:
    d = Path(directory)
    try:
        with np.load(d / GRAPH_NAME, allow_pickle=False) as z:
            graph = Graph(
                num_nodes=len(z["labels"]),
                csr_offsets=z["csr_offsets"],
                csr_targets=z["csr_targets"],
                features=z["features"],
                labels=z["labels"],
                num_classes=int(z["num_classes"]),
                node_names=tuple(z["node_names"].tolist()),
                class_names=tuple(z["class_names"].tolist()),
            )
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read dataset in {d}: {exc}") from exc
    m = read_manifest(d / MANIFEST_NAME)
    if m.get("edge_checksum") and m["edge_checksum"] != edge_checksum(graph):
        raise DataError(f"edge checksum mismatch for dataset in {d}")
    return graph
