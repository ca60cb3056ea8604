"""GCN and GIN node classifiers: embedding stack f_E plus a linear head f_H."""

from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from ._io import atomic_write_bytes
from .autodiff import SparseMatrix, Tensor
from .errors import ConfigError, DataError, ShapeError
from .graph import Graph, GraphView

ARCHS = ("gcn", "gin")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    in_dim: int
    num_classes: int
    hidden_dim: int = 64
    embedding_dim: int = 64
    num_layers: int = 2
    dropout: float = 0.5
    gin_eps: float = 0.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if not 1 <= self.num_layers <= 3:
            raise ConfigError("num_layers must be between 1 and 3")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.embedding_dim]
        return list(zip(dims[:-1], dims[1:]))


def _as_view(g: Union[Graph, GraphView]) -> GraphView:
    return g.full_view if isinstance(g, Graph) else g


def normalized_adjacency(view: Union[Graph, GraphView]) -> SparseMatrix:
    """D^-1/2 (A + I) D^-1/2 with degrees taken from the root graph."""
    view = _as_view(view)
    cached = view.cache.get("gcn_adj")
    if cached is None:
        n = view.num_nodes
        rows, cols = view.edge_list()
        inv_sqrt = 1.0 / np.sqrt(view.parent_degree + 1.0)
        data = np.concatenate([inv_sqrt[rows] * inv_sqrt[cols], inv_sqrt ** 2])
        r = np.concatenate([rows, np.arange(n)])
        c = np.concatenate([cols, np.arange(n)])
        cached = SparseMatrix.from_scipy(sp.csr_matrix((data, (r, c)), shape=(n, n)))
        view.cache["gcn_adj"] = cached
    return cached


def gin_adjacency(view: Union[Graph, GraphView], eps: float = 0.0) -> SparseMatrix:
    """A + (1 + eps) I, so that one product gives the GIN sum aggregation."""
    view = _as_view(view)
    key = ("gin_adj", float(eps))
    cached = view.cache.get(key)
    if cached is None:
        n = view.num_nodes
        rows, cols = view.edge_list()
        a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        cached = SparseMatrix.from_scipy(a + (1.0 + eps) * sp.identity(n, format="csr"))
        view.cache[key] = cached
    return cached


def _linear_in(h, w: Tensor) -> Tensor:
    # h is either a dense Tensor or a constant sparse feature matrix
    if isinstance(h, SparseMatrix):
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"features have {h.shape[1]} columns, weight expects {w.shape[0]}")
        return ad.spmm(h, w)
    return ad.matmul(h, w)


def gcn_layer(h, adj: SparseMatrix, w: Tensor, bias: Tensor | None = None,
              apply_relu: bool = True) -> Tensor:
    """relu(Â H W + b); relu skipped when ``apply_relu`` is False."""
    out = ad.spmm(adj, _linear_in(h, w))
    if bias is not None:
        out = out + bias
    return ad.relu(out) if apply_relu else out


def gin_layer(h, adj: SparseMatrix, mlp: list[tuple[Tensor, Tensor]],
              apply_relu: bool = True) -> Tensor:
    """MLP((1+eps) h_u + sum of neighbor h_v); ``adj`` already carries the self term.

    The first MLP matmul is applied before aggregation, which is the same
    linear map and keeps sparse input features sparse.
    """
    (w1, b1), (w2, b2) = mlp
    z = ad.spmm(adj, _linear_in(h, w1)) + b1
    out = ad.matmul(ad.relu(z), w2) + b2
    return ad.relu(out) if apply_relu else out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class GnnModel:
    """A stack of ``num_layers`` GNN layers followed by a linear head.

    ``params`` is an ordered name -> Tensor mapping; checkpoint order follows it.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for i, (d_in, d_out) in enumerate(spec.layer_dims()):
            if spec.arch == "gcn":
                self._add(f"layer{i}.weight", _glorot(rng, d_in, d_out))
                self._add(f"layer{i}.bias", np.zeros((1, d_out)))
            else:
                self._add(f"layer{i}.mlp0.weight", _glorot(rng, d_in, spec.hidden_dim))
                self._add(f"layer{i}.mlp0.bias", np.zeros((1, spec.hidden_dim)))
                self._add(f"layer{i}.mlp1.weight", _glorot(rng, spec.hidden_dim, d_out))
                self._add(f"layer{i}.mlp1.bias", np.zeros((1, d_out)))
        self._add("head.weight", _glorot(rng, spec.embedding_dim, spec.num_classes))
        self._add("head.bias", np.zeros((1, spec.num_classes)))

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values, requires_grad=True, name=name)

    @property
    def num_layers(self) -> int:
        return self.spec.num_layers

    def copy(self) -> "GnnModel":
        other = GnnModel.__new__(GnnModel)
        other.spec, other.seed = self.spec, self.seed
        other.params = {k: Tensor(p.values.copy(), requires_grad=True, name=k) for k, p in self.params.items()}
        return other

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.values = np.array(state[k], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def encode(self, view, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Final-layer embeddings for every node of ``view``."""
        view = _as_view(view)
        spec = self.spec
        if view.sparse_features.shape[1] != spec.in_dim:
            raise ShapeError(f"graph has {view.sparse_features.shape[1]} features, model expects {spec.in_dim}")
        h = view.cache.get("features")
        if h is None:
            h = view.cache["features"] = SparseMatrix.from_scipy(view.sparse_features)
        if spec.arch == "gcn":
            adj = normalized_adjacency(view)
        else:
            adj = gin_adjacency(view, spec.gin_eps)
        last = spec.num_layers - 1
        for i in range(spec.num_layers):
            if spec.arch == "gcn":
                h = gcn_layer(h, adj, self.params[f"layer{i}.weight"], self.params[f"layer{i}.bias"],
                              apply_relu=i < last)
            else:
                mlp = [(self.params[f"layer{i}.mlp{j}.weight"], self.params[f"layer{i}.mlp{j}.bias"])
                       for j in (0, 1)]
                h = gin_layer(h, adj, mlp, apply_relu=i < last)
            if i < last and training and spec.dropout > 0:
                h = ad.dropout(h, spec.dropout, rng)
        return h

    def head(self, h: Tensor) -> Tensor:
        return ad.matmul(h, self.params["head.weight"]) + self.params["head.bias"]

    def forward(self, view, training: bool = False, rng=None) -> Tensor:
        return self.head(self.encode(view, training, rng))

    def predict_labels(self, graph) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.forward(graph).values, axis=1)

    def logits(self, graph) -> np.ndarray:
        with ad.no_grad():
            return self.forward(graph).values


def _local_rows(view: GraphView, node_locals) -> np.ndarray:
    idx = np.asarray(node_locals, dtype=np.int64).reshape(-1)
    if len(idx) and (idx.min() < 0 or idx.max() >= view.num_nodes):
        raise IndexError("requested node is outside the subgraph")
    return idx


def embed(model: GnnModel, sub, node_locals) -> Tensor:
    """Embeddings of ``node_locals`` (local ids of ``sub``), in request order."""
    view = _as_view(sub)
    return ad.gather_rows(model.encode(view), _local_rows(view, node_locals))


def predict(model: GnnModel, sub, node_locals) -> Tensor:
    return model.head(embed(model, sub, node_locals))


# --- checkpoints ------------------------------------------------------------

MAGIC = "NODECUL-CHECKPOINT 1"


def save_checkpoint(model: GnnModel, path: str | os.PathLike) -> None:
    """Text header (key=value, one ``param`` line per tensor) then raw <f8 arrays."""
    header = [MAGIC]
    for key, value in asdict(model.spec).items():
        header.append(f"{key}={value}")
    header.append(f"seed={model.seed}")
    for name, p in model.params.items():
        header.append(f"param={name} {p.shape[0]} {p.shape[1]}")
    header.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    for p in model.params.values():
        buf.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> GnnModel:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, shapes = {}, []
    pos = 0
    lines = iter(data.split(b"\n"))
    first = next(lines, b"").decode("ascii", "replace")
    if first != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    pos += len(first) + 1
    try:
        for raw in lines:
            pos += len(raw) + 1
            line = raw.decode("ascii")
            if line == "end":
                break
            key, _, value = line.partition("=")
            if key == "param":
                name, r, c = value.split()
                shapes.append((name, int(r), int(c)))
            else:
                fields[key] = value
        else:
            raise DataError(f"{path}: truncated header")
        spec = ModelSpec(
            arch=fields["arch"], in_dim=int(fields["in_dim"]), num_classes=int(fields["num_classes"]),
            hidden_dim=int(fields["hidden_dim"]), embedding_dim=int(fields["embedding_dim"]),
            num_layers=int(fields["num_layers"]), dropout=float(fields["dropout"]),
            gin_eps=float(fields["gin_eps"]),
        )
        seed = int(fields["seed"])
    except (UnicodeDecodeError, KeyError, ValueError, ConfigError) as exc:
        raise DataError(f"{path}: malformed checkpoint header ({exc})") from None
    model = GnnModel(spec, seed=seed)
    state = {}
    for name, r, c in shapes:
        nbytes = r * c * 8
        if pos + nbytes > len(data):
            raise DataError(f"{path}: truncated parameter data for {name}")
        state[name] = np.frombuffer(data, dtype="<f8", count=r * c, offset=pos).reshape(r, c).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} unexpected trailing bytes")
    try:
        model.load_state(state)
    except (KeyError, ShapeError) as exc:
        raise DataError(f"{path}: parameters do not match the architecture ({exc})") from None
    return model
