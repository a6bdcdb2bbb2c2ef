"""GIN/GCN layers, readouts, model assembly, freezing and checkpoints."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from graphprompt import tensor as T
from graphprompt.errors import CheckpointError, ShapeError
from graphprompt.graph import Graph
from graphprompt.tensor import Tensor

CHECKPOINT_VERSION = 1
LAYER_KINDS = ("gin", "gcn")
READOUTS = ("sum", "mean")
ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class LayerSpec:
    """One message-passing layer.

    GIN layers apply ``update((A + (1 + eps) I) H)`` where the update is either
    a single linear map or a two-layer relu MLP. GCN layers apply
    ``D^-1/2 (A + I) D^-1/2 H W``. ``bias=False`` with ``update="linear"``
    gives the linear GIN used by the closed-form prompt solver.
    """

    kind: str
    in_dim: int
    out_dim: int
    update: str = "linear"
    bias: bool = False
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer kind must be one of {LAYER_KINDS}, got {self.kind!r}")
        if self.update not in ("linear", "mlp"):
            raise ValueError(f"update must be 'linear' or 'mlp', got {self.update!r}")
        if self.kind == "gcn" and self.update != "linear":
            raise ValueError("GCN layers only support a linear update")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")

    @property
    def is_linear_gin(self) -> bool:
        return self.kind == "gin" and self.update == "linear" and not self.bias

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "dims": [self.in_dim, self.out_dim],
             "update": self.update, "bias": self.bias}
        if self.kind == "gin":
            d["epsilon"] = self.epsilon
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], int(d["dims"][0]), int(d["dims"][1]), d.get("update", "linear"),
                   bool(d.get("bias", False)), float(d.get("epsilon", 0.0)))


@dataclass(frozen=True)
class HeadSpec:
    """Classification head mapping the graph embedding to one logit.

    ``layers=1`` is a linear head; ``layers=k>1`` is a k-layer relu MLP whose
    hidden width defaults to the embedding width.
    """

    layers: int = 1
    hidden: int | None = None
    bias: bool = True

    def to_dict(self) -> dict:
        return {"layers": self.layers, "hidden": self.hidden, "bias": self.bias}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        return cls(int(d.get("layers", 1)), d.get("hidden"), bool(d.get("bias", True)))


def _param_shapes(layers: Sequence[LayerSpec], head: HeadSpec | None):
    shapes: dict[str, tuple[int, int]] = {}
    for i, layer in enumerate(layers):
        pre = f"layer{i}"
        if layer.kind == "gin":
            shapes[f"{pre}.eps"] = (1, 1)
        if layer.update == "mlp":
            shapes[f"{pre}.mlp0.weight"] = (layer.in_dim, layer.out_dim)
            if layer.bias:
                shapes[f"{pre}.mlp0.bias"] = (1, layer.out_dim)
            shapes[f"{pre}.mlp1.weight"] = (layer.out_dim, layer.out_dim)
            if layer.bias:
                shapes[f"{pre}.mlp1.bias"] = (1, layer.out_dim)
        else:
            shapes[f"{pre}.weight"] = (layer.in_dim, layer.out_dim)
            if layer.bias:
                shapes[f"{pre}.bias"] = (1, layer.out_dim)
    if head is not None:
        width = layers[-1].out_dim
        hidden = head.hidden or width
        dims = [width] + [hidden] * (head.layers - 1) + [1]
        for j in range(head.layers):
            shapes[f"head.{j}.weight"] = (dims[j], dims[j + 1])
            if head.bias:
                shapes[f"head.{j}.bias"] = (1, dims[j + 1])
    return shapes


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


class GnnModel:
    """Ordered GNN layers + readout + classification head.

    Parameters live in ``params`` (name -> Tensor); freezing is tracked per
    parameter name in ``frozen``. Parameter groups are ``layer0``..``layerK``
    and ``head``; ``backbone`` names all layers at once.
    """

    def __init__(self, layers: Sequence[LayerSpec], readout: str = "sum",
                 activation: str = "relu", head: HeadSpec | None = HeadSpec(),
                 params: dict[str, np.ndarray] | None = None, seed: int = 0):
        layers = list(layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.layers = layers
        self.readout = readout
        self.activation = activation
        self.head = head
        shapes = _param_shapes(layers, head)
        if params is None:
            params = init_params(shapes, layers, seed)
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        if missing or extra:
            raise CheckpointError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            v = np.asarray(params[name], dtype=np.float64)
            if v.shape != shape:
                raise CheckpointError(f"parameter {name} has shape {v.shape}, expected {shape}")
            self.params[name] = Tensor(v.copy(), requires_grad=True)
        self.frozen: dict[str, bool] = {name: False for name in shapes}

    # -- structure ---------------------------------------------------------

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def groups(self) -> list[str]:
        return [f"layer{i}" for i in range(len(self.layers))] + (["head"] if self.head else [])

    def group_params(self, group: str) -> list[str]:
        if group == "backbone":
            return [n for n in self.params if n.startswith("layer")]
        if group not in self.groups:
            raise KeyError(f"unknown parameter group {group!r}; known: {self.groups + ['backbone']}")
        return [n for n in self.params if group_of(n) == group]

    def with_head(self, head: HeadSpec | None, seed: int = 0) -> "GnnModel":
        """Copy of this model with a freshly initialised head; backbone values and flags kept."""
        backbone = {n: t.values for n, t in self.params.items() if n.startswith("layer")}
        shapes = _param_shapes(self.layers, head)
        fresh = init_params({n: s for n, s in shapes.items() if n.startswith("head")}, self.layers, seed)
        out = GnnModel(self.layers, self.readout, self.activation, head, {**backbone, **fresh})
        for n in backbone:
            out.frozen[n] = self.frozen[n]
        return out

    def copy(self) -> "GnnModel":
        out = GnnModel(self.layers, self.readout, self.activation, self.head,
                       {n: t.values for n, t in self.params.items()})
        out.frozen = dict(self.frozen)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            self.params[n].values[...] = v

    def config(self) -> dict:
        layers = []
        for i, l in enumerate(self.layers):
            d = l.to_dict()
            if l.kind == "gin":
                d["epsilon"] = float(self.params[f"layer{i}.eps"].values[0, 0])
            layers.append(d)
        return {"layers": layers, "readout": self.readout,
                "activation": self.activation,
                "head": self.head.to_dict() if self.head else None}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def init_params(shapes: dict[str, tuple[int, int]], layers: Sequence[LayerSpec], seed: int):
    """Glorot-uniform weights, zero biases, eps taken from the layer spec."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".eps"):
            out[name] = np.array([[layers[int(name[5:].split(".")[0])].epsilon]])
        elif name.endswith(".bias"):
            out[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-limit, limit, size=shape)
    return out


def freeze(model: GnnModel, groups: Iterable[str] = ("backbone",)) -> GnnModel:
    for g in groups:
        for n in model.group_params(g):
            model.frozen[n] = True
    return model


def unfreeze(model: GnnModel, groups: Iterable[str] = ("backbone",)) -> GnnModel:
    for g in groups:
        for n in model.group_params(g):
            model.frozen[n] = False
    return model


def count_params(model: GnnModel, trainable_only: bool = False) -> int:
    return sum(t.values.size for n, t in model.params.items()
               if not (trainable_only and model.frozen[n]))


# --------------------------------------------------------------------------
# forward pass


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric normalisation of the self-looped adjacency."""
    a = np.asarray(adjacency, dtype=np.float64) + np.eye(adjacency.shape[0])
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


class Structure:
    """Adjacency-derived constants for one graph or a block-diagonal batch.

    ``pool`` maps stacked node rows to graph rows (sum readout); ``sizes``
    holds the node count of every graph in the batch.
    """

    def __init__(self, adjacency: np.ndarray, sizes: Sequence[int]):
        self.adjacency = np.asarray(adjacency, dtype=np.float64)
        self.sizes = np.asarray(sizes, dtype=int)
        self._norm = None
        n = self.adjacency.shape[0]
        if self.sizes.sum() != n:
            raise ShapeError("graph sizes do not add up to the adjacency size")
        self.pool = np.zeros((len(self.sizes), n))
        start = 0
        for i, k in enumerate(self.sizes):
            self.pool[i, start:start + k] = 1.0
            start += k

    @property
    def normalized(self) -> np.ndarray:
        if self._norm is None:
            self._norm = normalized_adjacency(self.adjacency)
        return self._norm

    @classmethod
    def of(cls, g: Graph) -> "Structure":
        return cls(g.adjacency, [g.node_count])

    @classmethod
    def batch(cls, graphs: Sequence[Graph]) -> "Structure":
        n = sum(g.node_count for g in graphs)
        a = np.zeros((n, n))
        i = 0
        for g in graphs:
            k = g.node_count
            a[i:i + k, i:i + k] = g.adjacency
            i += k
        return cls(a, [g.node_count for g in graphs])


def _linear(model: GnnModel, h: Tensor, prefix: str) -> Tensor:
    out = T.matmul(h, model.params[f"{prefix}.weight"])
    bias = model.params.get(f"{prefix}.bias")
    return T.broadcast_add_row(out, bias) if bias is not None else out


def layer_forward(model: GnnModel, index: int, structure: Structure, h) -> Tensor:
    layer = model.layers[index]
    h = T.as_tensor(h)
    if h.shape[1] != layer.in_dim:
        raise ShapeError(f"layer{index} expects {layer.in_dim} input features, got {h.shape[1]}")
    pre = f"layer{index}"
    if layer.kind == "gcn":
        return _linear(model, T.matmul(structure.normalized, h), pre)
    eps = model.params[f"{pre}.eps"]
    # (A + (1 + eps) I) H  ==  A H + H + eps * H
    agg = T.add(T.add(T.matmul(structure.adjacency, h), h), T.scalar_mul(eps, h))
    if layer.update == "linear":
        return _linear(model, agg, pre)
    return _linear(model, T.relu(_linear(model, agg, f"{pre}.mlp0")), f"{pre}.mlp1")


def readout(h, kind: str = "sum", structure: Structure | None = None) -> Tensor:
    """Sum or mean over nodes; with a batched ``structure`` one row per graph."""
    if structure is None or len(structure.sizes) == 1:
        return T.row_sum(h) if kind == "sum" else T.row_mean(h)
    pooled = T.matmul(structure.pool, h)
    if kind == "sum":
        return pooled
    return T.matmul(np.diag(1.0 / structure.sizes), pooled)


def node_embeddings(model: GnnModel, structure: Structure, x) -> Tensor:
    h = T.as_tensor(x)
    last = len(model.layers) - 1
    for i in range(len(model.layers)):
        h = layer_forward(model, i, structure, h)
        if i < last and model.activation == "relu":
            h = T.relu(h)
    return h


def embed(model: GnnModel, structure: Structure, x) -> Tensor:
    """Graph embedding(s): layers, then readout. Rows are graphs."""
    return readout(node_embeddings(model, structure, x), model.readout, structure)


def head_forward(model: GnnModel, emb) -> Tensor:
    if model.head is None:
        raise ShapeError("model has no classification head")
    z = T.as_tensor(emb)
    for j in range(model.head.layers):
        z = _linear(model, z, f"head.{j}")
        if j < model.head.layers - 1:
            z = T.relu(z)
    return z


def model_forward(model: GnnModel, g: Graph, prompt=None) -> tuple[Tensor, Tensor | None]:
    """(graph embedding 1xF', logit 1x1); ``prompt`` is added to every node first."""
    if g.feature_dim != model.in_dim:
        raise ShapeError(f"graph has F={g.feature_dim}, model expects {model.in_dim}")
    x = Tensor(g.features)
    if prompt is not None:
        x = T.broadcast_add_row(x, prompt)
    emb = embed(model, Structure.of(g), x)
    logit = head_forward(model, emb) if model.head is not None else None
    return emb, logit


# --------------------------------------------------------------------------
# checkpoints


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    a = np.frombuffer(raw, dtype="<f8")
    if a.size != int(np.prod(shape)):
        raise CheckpointError(f"array payload has {a.size} values, expected shape {shape}")
    return a.reshape(shape).astype(np.float64)


def save_checkpoint(model: GnnModel, path) -> None:
    doc = {"version": CHECKPOINT_VERSION, **model.config(),
           "params": {n: {"shape": list(t.shape), "data": _encode(t.values)}
                      for n, t in model.params.items()},
           "frozen": dict(model.frozen)}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path, expect: dict | None = None) -> GnnModel:
    """Load a model; ``expect`` is an optional config dict the header must match."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc.msg})") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version') if isinstance(doc, dict) else None!r}")
    try:
        layers = [LayerSpec.from_dict(d) for d in doc["layers"]]
        head = HeadSpec.from_dict(doc["head"]) if doc.get("head") else None
        params = {n: _decode(p["data"], tuple(p["shape"])) for n, p in doc["params"].items()}
        model = GnnModel(layers, doc["readout"], doc["activation"], head, params)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if expect is not None:
        got = [l.to_dict()["dims"] for l in layers]
        want = [list(d["dims"]) for d in expect["layers"]]
        if got != want:
            raise CheckpointError(f"{path}: layer dims {got} disagree with config {want}")
    frozen = doc.get("frozen", {})
    if set(frozen) - set(model.params):
        raise CheckpointError(f"{path}: frozen map names unknown parameters")
    for n, flag in frozen.items():
        model.frozen[n] = bool(flag)
    return model


def build_model(in_dim: int, hidden: int, num_layers: int, kind: str = "gin",
                update: str = "mlp", bias: bool = True, readout: str = "sum",
                activation: str = "relu", head: HeadSpec | None = HeadSpec(),
                epsilon: float = 0.0, out_dim: int | None = None, seed: int = 0) -> GnnModel:
    dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim or hidden]
    layers = [LayerSpec(kind, dims[i], dims[i + 1], update if kind == "gin" else "linear",
                        bias, epsilon) for i in range(num_layers)]
    return GnnModel(layers, readout, activation, head, seed=seed)


def linear_gin(theta: np.ndarray, epsilon: float = 0.0, readout: str = "sum",
               head: HeadSpec | None = None) -> GnnModel:
    """Single-layer bias-free linear GIN with fixed weights."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    layer = LayerSpec("gin", theta.shape[0], theta.shape[1], "linear", False, epsilon)
    params = {"layer0.eps": np.array([[epsilon]]), "layer0.weight": theta}
    model = GnnModel([layer], readout, "none", None, params)
    return model.with_head(head) if head is not None else model
