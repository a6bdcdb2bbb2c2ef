"""Graph container, graph-level transformations and synthetic datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from graphprompt.errors import DatasetFormatError, GraphError

SPLITS = ("train", "valid", "test")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with a dense adjacency and a node-feature matrix.

    Self-loops are never stored; layers insert them. Arrays are copied on
    construction and marked read-only, so a Graph can be shared freely.
    """

    adjacency: np.ndarray
    features: np.ndarray
    label: int | None = None
    graph_id: str = ""

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got shape {a.shape}")
        n = a.shape[0]
        if n < 1:
            raise GraphError("graph must have at least one node")
        if x.ndim != 2 or x.shape[0] != n or x.shape[1] < 1:
            raise GraphError(f"features must be {n}xF with F >= 1, got shape {x.shape}")
        if not np.all((a == 0) | (a == 1)):
            raise GraphError("adjacency entries must be 0 or 1")
        if not np.array_equal(a, a.T):
            raise GraphError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise GraphError("adjacency diagonal must be zero (no stored self-loops)")
        if not np.all(np.isfinite(x)):
            raise GraphError("features contain NaN or Inf")
        if self.label is not None and self.label not in (0, 1):
            raise GraphError(f"label must be 0, 1 or None, got {self.label!r}")
        object.__setattr__(self, "adjacency", _frozen(a))
        object.__setattr__(self, "features", _frozen(x))

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def edge_count(self) -> int:
        return int(self.adjacency.sum() // 2)

    def edges(self) -> list[tuple[int, int]]:
        """Edge list with u < v, in row-major order."""
        us, vs = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(u), int(v)) for u, v in zip(us, vs)]

    def replace(self, **changes) -> "Graph":
        kw = dict(adjacency=self.adjacency, features=self.features,
                  label=self.label, graph_id=self.graph_id)
        kw.update(changes)
        return Graph(**kw)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.label == other.label and self.graph_id == other.graph_id
                and np.array_equal(self.adjacency, other.adjacency)
                and np.array_equal(self.features, other.features))

    __hash__ = None

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]], features,
                   label: int | None = None, graph_id: str = "") -> "Graph":
        a = np.zeros((n, n))
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n) or u == v:
                raise GraphError(f"invalid edge ({u}, {v}) for n={n}")
            a[u, v] = a[v, u] = 1.0
        return cls(a, features, label, graph_id)


# --------------------------------------------------------------------------
# transformations


@dataclass(frozen=True, eq=False)
class FeatureTransform:
    delta_features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta_features", _frozen(np.atleast_2d(self.delta_features)))


@dataclass(frozen=True, eq=False)
class LinkTransform:
    delta_adjacency: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta_adjacency", _frozen(np.atleast_2d(self.delta_adjacency)))

    @classmethod
    def from_edits(cls, n: int, add: Iterable[Sequence[int]] = (),
                   remove: Iterable[Sequence[int]] = ()) -> "LinkTransform":
        d = np.zeros((n, n))
        for u, v in add:
            d[u, v] = d[v, u] = 1.0
        for u, v in remove:
            d[u, v] = d[v, u] = -1.0
        return cls(d)


@dataclass(frozen=True)
class ComponentEdit:
    """One isolated-component edit.

    ``indicator`` is +1 for an added component (``component`` set) and -1 for
    a removed one (``nodes`` indexes the host graph).
    """

    indicator: int
    component: Graph | None = None
    nodes: tuple[int, ...] | None = None

    @classmethod
    def add(cls, component: Graph) -> "ComponentEdit":
        return cls(1, component=component)

    @classmethod
    def remove(cls, nodes: Iterable[int]) -> "ComponentEdit":
        return cls(-1, nodes=tuple(sorted(int(i) for i in nodes)))


@dataclass(frozen=True)
class IsolatedComponentTransform:
    edits: tuple[ComponentEdit, ...]

    def __post_init__(self):
        object.__setattr__(self, "edits", tuple(self.edits))
        for e in self.edits:
            if e.indicator == 1 and e.component is None:
                raise GraphError("added component edit needs a component graph")
            if e.indicator == -1 and not e.nodes:
                raise GraphError("removal edit needs a non-empty node set")
            if e.indicator not in (1, -1):
                raise GraphError(f"indicator must be +1 or -1, got {e.indicator}")

    @property
    def additions(self) -> list[Graph]:
        return [e.component for e in self.edits if e.indicator == 1]

    @property
    def removals(self) -> list[tuple[int, ...]]:
        return [e.nodes for e in self.edits if e.indicator == -1]


@dataclass(frozen=True)
class Composite:
    steps: tuple["TransformSpec", ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))


TransformSpec = Union[FeatureTransform, LinkTransform, IsolatedComponentTransform, Composite]


def check_removals(g: Graph, removals: Sequence[Sequence[int]]) -> np.ndarray:
    """Validate removal sets against ``g``; return a boolean keep-mask."""
    n = g.node_count
    drop = np.zeros(n, dtype=bool)
    for nodes in removals:
        idx = np.asarray(nodes, dtype=int)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
            raise GraphError(f"removal set {list(nodes)} out of range for n={n}")
        if np.any(drop[idx]) or len(set(idx.tolist())) != idx.size:
            raise GraphError("removal sets overlap")
        inside = np.zeros(n, dtype=bool)
        inside[idx] = True
        if np.any(g.adjacency[np.ix_(inside, ~inside)]):
            raise GraphError(f"removal set {list(nodes)} is not a union of connected components")
        drop |= inside
    return ~drop


def _block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        out[i:i + k, i:i + k] = b
        i += k
    return out


def apply_transform(g: Graph, spec: TransformSpec) -> Graph:
    """Return the transformed graph; ``g`` is never modified."""
    if isinstance(spec, FeatureTransform):
        if spec.delta_features.shape != g.features.shape:
            raise GraphError(f"delta_features shape {spec.delta_features.shape} "
                             f"!= features shape {g.features.shape}")
        return g.replace(features=g.features + spec.delta_features)
    if isinstance(spec, LinkTransform):
        d = spec.delta_adjacency
        if d.shape != g.adjacency.shape:
            raise GraphError(f"delta_adjacency shape {d.shape} != adjacency shape {g.adjacency.shape}")
        if not np.all(np.isin(d, (-1.0, 0.0, 1.0))):
            raise GraphError("delta_adjacency entries must be in {-1, 0, 1}")
        a = g.adjacency + d
        if not np.all((a == 0) | (a == 1)):
            raise GraphError("link transform produces adjacency entries outside {0, 1}")
        return g.replace(adjacency=a)
    if isinstance(spec, IsolatedComponentTransform):
        keep = check_removals(g, spec.removals)
        if not keep.any() and not spec.additions:
            raise GraphError("removal would leave an empty graph")
        blocks_a = [g.adjacency[np.ix_(keep, keep)]]
        blocks_x = [g.features[keep]]
        for comp in spec.additions:
            if comp.feature_dim != g.feature_dim:
                raise GraphError(f"added component has F={comp.feature_dim}, host has F={g.feature_dim}")
            blocks_a.append(comp.adjacency)
            blocks_x.append(comp.features)
        return g.replace(adjacency=_block_diag(blocks_a), features=np.vstack(blocks_x))
    if isinstance(spec, Composite):
        out = g
        for step in spec.steps:
            out = apply_transform(out, step)
        return out
    raise TypeError(f"unknown transform spec {type(spec).__name__}")


def connected_components(g: Graph) -> list[list[int]]:
    """Connected components as sorted node lists, ordered by smallest node."""
    n = g.node_count
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for u, v in g.edges():
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda c: c[0])


def permute(g: Graph, perm: Sequence[int]) -> Graph:
    """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
    p = np.asarray(perm, dtype=int)
    n = g.node_count
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise GraphError(f"perm is not a bijection on [0, {n})")
    return g.replace(adjacency=g.adjacency[np.ix_(p, p)], features=g.features[p])


def inverse_permutation(perm: Sequence[int]) -> np.ndarray:
    p = np.asarray(perm, dtype=int)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    return inv


def has_triangle(adjacency: np.ndarray) -> bool:
    a = np.asarray(adjacency)
    return bool(np.trace(a @ a @ a) > 0)


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    graphs: list[Graph]
    split: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.graphs:
            raise DatasetFormatError("dataset has no graphs")
        dims = {g.feature_dim for g in self.graphs}
        if len(dims) != 1:
            raise DatasetFormatError(f"graphs disagree on feature dimension: {sorted(dims)}")
        ids = [g.graph_id for g in self.graphs]
        if len(set(ids)) != len(ids):
            raise DatasetFormatError("duplicate graph ids")
        unknown = set(self.split) - set(ids)
        if unknown:
            raise DatasetFormatError(f"split refers to unknown ids: {sorted(unknown)[:5]}")
        bad = {s for s in self.split.values() if s not in SPLITS}
        if bad:
            raise DatasetFormatError(f"unknown split names: {sorted(bad)}")

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].feature_dim

    def subset(self, name: str) -> list[Graph]:
        return [g for g in self.graphs if self.split.get(g.graph_id) == name]

    def __len__(self):
        return len(self.graphs)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.split == other.split and self.graphs == other.graphs


def _random_bipartite(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Connected-ish triangle-free graph: random tree plus bipartite chords."""
    side = rng.integers(0, 2, size=n)
    side[0], side[-1] = 0, 1
    a = np.zeros((n, n))
    order = rng.permutation(n)
    # spanning tree over alternating sides keeps the graph bipartite
    left = [i for i in order if side[i] == 0]
    right = [i for i in order if side[i] == 1]
    for v in right:
        u = left[rng.integers(0, len(left))]
        a[u, v] = a[v, u] = 1
    for u in left[1:]:
        v = right[rng.integers(0, len(right))]
        a[u, v] = a[v, u] = 1
    for u in left:
        for v in right:
            if rng.random() < p:
                a[u, v] = a[v, u] = 1
    return a


def _triangle_graph(rng, n, want_triangle):
    a = _random_bipartite(rng, n, p=0.15)
    if want_triangle:
        tri = rng.choice(n, size=3, replace=False)
        for i in range(3):
            for j in range(i + 1, 3):
                a[tri[i], tri[j]] = a[tri[j], tri[i]] = 1
    return a, int(has_triangle(a))


def _community_graph(rng, n, want_dense):
    half = n // 2
    comm = np.r_[np.zeros(half, dtype=int), np.ones(n - half, dtype=int)]
    p_in = 0.5
    p_out = 0.3 if want_dense else 0.05
    a = np.zeros((n, n))
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < (p_in if comm[u] == comm[v] else p_out):
                a[u, v] = a[v, u] = 1
    inter = a[np.ix_(comm == 0, comm == 1)].sum()
    threshold = 0.15 * half * (n - half)
    return a, int(inter > threshold)


def generate_synthetic_dataset(seed: int, n_graphs: int, class_rule: str = "triangle-motif",
                               feature_dim: int = 8, min_nodes: int = 6,
                               max_nodes: int = 14) -> Dataset:
    """Deterministic binary graph-classification corpus.

    ``triangle-motif`` labels a graph 1 iff it contains a triangle;
    ``community-pair`` labels it 1 iff two planted communities share more than
    15% of their possible cross edges. Classes are drawn alternately and the
    label is recomputed from the finished graph, so balance holds by
    construction. Feature column 0 is a constant 1, the rest Gaussian noise.
    Splits are a seeded 80/10/10 partition.
    """
    if n_graphs < 4:
        raise ValueError("n_graphs must be >= 4")
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    builders = {"triangle-motif": _triangle_graph, "community-pair": _community_graph}
    if class_rule not in builders:
        raise ValueError(f"unknown class_rule {class_rule!r}; expected one of {sorted(builders)}")
    build = builders[class_rule]
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(n_graphs):
        want = i % 2
        while True:
            n = int(rng.integers(min_nodes, max_nodes + 1))
            a, label = build(rng, n, bool(want))
            if label == want:
                break
        x = rng.normal(size=(n, feature_dim))
        x[:, 0] = 1.0
        graphs.append(Graph(a, x, label, f"g{i:05d}"))
    order = rng.permutation(n_graphs)
    graphs = [graphs[i] for i in order]
    n_train = int(round(0.8 * n_graphs))
    n_valid = max(1, int(round(0.1 * n_graphs)))
    split = {}
    for rank, g in enumerate(graphs):
        split[g.graph_id] = ("train" if rank < n_train else
                             "valid" if rank < n_train + n_valid else "test")
    return Dataset(graphs, split)


# --------------------------------------------------------------------------
# JSON lines I/O


def graph_to_record(g: Graph, split: str | None = None) -> dict:
    rec = {"id": g.graph_id, "n": g.node_count, "edges": [list(e) for e in g.edges()],
           "x": g.features.tolist()}
    if g.label is not None:
        rec["y"] = int(g.label)
    if split is not None:
        rec["split"] = split
    return rec


def graph_from_record(rec: dict) -> Graph:
    if not isinstance(rec, dict):
        raise DatasetFormatError("graph record must be a JSON object")
    missing = {"id", "n", "x"} - set(rec)
    if "edges" not in rec and "adjacency" not in rec:
        missing.add("edges")
    if missing:
        raise DatasetFormatError(f"graph record missing keys: {sorted(missing)}")
    n = rec["n"]
    if not isinstance(n, int) or n < 1:
        raise DatasetFormatError(f"graph {rec['id']!r}: n must be a positive integer")
    x = np.asarray(rec["x"], dtype=np.float64)
    try:
        if "adjacency" in rec:
            return Graph(np.asarray(rec["adjacency"], dtype=np.float64), x,
                         rec.get("y"), str(rec["id"]))
        for e in rec["edges"]:
            if len(e) != 2 or not e[0] < e[1]:
                raise DatasetFormatError(
                    f"graph {rec['id']!r}: edge {e} must be [u, v] with u < v")
        return Graph.from_edges(n, rec["edges"], x, rec.get("y"), str(rec["id"]))
    except GraphError as exc:
        raise DatasetFormatError(f"graph {rec['id']!r}: {exc}") from exc


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        for g in ds.graphs:
            fh.write(json.dumps(graph_to_record(g, ds.split.get(g.graph_id))) + "\n")


def load_dataset(path) -> Dataset:
    graphs, split = [], {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                g = graph_from_record(rec)
            except DatasetFormatError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
            graphs.append(g)
            if "split" in rec:
                split[g.graph_id] = rec["split"]
    if graphs and len({g.feature_dim for g in graphs}) != 1:
        raise DatasetFormatError(f"{path}: graphs disagree on feature dimension")
    return Dataset(graphs, split)


def load_graph(path) -> Graph:
    """Read a single graph record (a JSON object, or the first line of a JSONL file)."""
    text = Path(path).read_text().strip()
    try:
        rec = json.loads(text)
    except json.JSONDecodeError:
        rec = json.loads(text.splitlines()[0])
    return graph_from_record(rec)


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_record(g)) + "\n")


# --------------------------------------------------------------------------
# transform spec files


def spec_to_dict(spec: TransformSpec) -> dict:
    if isinstance(spec, FeatureTransform):
        return {"kind": "feature", "delta_features": spec.delta_features.tolist()}
    if isinstance(spec, LinkTransform):
        return {"kind": "link", "delta_adjacency": spec.delta_adjacency.astype(int).tolist()}
    if isinstance(spec, IsolatedComponentTransform):
        edits = []
        for e in spec.edits:
            if e.indicator == 1:
                edits.append({"op": "add", "component": graph_to_record(e.component)})
            else:
                edits.append({"op": "remove", "nodes": list(e.nodes)})
        return {"kind": "isolated_component", "edits": edits}
    if isinstance(spec, Composite):
        return {"kind": "composite", "steps": [spec_to_dict(s) for s in spec.steps]}
    raise TypeError(f"unknown transform spec {type(spec).__name__}")


def spec_from_dict(d: dict) -> TransformSpec:
    """Parse the JSON form; ``link`` also accepts ``add``/``remove`` edge lists plus ``n``."""
    if not isinstance(d, dict) or "kind" not in d:
        raise DatasetFormatError("transform spec must be an object with a 'kind' tag")
    kind = d["kind"]
    try:
        if kind == "feature":
            return FeatureTransform(np.asarray(d["delta_features"], dtype=np.float64))
        if kind == "link":
            if "delta_adjacency" in d:
                return LinkTransform(np.asarray(d["delta_adjacency"], dtype=np.float64))
            return LinkTransform.from_edits(int(d["n"]), d.get("add", ()), d.get("remove", ()))
        if kind == "isolated_component":
            edits = []
            for e in d["edits"]:
                if e["op"] == "add":
                    comp = e["component"]
                    comp = {"id": "", **comp} if isinstance(comp, dict) else comp
                    edits.append(ComponentEdit.add(graph_from_record(comp)))
                elif e["op"] == "remove":
                    edits.append(ComponentEdit.remove(e["nodes"]))
                else:
                    raise DatasetFormatError(f"unknown component edit op {e['op']!r}")
            return IsolatedComponentTransform(tuple(edits))
        if kind == "composite":
            return Composite(tuple(spec_from_dict(s) for s in d["steps"]))
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"malformed {kind!r} transform spec: missing or bad field {exc}") from exc
    raise DatasetFormatError(f"unknown transform kind {kind!r}")


def save_spec(spec: TransformSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=1) + "\n")


def load_spec(path) -> TransformSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc.msg})") from exc
    return spec_from_dict(doc)
