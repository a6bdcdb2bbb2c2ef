"""Training strategies, ROC-AUC, toy edge-prediction pre-training and strategy comparison."""

from __future__ import annotations

import csv
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from graphprompt import tensor as T
from graphprompt.errors import NonFiniteLossError, ShapeError
from graphprompt.gnn import (GnnModel, HeadSpec, Structure, count_params, embed, freeze,
                             head_forward, node_embeddings, unfreeze)
from graphprompt.graph import Dataset, Graph
from graphprompt.prompt import PromptVector, prompted_features
from graphprompt.tensor import Tensor

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# strategies


@dataclass(frozen=True)
class Strategy:
    """Which parameters a tuning run may update.

    kinds: ``ft`` (everything), ``gpf`` (prompt + head), ``partial`` (last k
    layers + head), ``mlp`` (k-layer MLP head only), ``linear-probe`` (linear
    head only).
    """

    kind: str
    k: int = 0

    KINDS = ("ft", "gpf", "partial", "mlp", "linear-probe")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind in ("partial", "mlp") and self.k < 1:
            raise ValueError(f"strategy {self.kind} needs k >= 1")

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        t = text.strip().lower()
        aliases = {"fine-tune": "ft", "finetune": "ft", "full": "ft", "prompt": "gpf",
                   "linear": "linear-probe", "probe": "linear-probe", "lp": "linear-probe"}
        t = aliases.get(t, t)
        m = re.fullmatch(r"(partial|mlp)-?(\d+)", t)
        if m:
            return cls(m.group(1), int(m.group(2)))
        return cls(t)

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.k}" if self.kind in ("partial", "mlp") else self.kind

    @property
    def uses_prompt(self) -> bool:
        return self.kind == "gpf"

    def head_spec(self) -> HeadSpec:
        return HeadSpec(layers=self.k) if self.kind == "mlp" else HeadSpec(layers=1)

    def trainable_groups(self, model: GnnModel) -> list[str]:
        n = len(model.layers)
        if self.kind == "ft":
            return model.groups
        if self.kind == "partial":
            if self.k > n:
                raise ValueError(f"partial-{self.k} on a {n}-layer model")
            return [f"layer{i}" for i in range(n - self.k, n)] + ["head"]
        return ["head"]

    def configure(self, model: GnnModel) -> GnnModel:
        """Set frozen flags on ``model`` to exactly this strategy's trainable set."""
        freeze(model, model.groups)
        unfreeze(model, self.trainable_groups(model))
        return model


def prepare_model(backbone: GnnModel, strategy: Strategy, seed: int = 0) -> GnnModel:
    """Fresh head for ``strategy`` on a copy of ``backbone``, flags configured."""
    return strategy.configure(backbone.with_head(strategy.head_spec(), seed=seed))


def strategy_param_counts(model: GnnModel, strategy: Strategy) -> tuple[int, int]:
    """(trainable, total) parameters, counting the prompt under GPF."""
    m = strategy.configure(model.with_head(strategy.head_spec()))
    extra = m.in_dim if strategy.uses_prompt else 0
    return count_params(m, trainable_only=True) + extra, count_params(m) + extra


# --------------------------------------------------------------------------
# config and metrics


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    loss: str = "bce"
    eval_every: int = 1
    metric: str = "auc"
    backtracking: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.eval_every < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size and eval_every must be positive; epochs >= 0")
        if self.loss not in ("bce", "mse"):
            raise ValueError(f"loss must be 'bce' or 'mse', got {self.loss!r}")
        if self.metric not in ("auc", "accuracy"):
            raise ValueError(f"metric must be 'auc' or 'accuracy', got {self.metric!r}")


def evaluate_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based ROC-AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores for {y.size} labels")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC-AUC needs both classes present")
    # average ranks handle ties: AUC = (sum of positive ranks - P(P+1)/2) / (P N)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[y == 1].sum()
    return float((r_pos - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def accuracy(scores, labels) -> float:
    s = np.asarray(scores).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    return float(np.mean((s > 0).astype(int) == y))


@dataclass
class CurvePoint:
    epoch: int
    train_loss: float
    train_metric: float
    test_metric: float


@dataclass
class MetricCurve:
    metric: str = "auc"
    points: list[CurvePoint] = field(default_factory=list)

    def add(self, epoch, train_loss, train_metric, test_metric):
        if self.points and epoch <= self.points[-1].epoch:
            raise ValueError("curve epochs must increase")
        self.points.append(CurvePoint(epoch, train_loss, train_metric, test_metric))

    @property
    def final(self) -> CurvePoint:
        return self.points[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_metric", "test_metric"])
            for p in self.points:
                w.writerow([p.epoch, repr(p.train_loss), repr(p.train_metric), repr(p.test_metric)])

    @classmethod
    def read_csv(cls, path, metric: str = "auc") -> "MetricCurve":
        curve = cls(metric)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.add(int(row["epoch"]), float(row["train_loss"]),
                          float(row["train_metric"]), float(row["test_metric"]))
        return curve


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: GnnModel
    prompt: PromptVector | None
    curve: MetricCurve
    strategy: Strategy


def _labels(graphs: Sequence[Graph]) -> np.ndarray:
    y = [g.label for g in graphs]
    if any(v is None for v in y):
        raise ValueError("every training graph needs a label")
    return np.asarray(y, dtype=np.float64).reshape(-1, 1)


class _Batch:
    __slots__ = ("structure", "x", "y")

    def __init__(self, graphs: Sequence[Graph]):
        self.structure = Structure.batch(graphs)
        self.x = Tensor(np.vstack([g.features for g in graphs]))
        self.y = _labels(graphs)


def _logits(model: GnnModel, batch: _Batch, prompt: Tensor | None) -> Tensor:
    x = prompted_features(batch.x, prompt) if prompt is not None else batch.x
    return head_forward(model, embed(model, batch.structure, x))


def _loss(logits: Tensor, y: np.ndarray, kind: str) -> Tensor:
    return T.bce_loss(logits, y) if kind == "bce" else T.mse_loss(logits, y)


def _metric(kind: str, scores: np.ndarray, y: np.ndarray) -> float:
    if kind == "accuracy":
        return accuracy(scores, y)
    try:
        return evaluate_auc(scores, y)
    except ValueError:
        return float("nan")


def _set_requires_grad(model: GnnModel, on: bool) -> None:
    for name, t in model.params.items():
        t.requires_grad = on and not model.frozen[name]
        t.grad = np.zeros_like(t.values) if t.requires_grad else None


def train(model: GnnModel, strategy: Strategy, ds: Dataset, cfg: TrainConfig,
          prompt: PromptVector | None = None) -> TrainResult:
    """Tune a copy of ``model`` under ``strategy``; the input model is untouched.

    Mini-batch gradient descent over the ``train`` split. Under GPF every
    graph, in training and evaluation, has the prompt added to its node
    features before the frozen backbone sees it. The curve records full
    train loss and train/test metric at epoch 0 and every ``eval_every``
    epochs.
    """
    model = strategy.configure(model.copy())
    if model.head is None:
        raise ShapeError("training needs a model with a classification head")
    train_graphs = ds.subset("train")
    test_graphs = ds.subset("test")
    if not train_graphs:
        raise ValueError("dataset has no 'train' split")
    p = None
    if strategy.uses_prompt:
        init = prompt.values if prompt is not None else np.zeros(model.in_dim)
        p = Tensor(np.asarray(init, dtype=np.float64).reshape(1, -1), requires_grad=True)
        if p.shape[1] != model.in_dim:
            raise ShapeError(f"prompt dim {p.shape[1]} != model input dim {model.in_dim}")
    _set_requires_grad(model, True)
    trainable = [t for n, t in model.params.items() if not model.frozen[n]]
    if p is not None:
        trainable.append(p)
    if not trainable:
        raise ValueError(f"strategy {strategy.name} leaves nothing trainable")

    full_train = _Batch(train_graphs)
    full_test = _Batch(test_graphs) if test_graphs else None
    rng = np.random.default_rng(cfg.seed)
    curve = MetricCurve(cfg.metric)

    def snapshot(epoch):
        _set_requires_grad(model, False)
        pt = Tensor(p.values) if p is not None else None
        z = _logits(model, full_train, pt)
        loss = _loss(z, full_train.y, cfg.loss).item()
        train_m = _metric(cfg.metric, z.values, full_train.y)
        test_m = (_metric(cfg.metric, _logits(model, full_test, pt).values, full_test.y)
                  if full_test is not None else float("nan"))
        curve.add(epoch, loss, train_m, test_m)
        _set_requires_grad(model, True)
        return loss

    snapshot(0)
    step = cfg.learning_rate
    full_batch = cfg.batch_size >= len(train_graphs)
    for epoch in range(1, cfg.epochs + 1):
        if full_batch:
            batches = [full_train]
        else:
            order = rng.permutation(len(train_graphs))
            batches = [_Batch([train_graphs[i] for i in order[s:s + cfg.batch_size]])
                       for s in range(0, len(order), cfg.batch_size)]
        for batch in batches:
            for t in trainable:
                t.zero_grad()
            loss = _loss(_logits(model, batch, p), batch.y, cfg.loss)
            if not np.isfinite(loss.item()):
                raise NonFiniteLossError(
                    f"loss is {loss.item()} at epoch {epoch} (strategy {strategy.name}, "
                    f"lr {cfg.learning_rate}); lower the learning rate")
            loss.backward()
            grads = [t.grad.copy() for t in trainable]
            if cfg.backtracking:
                step = _backtrack(model, batch, p, trainable, grads, loss.item(), cfg,
                                  min(cfg.learning_rate, 2.0 * step))
            else:
                for t, g in zip(trainable, grads):
                    t.values -= cfg.learning_rate * g
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            if not np.isfinite(snapshot(epoch)):
                raise NonFiniteLossError(f"training loss diverged at epoch {epoch} "
                                         f"(lr {cfg.learning_rate}); lower the learning rate")
    _set_requires_grad(model, True)
    out_prompt = PromptVector(p.values.copy()) if p is not None else None
    return TrainResult(model, out_prompt, curve, strategy)


def _backtrack(model, batch, p, trainable, grads, loss0, cfg, s) -> float:
    """Armijo step along the negative gradient; returns the accepted step size."""
    start = [t.values.copy() for t in trainable]
    gnorm2 = sum(float(np.sum(g * g)) for g in grads)
    _set_requires_grad(model, False)
    pt_req = p.requires_grad if p is not None else None
    if p is not None:
        p.requires_grad = False
    try:
        while s > 1e-30:
            for t, v, g in zip(trainable, start, grads):
                t.values[...] = v - s * g
            val = _loss(_logits(model, batch, p), batch.y, cfg.loss).item()
            if np.isfinite(val) and val <= loss0 - 1e-4 * s * gnorm2:
                return s
            s *= 0.5
        for t, v in zip(trainable, start):
            t.values[...] = v
        return s
    finally:
        _set_requires_grad(model, True)
        if p is not None:
            p.requires_grad = pt_req
            p.grad = np.zeros_like(p.values)


# --------------------------------------------------------------------------
# toy edge-prediction pre-training


def _edge_pairs(graphs: Sequence[Graph], rng: np.random.Generator | None):
    """Global (u, v, label) arrays: every edge once, plus equally many sampled non-edges."""
    us, vs, ys = [], [], []
    offset = 0
    for g in graphs:
        n = g.node_count
        edges = g.edges()
        for u, v in edges:
            us.append(offset + u)
            vs.append(offset + v)
            ys.append(1)
        non = [(u, v) for u in range(n) for v in range(u + 1, n) if g.adjacency[u, v] == 0]
        if non and edges:
            k = min(len(edges), len(non))
            pick = rng.choice(len(non), size=k, replace=False) if rng is not None else range(k)
            for i in pick:
                us.append(offset + non[i][0])
                vs.append(offset + non[i][1])
                ys.append(0)
        offset += n
    return np.asarray(us), np.asarray(vs), np.asarray(ys, dtype=np.float64)


def _selector(index: np.ndarray, n: int) -> np.ndarray:
    s = np.zeros((index.size, n))
    s[np.arange(index.size), index] = 1.0
    return s


def _edge_scores(model: GnnModel, graphs: Sequence[Graph], us, vs) -> Tensor:
    structure = Structure.batch(graphs)
    n = structure.adjacency.shape[0]
    h = node_embeddings(model, structure, np.vstack([g.features for g in graphs]))
    return T.rowwise_dot(T.matmul(_selector(us, n), h), T.matmul(_selector(vs, n), h))


def edge_prediction_auc(model: GnnModel, graphs: Sequence[Graph], seed: int = 0) -> float:
    """AUC of dot-product edge scores against an equal number of sampled non-edges."""
    m = model.copy()
    _set_requires_grad(m, False)
    us, vs, ys = _edge_pairs(graphs, np.random.default_rng(seed))
    return evaluate_auc(_edge_scores(m, graphs, us, vs).values, ys)


def pretrain_edge_prediction(model: GnnModel, ds: Dataset, cfg: TrainConfig) -> GnnModel:
    """Train all backbone parameters to score edges above sampled non-edges.

    Uses the ``train`` split (every graph if the dataset has no split). The
    head is left as initialised. Returns a new model; ``model`` is untouched.
    """
    graphs = ds.subset("train") or list(ds.graphs)
    if not any(g.edge_count for g in graphs):
        raise ValueError("edge-prediction pre-training needs graphs with edges")
    model = model.copy()
    unfreeze(model, ["backbone"])
    if model.head is not None:
        freeze(model, ["head"])
    _set_requires_grad(model, True)
    trainable = [t for n, t in model.params.items() if not model.frozen[n]]
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(graphs))
        for s in range(0, len(order), cfg.batch_size):
            batch = [graphs[i] for i in order[s:s + cfg.batch_size]]
            us, vs, ys = _edge_pairs(batch, rng)
            if ys.size == 0:
                continue
            for t in trainable:
                t.zero_grad()
            loss = T.bce_loss(_edge_scores(model, batch, us, vs), ys)
            if not np.isfinite(loss.item()):
                raise NonFiniteLossError(f"edge-prediction loss is {loss.item()} at epoch {epoch}")
            loss.backward()
            for t in trainable:
                t.values -= cfg.learning_rate * t.grad
        log.debug("pretrain epoch %d done", epoch)
    if model.head is not None:
        unfreeze(model, ["head"])
    return model


# --------------------------------------------------------------------------
# strategy comparison


@dataclass
class ComparisonRow:
    strategy: str
    mean: float
    std: float
    trainable_params: int
    total_params: int
    values: list[float] = field(default_factory=list)


@dataclass
class Comparison:
    rows: list[ComparisonRow]
    curves: dict[tuple[str, int], MetricCurve]
    metric: str = "auc"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strategy", "mean", "std", "trainable_params", "total_params"])
            for r in self.rows:
                w.writerow([r.strategy, repr(r.mean), repr(r.std), r.trainable_params, r.total_params])


def _run_one(args):
    backbone, strategy, ds, cfg, seed = args
    run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
    model = prepare_model(backbone, strategy, seed=seed)
    result = train(model, strategy, ds, run_cfg)
    return result.curve


def compare_strategies(backbone: GnnModel, ds: Dataset, strategies: Sequence[Strategy],
                       cfg: TrainConfig, n_seeds: int = 5, workers: int = 1) -> Comparison:
    """Train every strategy for ``n_seeds`` seeds (cfg.seed, cfg.seed + 1, ...).

    Rows report the mean and population standard deviation of the final test
    metric and the strategy's parameter accounting.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    jobs = [(backbone, s, ds, cfg, cfg.seed + i) for s in strategies for i in range(n_seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            curves = list(pool.map(_run_one, jobs))
    else:
        curves = [_run_one(j) for j in jobs]
    rows, by_key = [], {}
    for i, s in enumerate(strategies):
        chunk = curves[i * n_seeds:(i + 1) * n_seeds]
        values = [c.final.test_metric for c in chunk]
        for k, c in enumerate(chunk):
            by_key[(s.name, cfg.seed + k)] = c
        trainable, total = strategy_param_counts(backbone, s)
        rows.append(ComparisonRow(s.name, float(np.mean(values)), float(np.std(values)),
                                  trainable, total, values))
    return Comparison(rows, by_key, cfg.metric)
