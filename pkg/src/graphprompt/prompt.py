"""Graph prompt feature: one learnable vector added to every node's features.

Includes the closed-form prompt that reproduces a graph-level transformation
on a single-layer linear GIN, an equivalence checker, and a gradient-descent
fitter for models where no closed form exists.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from graphprompt import tensor as T
from graphprompt.errors import (CheckpointError, DegenerateDenominatorError, GraphError,
                                NonFiniteLossError, ShapeError, SolverPreconditionError)
from graphprompt.gnn import GnnModel, Structure, embed
from graphprompt.graph import (Composite, FeatureTransform, Graph, IsolatedComponentTransform,
                               LinkTransform, TransformSpec, apply_transform, check_removals)
from graphprompt.tensor import Tensor

PROMPT_VERSION = 1


@dataclass
class PromptVector:
    values: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("prompt has non-finite entries")
        self.values = v

    @property
    def dim(self) -> int:
        return self.values.size

    @classmethod
    def zeros(cls, dim: int) -> "PromptVector":
        return cls(np.zeros(dim))

    def as_tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.values.reshape(1, -1).copy(), requires_grad=requires_grad)

    def __add__(self, other: "PromptVector") -> "PromptVector":
        return PromptVector(self.values + other.values)


def apply_prompt(g: Graph, p: PromptVector) -> Graph:
    if p.dim != g.feature_dim:
        raise ShapeError(f"prompt has dim {p.dim}, graph has F={g.feature_dim}")
    return g.replace(features=g.features + p.values[None, :])


def prompted_features(x, p: Tensor) -> Tensor:
    """Differentiable ``X + 1 p``; gradient w.r.t. ``p`` is the column sum."""
    return T.broadcast_add_row(T.as_tensor(x), p)


def save_prompt(p: PromptVector, path) -> None:
    Path(path).write_text(json.dumps({"version": PROMPT_VERSION, "dim": p.dim,
                                      "p": p.values.tolist()}) + "\n")


def load_prompt(path) -> PromptVector:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON prompt file ({exc.msg})") from exc
    if not isinstance(doc, dict) or doc.get("version") != PROMPT_VERSION:
        raise CheckpointError(f"{path}: unsupported prompt file version")
    values = doc.get("p")
    if not isinstance(values, list) or len(values) != doc.get("dim"):
        raise CheckpointError(f"{path}: 'p' must be a list of length 'dim'")
    return PromptVector(np.asarray(values, dtype=np.float64))


# --------------------------------------------------------------------------
# closed-form solver


def solver_grade_violations(model: GnnModel, readouts=("sum",)) -> list[str]:
    problems = []
    if len(model.layers) != 1:
        problems.append(f"model must have exactly one layer (has {len(model.layers)})")
    layer = model.layers[0]
    if layer.kind != "gin":
        problems.append(f"layer must be GIN (got {layer.kind.upper()}; use fit_prompt)")
    if layer.update != "linear":
        problems.append("GIN update must be a single linear map, not an MLP")
    if layer.bias:
        problems.append("linear GIN update must have no bias")
    if model.activation != "none":
        problems.append(f"activation must be 'none' (got {model.activation})")
    if model.readout not in readouts:
        problems.append(f"readout must be {' or '.join(readouts)} (got {model.readout})")
    return problems


def _epsilon(model: GnnModel) -> float:
    return float(model.params["layer0.eps"].values[0, 0])


def prompt_denominator(g: Graph, model: GnnModel) -> float:
    """Total degree + N + N * eps: how much one unit of prompt moves the sum embedding."""
    eps = _epsilon(model)
    n = g.node_count
    return float(g.degrees.sum() + n + n * eps)


def _aggregate_sum(adjacency: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Column sums of (A + (1 + eps) I) X."""
    return (adjacency @ x).sum(axis=0) + (1.0 + eps) * x.sum(axis=0)


def _numerator(g: Graph, spec: TransformSpec, eps: float) -> np.ndarray:
    """Change of the pre-weight sum aggregate caused by ``spec`` applied to ``g``."""
    if isinstance(spec, FeatureTransform):
        if spec.delta_features.shape != g.features.shape:
            raise GraphError(f"delta_features shape {spec.delta_features.shape} "
                             f"!= features shape {g.features.shape}")
        b = g.adjacency @ spec.delta_features + (1.0 + eps) * spec.delta_features
        return b.sum(axis=0)
    if isinstance(spec, LinkTransform):
        apply_transform(g, spec)  # validates delta entries
        return (spec.delta_adjacency @ g.features).sum(axis=0)
    if isinstance(spec, IsolatedComponentTransform):
        check_removals(g, spec.removals)
        total = np.zeros(g.feature_dim)
        for edit in spec.edits:
            if edit.indicator == 1:
                comp = edit.component
                if comp.feature_dim != g.feature_dim:
                    raise GraphError(f"added component has F={comp.feature_dim}, host has F={g.feature_dim}")
                a_k, x_k = comp.adjacency, comp.features
            else:
                idx = np.asarray(edit.nodes)
                a_k, x_k = g.adjacency[np.ix_(idx, idx)], g.features[idx]
            total += edit.indicator * _aggregate_sum(a_k, x_k, eps)
        return total
    if isinstance(spec, Composite):
        total = np.zeros(g.feature_dim)
        current = g
        for step in spec.steps:
            total += _numerator(current, step, eps)
            current = apply_transform(current, step)
        return total
    raise TypeError(f"unknown transform spec {type(spec).__name__}")


def changes_node_count(spec: TransformSpec) -> bool:
    if isinstance(spec, IsolatedComponentTransform):
        return bool(spec.edits)
    if isinstance(spec, Composite):
        return any(changes_node_count(s) for s in spec.steps)
    return False


def solve_prompt(g: Graph, spec: TransformSpec, model: GnnModel, **fit_kwargs) -> PromptVector:
    """Closed-form prompt p* with f(A, X + p*) = f(spec(A, X)) exactly.

    Every step contributes the change it makes to the column sums of
    ``(A + (1 + eps) I) X`` (measured on the graph it is applied to), and the
    total is divided by ``D + N + N * eps`` of the input graph. Requires a
    single-layer bias-free linear GIN with no activation. Mean readout is
    accepted when the node count is preserved; otherwise the call falls back
    to :func:`fit_prompt` with a warning.
    """
    problems = solver_grade_violations(model, readouts=("sum", "mean"))
    if problems:
        raise SolverPreconditionError("model is not solver-grade: " + "; ".join(problems))
    if g.feature_dim != model.in_dim:
        raise ShapeError(f"graph has F={g.feature_dim}, model expects {model.in_dim}")
    if model.readout == "mean" and changes_node_count(spec):
        warnings.warn("no closed form for mean readout under node-count-changing "
                      "transformations; fitting the prompt by gradient descent",
                      RuntimeWarning, stacklevel=2)
        return fit_prompt(model, g, spec, **fit_kwargs).prompt
    denom = prompt_denominator(g, model)
    if denom == 0.0:
        raise DegenerateDenominatorError(
            f"D + N + N*eps = 0 for this graph (eps={_epsilon(model)}); no prompt solves it")
    return PromptVector(_numerator(g, spec, _epsilon(model)) / denom)


def step_prompts(g: Graph, spec: Composite, model: GnnModel) -> list[PromptVector]:
    """Per-step prompts of a composite, each solved on its running intermediate graph.

    Each step's own closed form is rescaled from the intermediate graph's
    denominator to the input graph's, so the prompts add up to the prompt of
    the whole composite.
    """
    base = prompt_denominator(g, model)
    out, current = [], g
    for step in spec.steps:
        p = solve_prompt(current, step, model)
        out.append(PromptVector(p.values * (prompt_denominator(current, model) / base)))
        current = apply_transform(current, step)
    return out


# --------------------------------------------------------------------------
# verification


@dataclass
class EquivalenceReport:
    prompt_embedding: np.ndarray
    target_embedding: np.ndarray
    abs_error: float
    rel_error: float
    tolerance: float
    passed: bool

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} rel_error={self.rel_error:.3e} abs_error={self.abs_error:.3e} "
                f"tolerance={self.tolerance:.1e}")

    def to_dict(self) -> dict:
        return {"prompt_embedding": self.prompt_embedding.tolist(),
                "target_embedding": self.target_embedding.tolist(),
                "abs_error": self.abs_error, "rel_error": self.rel_error,
                "tolerance": self.tolerance, "passed": self.passed}


def graph_embedding(model: GnnModel, g: Graph) -> np.ndarray:
    if g.feature_dim != model.in_dim:
        raise ShapeError(f"graph has F={g.feature_dim}, model expects {model.in_dim}")
    return embed(model, Structure.of(g), g.features).values.reshape(-1)


def verify_equivalence(model: GnnModel, g: Graph, spec: TransformSpec, p: PromptVector,
                       tolerance: float = 1e-9) -> EquivalenceReport:
    prompted = graph_embedding(model, apply_prompt(g, p))
    target = graph_embedding(model, apply_transform(g, spec))
    abs_err = float(np.max(np.abs(prompted - target)))
    rel = abs_err / (float(np.max(np.abs(target))) + 1e-30)
    return EquivalenceReport(prompted, target, abs_err, rel, tolerance, rel <= tolerance)


# --------------------------------------------------------------------------
# gradient-based fitting


@dataclass
class FitResult:
    prompt: PromptVector
    residual: float
    initial_residual: float
    steps: int
    history: list[float] = field(default_factory=list)


def _frozen_copy(model: GnnModel) -> GnnModel:
    m = model.copy()
    for t in m.params.values():
        t.requires_grad = False
        t.grad = None
    return m


def fit_prompt(model: GnnModel, g: Graph, spec: TransformSpec, steps: int = 10_000,
               learning_rate: float = 1.0, target_residual: float = 0.0,
               backtracking: bool = True) -> FitResult:
    """Fit p by gradient descent on ||f(A, X + p) - f(spec(A, X))||^2, backbone frozen.

    Starts from p = 0. With ``backtracking`` each step starts from twice the
    last accepted step (capped at ``learning_rate``) and halves until the
    Armijo condition holds. ``history`` holds the best residual after each
    step; the returned prompt is the best one seen.
    """
    frozen = _frozen_copy(model)
    structure = Structure.of(g)
    x = Tensor(g.features)
    target = Tensor(graph_embedding(frozen, apply_transform(g, spec)).reshape(1, -1))

    def residual(p: Tensor) -> Tensor:
        d = T.sub(embed(frozen, structure, prompted_features(x, p)), target)
        return T.sum_all(T.mul(d, d))

    p = np.zeros((1, g.feature_dim))
    r = residual(Tensor(p)).item()
    if not np.isfinite(r):
        raise NonFiniteLossError("initial residual is not finite")
    initial = best_r = r
    best_p = p.copy()
    history = []
    step_size = learning_rate
    taken = 0
    while taken < steps and best_r > target_residual:
        pt = Tensor(p, requires_grad=True)
        out = residual(pt)
        r = out.item()
        out.backward()
        grad = pt.grad
        gnorm2 = float(np.sum(grad * grad))
        if gnorm2 == 0.0:
            break
        if backtracking:
            s = min(learning_rate, 2.0 * step_size)
            while True:
                cand = p - s * grad
                rc = residual(Tensor(cand)).item()
                if np.isfinite(rc) and rc <= r - 1e-4 * s * gnorm2:
                    break
                s *= 0.5
                if s < 1e-30:
                    break
            if s < 1e-30:
                break  # no descent left at float64 resolution
            step_size = s
        else:
            cand = p - learning_rate * grad
            rc = residual(Tensor(cand)).item()
            if not np.isfinite(rc):
                raise NonFiniteLossError(
                    f"residual became non-finite at step {taken + 1}; "
                    f"learning rate {learning_rate} diverges")
        taken += 1
        p = cand
        if rc < best_r:
            best_r, best_p = rc, p.copy()
        history.append(best_r)
    return FitResult(PromptVector(best_p), best_r, initial, taken, history)
