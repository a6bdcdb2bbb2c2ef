"""Graph prompt feature tuning for frozen GNN backbones."""

from graphprompt.errors import (CheckpointError, DatasetFormatError, DegenerateDenominatorError,
                                GraphError, NonFiniteLossError, NumericError, ShapeError,
                                SolverPreconditionError)
from graphprompt.gnn import (GnnModel, HeadSpec, LayerSpec, build_model, count_params, freeze,
                             linear_gin, load_checkpoint, model_forward, save_checkpoint, unfreeze)
from graphprompt.graph import (ComponentEdit, Composite, Dataset, FeatureTransform, Graph,
                               IsolatedComponentTransform, LinkTransform, apply_transform,
                               connected_components, generate_synthetic_dataset, load_dataset,
                               permute, save_dataset)
from graphprompt.prompt import (EquivalenceReport, PromptVector, apply_prompt, fit_prompt,
                                solve_prompt, verify_equivalence)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ComponentEdit",
    "Composite",
    "Dataset",
    "DatasetFormatError",
    "DegenerateDenominatorError",
    "EquivalenceReport",
    "FeatureTransform",
    "GnnModel",
    "Graph",
    "GraphError",
    "HeadSpec",
    "IsolatedComponentTransform",
    "LayerSpec",
    "LinkTransform",
    "NonFiniteLossError",
    "NumericError",
    "PromptVector",
    "ShapeError",
    "SolverPreconditionError",
    "apply_prompt",
    "apply_transform",
    "build_model",
    "connected_components",
    "count_params",
    "fit_prompt",
    "freeze",
    "generate_synthetic_dataset",
    "linear_gin",
    "load_checkpoint",
    "load_dataset",
    "model_forward",
    "permute",
    "save_checkpoint",
    "save_dataset",
    "solve_prompt",
    "unfreeze",
    "verify_equivalence",
]
