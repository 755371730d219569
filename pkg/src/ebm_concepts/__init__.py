"""Energy-based concept models with logical composition.

Train conditional energy networks on synthetic concept datasets, compose
independently trained models with AND / OR / NOT operators (recursively
nested), sample the compositions with Langevin dynamics, continue training
against frozen predecessors, and infer concept parameters from observations
by energy minimization.
"""

from .compose import (Bias, CompositionError, Conj, Disj, Leaf, Neg,
                      expr_energy, expr_energy_batch, expr_grad_x)
from .dsl import ParseError, format_expr, parse_expr
from .models import (Arch, CheckpointError, ConceptCode, ConstantModel, EnergyModel,
                     ModelError, QuadraticModel, energy, grad_x, init_model,
                     load_checkpoint, save_checkpoint)
from .sampler import (EmptyBufferError, ReplayBuffer, SamplerConfig, SamplerError,
                      langevin_step, run_chain)
from .tensor import ShapeError, Tensor, grad_check, spectral_norm_estimate
from .trainer import (TrainBatch, TrainerConfig, TrainingDiverged, adam_update,
                      cd_gradient, continual_train, train, train_joint_baseline)

__all__ = [
    "Arch", "Bias", "CheckpointError", "CompositionError", "ConceptCode",
    "Conj", "ConstantModel", "Disj", "EmptyBufferError", "EnergyModel", "Leaf",
    "ModelError", "Neg", "ParseError", "QuadraticModel", "ReplayBuffer",
    "SamplerConfig", "SamplerError", "ShapeError", "Tensor", "TrainBatch",
    "TrainerConfig", "TrainingDiverged", "adam_update", "cd_gradient",
    "continual_train", "energy", "expr_energy", "expr_energy_batch",
    "expr_grad_x", "format_expr", "grad_check", "grad_x", "init_model",
    "langevin_step", "load_checkpoint", "parse_expr", "run_chain",
    "save_checkpoint", "spectral_norm_estimate", "train", "train_joint_baseline",
]

__version__ = "0.1.0"
