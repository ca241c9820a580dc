"""Causal substructure discovery for few-shot molecular property prediction.

A numpy implementation of context-graph meta-learning with learnable
atom masks, backdoor-style confounder intervention and the evaluation
tools (ROC-AUC, explanation quality, fidelity, JSD consistency,
conditional mutual information) used to inspect it.
"""

from .autodiff import ParameterStore, Tensor
from .fragment import fragment
from .meta import MetaConfig, MetaLearner
from .model import ModelConfig
from .smiles import Dataset, parse, serialize
from .synth import SynthSpec, gen_dataset

__all__ = [
    "Dataset",
    "MetaConfig",
    "MetaLearner",
    "ModelConfig",
    "ParameterStore",
    "SynthSpec",
    "Tensor",
    "fragment",
    "gen_dataset",
    "parse",
    "serialize",
]
__version__ = "0.1.0"
