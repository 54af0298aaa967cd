from .functional import NonFiniteError, cross_entropy, sigmoid, softmax
from .graph import Graph, ParamTree, resolve_dtype
from .layers import (BatchNorm2d, Block, Conv2d, Flatten, Identity, Layer, Linear,
                     MaxPool2d, Parameter, ReLU)
from .optim import AdamW, AdamWConfig, OptimizerState, adamw_step

__all__ = [
    "AdamW", "AdamWConfig", "BatchNorm2d", "Block", "Conv2d", "Flatten", "Graph",
    "Identity", "Layer", "Linear", "MaxPool2d", "NonFiniteError", "OptimizerState",
    "ParamTree", "Parameter", "ReLU", "adamw_step", "cross_entropy", "resolve_dtype",
    "sigmoid", "softmax",
]
