"""Sensitivity-guided structured pruning and int8 post-training quantization for small conv graphs."""
from .estimators import PostTrainingQuantizer, SensitivityAnalyzer, StructuredPruner
from .graph import InputSpec, LayerNode, ModelGraph
from .zoo import build_model

__version__ = "0.1.0"

__all__ = ["PostTrainingQuantizer", "SensitivityAnalyzer", "StructuredPruner", "InputSpec", "LayerNode",
           "ModelGraph", "build_model", "__version__"]
