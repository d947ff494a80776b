"""GroupNL-family convolutions on a small NumPy tensor core, with cost modelling and verification tools."""
from .cost import comm_cost, layer_cost, nlf_diversity
from .errors import GroupNLError, InvalidSpec, ShapeMismatch, UnknownArch
from .gradcheck import count_trainable, finite_diff_check
from .layers import LayerKind, LayerSpec, build_layer, layer_forward
from .nlf import NlfKind, NlfSpec, sample_hyperset
from .tensor import ConvGeometry, conv2d, conv2d_direct
from .zoo import build_model, forward_model, instantiate, model_cost

__version__ = "0.1.0"

__all__ = [
    "ConvGeometry",
    "GroupNLError",
    "InvalidSpec",
    "LayerKind",
    "LayerSpec",
    "NlfKind",
    "NlfSpec",
    "ShapeMismatch",
    "UnknownArch",
    "build_layer",
    "build_model",
    "comm_cost",
    "conv2d",
    "conv2d_direct",
    "count_trainable",
    "finite_diff_check",
    "forward_model",
    "instantiate",
    "layer_cost",
    "layer_forward",
    "model_cost",
    "nlf_diversity",
    "sample_hyperset",
]
