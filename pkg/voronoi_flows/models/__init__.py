from .cell_map import forward, inverse, ray_exit
from .dequant import DequantModel, JointDensity, dequantize, elbo, log_q, quantize, train
from .flows import AffineCoupling, FlowDensity, FlowStack
from .mixture import MixtureModel, mixture_logprob, mixture_sample, train_mixture
from .tessellation import Tessellation, new_tessellation

__all__ = [
    "AffineCoupling",
    "DequantModel",
    "FlowDensity",
    "FlowStack",
    "JointDensity",
    "MixtureModel",
    "Tessellation",
    "dequantize",
    "elbo",
    "forward",
    "inverse",
    "log_q",
    "mixture_logprob",
    "mixture_sample",
    "new_tessellation",
    "quantize",
    "ray_exit",
    "train",
    "train_mixture",
]
