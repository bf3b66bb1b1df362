"""Vision Transformer training with a masked-reconstruction auxiliary task."""

from .config import ExperimentSpec, parse_spec
from .diag import build_report, hessian_vector_product, lanczos_spectrum
from .flops import estimate_flops
from .ssat import DecoderConfig, joint_loss, reconstruction_loss, ssat_step_forward
from .train import TrainConfig, run_experiment
from .vit import EncoderConfig, VisionTransformer, init_vit

__all__ = [
    "DecoderConfig",
    "EncoderConfig",
    "ExperimentSpec",
    "TrainConfig",
    "VisionTransformer",
    "build_report",
    "estimate_flops",
    "hessian_vector_product",
    "init_vit",
    "joint_loss",
    "lanczos_spectrum",
    "parse_spec",
    "reconstruction_loss",
    "run_experiment",
    "ssat_step_forward",
]

__version__ = "0.1.0"
