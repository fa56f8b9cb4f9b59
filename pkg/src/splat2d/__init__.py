"""2D Gaussian splatting for arbitrary-scale image resampling.

Component -> implementation:

* gauss_core   -> :mod:`splat2d.gauss`
* splat_render -> :mod:`splat2d.render` (kernels in ``_ckernels`` / ``_pykernels``)
* autograd_opt -> :mod:`splat2d.autograd`
* kernel_bank  -> :mod:`splat2d.bank`
* sr_pipeline  -> :mod:`splat2d.pipeline`
* harness_cli  -> :mod:`splat2d.cli`, :mod:`splat2d.experiments`,
  :mod:`splat2d.imageio`, :mod:`splat2d.metrics`
"""

from ._backend import available as available_backends, name as backend_name, set_backend, use_backend
from .autograd import backward, fit_field, loss_l1, step
from .bank import GaussianBank, gumbel_soft_select, hard_select, init_bank, straight_through_grad
from .errors import (
    DomainError,
    EmptyFieldError,
    FormatError,
    InvalidParameterError,
    NumericalError,
    ShapeError,
    Splat2DError,
    ValidationError,
)
from .gauss import Gaussian2D, GaussianField, Normalization, activate, eval_density, field_from_grid, render_point
from .imageio import load_image, save_image
from .metrics import psnr
from .pipeline import PipelineConfig, PipelineModel, bicubic_resample, fold, unfold, upsample
from .render import FeatureGrid, RenderConfig, render_affine, render_at_scale, render_dense, render_tiled

__version__ = "0.1.0"

__all__ = [
    "DomainError", "EmptyFieldError", "FeatureGrid", "FormatError", "Gaussian2D", "GaussianBank", "GaussianField",
    "InvalidParameterError", "Normalization", "NumericalError", "PipelineConfig", "PipelineModel", "RenderConfig",
    "ShapeError", "Splat2DError", "ValidationError", "activate", "available_backends", "backend_name", "backward",
    "bicubic_resample", "eval_density", "field_from_grid", "fit_field", "fold", "gumbel_soft_select", "hard_select",
    "init_bank", "load_image", "loss_l1", "psnr", "render_affine", "render_at_scale", "render_dense", "render_point",
    "render_tiled", "save_image", "set_backend", "step", "straight_through_grad", "unfold", "upsample", "use_backend",
]
