"""Fiber orientation distribution estimation by spherical deconvolution.

Implements blockwise James-Stein shrinkage (BJS), SHridge and SCSD
estimators, peak extraction, a synthetic-experiment harness and
group-level statistics.
"""
from .estimators import (
    DeconvolutionDesign,
    FitConfig,
    bjs_estimate,
    bjs_shrink,
    bjs_transform,
    estimate_noise_variance,
    sharpen_one_step,
    shridge_bic_select,
    shridge_fit,
    super_csd,
)
from .kernels import BACKEND
from .model import (
    FiberConfiguration,
    ResponseKernel,
    add_rician_noise,
    build_r_matrix,
    estimate_response,
    fractional_anisotropy,
    response_sh_coefficients,
    single_tensor_fit,
    synthesize_signal,
)
from .sphere import GradientTable, SphericalGrid, acute_angle_deg, eval_sh_basis, icosphere_grid

__version__ = "0.1.0"
