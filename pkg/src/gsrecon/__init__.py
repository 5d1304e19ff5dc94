"""Feed-forward sparse-view reconstruction into pixel-aligned 3D Gaussians.

Subpackages: tensor (autodiff substrate), cameras, gaussians, render,
network, optim, training, data, mesh, metrics, config, cli.
"""

from .cameras import (Camera, RayMap, fibonacci_cameras, pixel_rays,
                      plucker_embed, unproject)
from .gaussians import (AttributeMap, GaussianSet, activate, export_ply,
                        import_ply, merge_views, split_views)
from .metrics import MetricReport, chamfer_fscore, psnr, ssim
from .network import (NetworkConfig, init_weights, load_checkpoint,
                      reconstruct, save_checkpoint)
from .render import (ProjectedGaussian, RenderOutput, covariance3d, project,
                     rasterize, reference_rasterize, render_forward)
from .tensor import Tape, Value, apply, grad_check
from .training import (LossReport, TrainConfig, compute_loss,
                       deferred_backward, sso_fit, train_loop)

__version__ = "0.1.0"

__all__ = [
    "Camera", "RayMap", "fibonacci_cameras", "pixel_rays", "plucker_embed",
    "unproject", "AttributeMap", "GaussianSet", "activate", "export_ply",
    "import_ply", "merge_views", "split_views", "MetricReport",
    "chamfer_fscore", "psnr", "ssim", "NetworkConfig", "init_weights",
    "load_checkpoint", "reconstruct", "save_checkpoint", "ProjectedGaussian",
    "RenderOutput", "covariance3d", "project", "rasterize",
    "reference_rasterize", "render_forward", "Tape", "Value", "apply",
    "grad_check", "LossReport", "TrainConfig", "compute_loss",
    "deferred_backward", "sso_fit", "train_loop",
]
