"""Meta-learned initializations for per-scene Gaussian-splat refinement.

A self-contained pipeline: differentiable splat renderer, photometric loss,
inner-loop refiner, compact feed-forward scene predictor, first-order
multi-anchor outer training rules, and a synthetic-scene experiment harness.
"""

__version__ = "0.1.0"

from .scene import (  # noqa: F401
    Camera,
    FlatParams,
    GaussianScene,
    ImageBuffer,
    PhysicalAttributes,
    SceneLayout,
    activate,
    activate_backward,
    flatten,
    load_scene,
    save_scene,
    unflatten,
)
from .renderer import eval_sh, project, render_backward, render_forward  # noqa: F401
from .photometric import LossBreakdown, loss_LA, psnr, ssim  # noqa: F401
