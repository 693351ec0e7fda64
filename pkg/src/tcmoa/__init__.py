"""Task-routed mixture-of-adapters image fusion at desk scale.

A frozen windowed-attention ViT autoencoder hosts small per-layer fusion
modules: task-specific routers pick sparse mixtures from a shared adapter
bank, the mixture emits per-token fusion prompts, and the prompts blend two
source feature streams under a complementarity penalty. Everything runs on
an in-package float64 autodiff engine so gradients are checkable against
finite differences.
"""

from .autodiff import Tensor, GradMap, backward, finite_difference_check

__all__ = ["Tensor", "GradMap", "backward", "finite_difference_check"]

__version__ = "0.1.0"
