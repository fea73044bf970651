"""View-dependent Gaussian splatting on the CPU."""
from .encoding import HashGrid
from .geometry import Camera, Gaussian3D, GaussianCloud, covariance, viewing_direction
from .mlp import Modulation, ModulationVariant, TinyMLP, apply_modulation, modulate
from .rasterizer import Gradients, RenderOutput, project, render, render_backward

__version__ = "0.1.0"
