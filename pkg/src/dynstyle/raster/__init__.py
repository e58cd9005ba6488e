from .project import Splat2D, intersect_depth, project, project_arrays
from .render import (
    GaussianParams,
    RenderOutput,
    SplatBatch,
    composite,
    composite_backward,
    render_backward,
    render_params,
    render_scene,
    render_trajectory,
)
from .trajectory import helix_trajectory

__all__ = [
    "GaussianParams", "RenderOutput", "Splat2D", "SplatBatch", "composite", "composite_backward",
    "helix_trajectory", "intersect_depth", "project", "project_arrays", "render_backward",
    "render_params", "render_scene", "render_trajectory",
]
