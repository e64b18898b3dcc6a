from ..camera import Camera
from .observation import (
    BACKGROUND,
    CHANNEL_GROUPS,
    ObservationError,
    ObservationSet,
    load_observation,
    pack_observation,
    save_observation,
)
from .tracing import (
    PatchRender,
    RenderError,
    TRACE_EPS_HIT,
    TRACE_MAX_STEPS,
    patch_pixels_uv,
    render_patch,
    sphere_trace,
    trace_view,
)
from .meshing import Mesh, empty_mesh, evaluate_grid, load_ply, marching_cubes, save_ply
from .raster import rasterize, shade_front


def render_denoised(surf, mode: str = "full", patch_origin=None, patch_size: int = 32,
                    grid_res: int = 96, max_steps: int = TRACE_MAX_STEPS,
                    eps_hit: float = TRACE_EPS_HIT):
    """Observation estimate from an implicit surface.

    mode="patch": differentiable sphere-traced patch (PatchRender).
    mode="full": marching cubes + rasterization; returns (ObservationSet, Mesh).
    """
    if mode == "patch":
        if patch_origin is None:
            raise RenderError("patch mode needs patch_origin")
        return render_patch(surf, patch_origin, patch_size, max_steps, eps_hit)
    if mode == "full":
        mesh = marching_cubes(surf, grid_res)
        return rasterize(mesh, surf.camera), mesh
    raise RenderError(f"unknown render mode {mode!r}")
