"""Heightfield ray casting with Hapke shading."""

from .frame import (GBuffer, RenderConfig, RenderError, read_depth, read_image, render_frame,
                    render_gbuffer, render_radiance, render_trajectory, to_digital, worker_threads,
                    write_depth, write_image)
from .hapke import HapkeDomainError, HapkeParams, hapke_brdf, hapke_reflectance
from .scene import Hit, Scene, shade, trace_ray, trace_rays

__all__ = [
    "GBuffer", "HapkeDomainError", "HapkeParams", "Hit", "RenderConfig", "RenderError", "Scene",
    "hapke_brdf", "hapke_reflectance", "read_depth", "read_image", "render_frame", "render_gbuffer", "render_radiance",
    "render_trajectory", "shade", "to_digital", "trace_ray", "trace_rays",
    "worker_threads", "write_depth", "write_image",
]
