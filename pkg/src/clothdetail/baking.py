"""Bake tangent-space normal maps from UV-parameterized garment meshes.

Convention: u maps to columns, v to rows (row r covers v in
[r/H, (r+1)/H]); pixel centers sit at (i + 0.5)/size. Baked values are the
smooth (area-weighted) vertex normals expressed in the interpolated
per-vertex tangent frame, so a flat patch reads (0, 0, 1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import BakeError
from .mesh import GarmentMesh, vertex_normals, vertex_tangent_frames
from .normal_maps import NormalMapFrame, renormalize

log = logging.getLogger(__name__)


@dataclass
class BakeStats:
    degenerate_uv_faces: int
    overlap_pixels: int
    covered_pixels: int


def uv_to_pixel(uv: np.ndarray, height: int, width: int) -> np.ndarray:
    """Map unit-square UVs to fractional (row, col) pixel coordinates."""
    out = np.empty(uv.shape[:-1] + (2,), dtype=np.float64)
    out[..., 0] = uv[..., 1] * height - 0.5
    out[..., 1] = uv[..., 0] * width - 0.5
    return out


def bake_normal_map_with_stats(
    mesh: GarmentMesh,
    resolution: tuple[int, int],
    pixels_per_meter: float,
    frame_index: int = 0,
    overlap_tolerance_px: int = 0,
) -> tuple[NormalMapFrame, BakeStats]:
    """Rasterize the mesh into a tangent-space normal map plus coverage mask.

    Zero-area UV triangles are skipped (counted in the stats); charts that
    overlap by more than `overlap_tolerance_px` strictly-interior pixels
    raise a BakeError.
    """
    mesh.validate()
    height, width = int(resolution[0]), int(resolution[1])
    if height <= 0 or width <= 0:
        raise BakeError(f"resolution must be positive, got {resolution}")
    if pixels_per_meter <= 0:
        raise BakeError("pixels_per_meter must be positive")
    if mesh.num_faces == 0:
        frame = NormalMapFrame(
            normals=np.zeros((height, width, 3), dtype=np.float32),
            mask=np.zeros((height, width), dtype=bool),
            pixels_per_meter=pixels_per_meter,
            frame_index=frame_index,
        )
        return frame, BakeStats(0, 0, 0)

    vn = vertex_normals(mesh)
    t, b, n = vertex_tangent_frames(mesh)
    # 12 interpolated channels per corner: shading normal + tangent frame.
    corner_attrs = np.concatenate(
        [arr[mesh.faces] for arr in (vn, t, b, n)], axis=2
    )
    tri_px = uv_to_pixel(mesh.uv, height, width)
    accum, owner, overlap, degenerate = kernels.rasterize_attributes(
        tri_px, corner_attrs, height, width
    )
    if overlap > overlap_tolerance_px:
        raise BakeError(
            f"UV charts overlap on {overlap} pixels "
            f"(tolerance {overlap_tolerance_px}); fix the parameterization"
        )
    if degenerate:
        log.warning("skipped %d degenerate UV triangles during bake", degenerate)

    mask = owner >= 0
    shading = accum[..., 0:3]
    tan = accum[..., 3:6]
    bit = accum[..., 6:9]
    geo = accum[..., 9:12]
    # Orthonormalize the interpolated frame: geometric normal first, tangent
    # projected, bitangent rebuilt with the interpolated handedness.
    geo_n = renormalize(geo, mask).astype(np.float64)
    tan = tan - (tan * geo_n).sum(axis=-1, keepdims=True) * geo_n
    tan = renormalize(tan, mask).astype(np.float64)
    crossed = np.cross(geo_n, tan)
    handed = np.where((crossed * bit).sum(axis=-1, keepdims=True) < 0, -1.0, 1.0)
    bit = crossed * handed
    tangent_space = np.stack(
        [
            (shading * tan).sum(axis=-1),
            (shading * bit).sum(axis=-1),
            (shading * geo_n).sum(axis=-1),
        ],
        axis=-1,
    )
    normals = renormalize(tangent_space, mask)
    frame = NormalMapFrame(
        normals=normals,
        mask=mask,
        pixels_per_meter=pixels_per_meter,
        frame_index=frame_index,
    )
    stats = BakeStats(
        degenerate_uv_faces=int(degenerate),
        overlap_pixels=int(overlap),
        covered_pixels=int(mask.sum()),
    )
    return frame, stats


def bake_normal_map(
    mesh: GarmentMesh,
    resolution: tuple[int, int],
    pixels_per_meter: float,
    frame_index: int = 0,
    overlap_tolerance_px: int = 0,
) -> NormalMapFrame:
    frame, _ = bake_normal_map_with_stats(
        mesh, resolution, pixels_per_meter, frame_index, overlap_tolerance_px
    )
    return frame


def bake_debug_buffers(
    mesh: GarmentMesh, resolution: tuple[int, int]
) -> dict[str, np.ndarray]:
    """Per-pixel interpolants for diagnostics: surface position, frame axes.

    Intended for tests and debugging; the production path only keeps the
    tangent-space normal.
    """
    height, width = resolution
    vn = vertex_normals(mesh)
    t, b, n = vertex_tangent_frames(mesh)
    corner_attrs = np.concatenate(
        [arr[mesh.faces] for arr in (mesh.vertices, vn, t, b, n)], axis=2
    )
    tri_px = uv_to_pixel(mesh.uv, height, width)
    accum, owner, _, _ = kernels.rasterize_attributes(tri_px, corner_attrs, height, width)
    mask = owner >= 0
    geo_n = renormalize(accum[..., 12:15], mask).astype(np.float64)
    tan = accum[..., 6:9]
    tan = tan - (tan * geo_n).sum(axis=-1, keepdims=True) * geo_n
    tan = renormalize(tan, mask).astype(np.float64)
    crossed = np.cross(geo_n, tan)
    handed = np.where((crossed * accum[..., 9:12]).sum(axis=-1, keepdims=True) < 0, -1.0, 1.0)
    return {
        "position": accum[..., 0:3],
        "shading_normal": accum[..., 3:6],
        "tangent": tan,
        "bitangent": crossed * handed,
        "geometric_normal": geo_n,
        "mask": mask,
        "owner": owner,
    }


def mean_uv_scale(mesh: GarmentMesh) -> float:
    """Average meters per UV unit, from edge-length ratios."""
    tri = mesh.vertices[mesh.faces]
    uv = mesh.uv
    total, weight = 0.0, 0.0
    for i, j in ((0, 1), (1, 2), (2, 0)):
        d3 = np.linalg.norm(tri[:, i] - tri[:, j], axis=1)
        d2 = np.linalg.norm(uv[:, i] - uv[:, j], axis=1)
        ok = d2 > 1e-12
        total += (d3[ok] / d2[ok]).sum()
        weight += ok.sum()
    if weight == 0:
        raise BakeError("mesh has no usable UV edges")
    return float(total / weight)


def suggest_resolution(mesh: GarmentMesh, pixels_per_meter: float) -> tuple[int, int]:
    """Square resolution so that one pixel spans 1/pixels_per_meter meters."""
    side = int(round(mean_uv_scale(mesh) * pixels_per_meter))
    return max(side, 1), max(side, 1)
