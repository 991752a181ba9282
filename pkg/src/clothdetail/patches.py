"""Patch cropping, dihedral augmentation, and overlap-average merging.

Patches are square (128 px by default) and scale-normalized: the stored
`source_scale` is the pixels_per_meter at which the pixels are expressed.
Training pairs resample the coarse member onto the fine grid so one pixel
spans the same physical length in both.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CoverageError, CropError, DataError, ParameterError
from .normal_maps import NormalMapFrame, renormalize, sample_bilinear

PATCH_SIZE = 128


@dataclass
class Patch:
    """Square crop of a normal map; normals are signed components."""

    normals: np.ndarray          # (S, S, 3) float32
    mask: np.ndarray             # (S, S) bool
    origin: tuple[int, int]      # (row, col) in the source map
    source_scale: float          # pixels_per_meter

    @property
    def size(self) -> int:
        return self.normals.shape[0]

    def rgb(self) -> np.ndarray:
        return ((self.normals.astype(np.float64) + 1.0) * 0.5).astype(np.float32)

    def mask_fraction(self) -> float:
        return float(self.mask.mean())

    def validate(self) -> None:
        s = self.normals.shape[0]
        if self.normals.shape != (s, s, 3) or self.mask.shape != (s, s):
            raise DataError(f"bad patch shapes {self.normals.shape} / {self.mask.shape}")
        if not self.mask.any():
            raise DataError("patch has no masked pixels")
        lengths = np.linalg.norm(self.normals[self.mask].astype(np.float64), axis=-1)
        if lengths.size and (abs(lengths.min() - 1) > 1e-3 or abs(lengths.max() - 1) > 1e-3):
            raise DataError("patch normals not unit length under the mask")


def crop_patch(frame: NormalMapFrame, row: int, col: int, size: int = PATCH_SIZE) -> Patch:
    """Direct (unresampled) crop at the frame's own scale."""
    h, w = frame.shape
    if not (0 <= row <= h - size and 0 <= col <= w - size):
        raise CropError(f"crop ({row}, {col}) size {size} outside {h}x{w} map")
    return Patch(
        normals=frame.normals[row : row + size, col : col + size].copy(),
        mask=frame.mask[row : row + size, col : col + size].copy(),
        origin=(row, col),
        source_scale=frame.pixels_per_meter,
    )


def _resampled_coarse_patch(
    coarse: NormalMapFrame, row: int, col: int, size: int, target_scale: float,
    mask: np.ndarray,
) -> Patch:
    """Bilinear crop of `coarse` over the same physical region as a fine crop
    at (row, col), resampled to the target pixel scale."""
    scale = target_scale / coarse.pixels_per_meter
    rr = (np.arange(size, dtype=np.float64)[:, None] + row + 0.5) / scale - 0.5
    cc = (np.arange(size, dtype=np.float64)[None, :] + col + 0.5) / scale - 0.5
    rr = np.broadcast_to(rr, (size, size))
    cc = np.broadcast_to(cc, (size, size))
    values, _ = sample_bilinear(coarse.normals, coarse.mask, rr, cc)
    normals = renormalize(values, mask)
    return Patch(normals=normals, mask=mask.copy(), origin=(row, col), source_scale=target_scale)


def random_crop_pairs(
    coarse: NormalMapFrame,
    fine: NormalMapFrame,
    count: int,
    rng_seed: int,
    patch_size: int = PATCH_SIZE,
    min_mask_fraction: float = 0.01,
) -> list[tuple[Patch, Patch]]:
    """Aligned (coarse, fine) training crops at the fine pixel scale.

    The fine member is cropped directly; the coarse member is resampled from
    the coarse map over the same physical region so its effective
    pixels_per_meter matches the fine one.
    """
    h, w = fine.shape
    if h < patch_size or w < patch_size:
        raise CropError(f"map {h}x{w} smaller than patch size {patch_size}")
    rng = np.random.default_rng(rng_seed)
    pairs: list[tuple[Patch, Patch]] = []
    tries = 0
    max_tries = max(200, 100 * count)
    min_pixels = max(1, int(np.ceil(min_mask_fraction * patch_size * patch_size)))
    while len(pairs) < count:
        if tries >= max_tries:
            raise CoverageError(
                f"found only {len(pairs)}/{count} non-empty crops after {tries} tries"
            )
        tries += 1
        row = int(rng.integers(0, h - patch_size + 1))
        col = int(rng.integers(0, w - patch_size + 1))
        sub_mask = fine.mask[row : row + patch_size, col : col + patch_size]
        if int(sub_mask.sum()) < min_pixels:
            continue
        fine_patch = crop_patch(fine, row, col, patch_size)
        coarse_patch = _resampled_coarse_patch(
            coarse, row, col, patch_size, fine.pixels_per_meter, fine_patch.mask
        )
        pairs.append((coarse_patch, fine_patch))
    return pairs


def random_crops(
    frame: NormalMapFrame,
    count: int,
    rng_seed: int,
    patch_size: int = PATCH_SIZE,
    min_mask_fraction: float = 0.01,
) -> list[Patch]:
    """Random non-empty crops of a single map (classification / evaluation)."""
    pairs = random_crop_pairs(frame, frame, count, rng_seed, patch_size, min_mask_fraction)
    return [fine for _, fine in pairs]


def regular_grid_crops(
    frame: NormalMapFrame, stride: int, patch_size: int = PATCH_SIZE
) -> list[Patch]:
    """Overlapping inference grid; the last row/column is clamped to the
    border and patches without any masked pixel are dropped."""
    if stride <= 0 or stride > patch_size:
        raise ParameterError(f"stride must be in 1..{patch_size}, got {stride}")
    h, w = frame.shape
    if h < patch_size or w < patch_size:
        raise CropError(f"map {h}x{w} smaller than patch size {patch_size}")

    def _origins(extent: int) -> list[int]:
        stops = list(range(0, extent - patch_size + 1, stride))
        if stops[-1] != extent - patch_size:
            stops.append(extent - patch_size)
        return stops

    crops = []
    for row in _origins(h):
        for col in _origins(w):
            sub = frame.mask[row : row + patch_size, col : col + patch_size]
            if sub.any():
                crops.append(crop_patch(frame, row, col, patch_size))
    return crops


# ---------------------------------------------------------------------------
# dihedral augmentation: op_id = rot_quarter_turns + 4 * flipped
# A flip (columns reversed, x negated) is applied first, then `k` quarter
# turns; one turn maps (x, y) -> (y, -x) in (col, row) components.

def augment(patch: Patch, op_id: int) -> Patch:
    if not 0 <= op_id <= 7:
        raise ParameterError(f"op_id must be in 0..7, got {op_id}")
    normals = patch.normals.copy()
    mask = patch.mask.copy()
    if op_id >= 4:
        normals = np.flip(normals, axis=1).copy()
        mask = np.flip(mask, axis=1).copy()
        normals[..., 0] = -normals[..., 0]
    for _ in range(op_id % 4):
        normals = np.rot90(normals, 1, axes=(0, 1)).copy()
        mask = np.rot90(mask, 1, axes=(0, 1)).copy()
        x = normals[..., 0].copy()
        normals[..., 0] = normals[..., 1]
        normals[..., 1] = -x
    return replace(patch, normals=normals, mask=mask)


def inverse_op(op_id: int) -> int:
    """Dihedral inverse: rotations invert, flip+rotation ops are involutions."""
    if not 0 <= op_id <= 7:
        raise ParameterError(f"op_id must be in 0..7, got {op_id}")
    return (4 - op_id) % 4 if op_id < 4 else op_id


def merge_patches(
    patches: list[Patch],
    canvas_shape: tuple[int, int],
    mask: np.ndarray,
    pixels_per_meter: float | None = None,
    frame_index: int = 0,
) -> NormalMapFrame:
    """Average overlapping patches into a full map.

    The per-pixel mean is taken over all covering patches in the encoded
    (RGB-affine) sense, then renormalized to unit length under the canvas
    mask; masked pixels covered by no patch raise a CoverageError.
    """
    height, width = canvas_shape
    if pixels_per_meter is None:
        if not patches:
            raise DataError("cannot infer pixels_per_meter from an empty patch list")
        pixels_per_meter = patches[0].source_scale
    acc = np.zeros((height, width, 3), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.int64)
    for patch in patches:
        r, c = patch.origin
        s = patch.size
        if r < 0 or c < 0 or r + s > height or c + s > width:
            raise DataError(f"patch at {patch.origin} size {s} outside canvas {canvas_shape}")
        acc[r : r + s, c : c + s] += patch.normals.astype(np.float64)
        count[r : r + s, c : c + s] += 1
    mask = mask.astype(bool)
    uncovered = mask & (count == 0)
    if uncovered.any():
        coords = np.argwhere(uncovered)[:20].tolist()
        raise CoverageError(
            f"{int(uncovered.sum())} masked pixels uncovered, first: {coords}"
        )
    mean = np.zeros_like(acc)
    np.divide(acc, count[..., None], out=mean, where=count[..., None] > 0)
    normals = renormalize(mean, mask)
    return NormalMapFrame(
        normals=normals,
        mask=mask,
        pixels_per_meter=float(pixels_per_meter),
        frame_index=frame_index,
    )
