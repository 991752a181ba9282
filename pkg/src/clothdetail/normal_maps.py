"""Normal-map frames over a garment UV parameterization.

A frame stores signed unit-normal components (tangent space, z toward the
viewer). The RGB encoding ``c = (n + 1) / 2`` is applied only at the file
and network boundaries; internally the background is the zero vector, which
the encoding maps to the neutral gray (0.5, 0.5, 0.5).

Sequence layout on disk::

    sequence_dir/
        frame_0000.png      16-bit RGB, c = (n+1)/2
        frame_0001.png
        mask.png            8-bit single channel, 255 = inside a chart
        meta.json           pixels_per_meter and bookkeeping

The mask is shared by all frames of a sequence (fixed parameterization).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError, ParameterError, SequenceError

UNIT_TOLERANCE = 1e-3


@dataclass
class NormalMapFrame:
    """One frame of a normal-map sequence.

    normals: (H, W, 3) float32 signed components; zero outside the mask.
    mask: (H, W) bool, True inside a UV chart.
    pixels_per_meter: physical scale shared by the whole sequence.
    """

    normals: np.ndarray
    mask: np.ndarray
    pixels_per_meter: float
    frame_index: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.normals.shape[0], self.normals.shape[1]

    def rgb(self) -> np.ndarray:
        """Encoded view, values in [0, 1]."""
        return encode_rgb(self.normals)

    def copy(self) -> "NormalMapFrame":
        return replace(self, normals=self.normals.copy(), mask=self.mask.copy())

    def validate(self) -> None:
        h, w, c = self.normals.shape
        if c != 3 or self.mask.shape != (h, w):
            raise DataError(f"inconsistent shapes {self.normals.shape} / {self.mask.shape}")
        if self.pixels_per_meter <= 0:
            raise DataError("pixels_per_meter must be positive")
        lengths = np.linalg.norm(self.normals[self.mask].astype(np.float64), axis=-1)
        if lengths.size and (lengths.min() < 1.0 - UNIT_TOLERANCE or lengths.max() > 1.0 + UNIT_TOLERANCE):
            raise DataError(
                f"masked normals not unit length: range [{lengths.min():.6f}, {lengths.max():.6f}]"
            )
        if np.any(self.normals[~self.mask] != 0.0):
            raise DataError("background pixels must hold the zero vector")


def encode_rgb(normals: np.ndarray) -> np.ndarray:
    return ((normals.astype(np.float64) + 1.0) * 0.5).astype(np.float32)


def decode_rgb(rgb: np.ndarray) -> np.ndarray:
    return (rgb.astype(np.float64) * 2.0 - 1.0).astype(np.float32)


def renormalize(normals: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Scale vectors to unit length (float64 internally); zero outside mask."""
    vec = normals.astype(np.float64)
    length = np.linalg.norm(vec, axis=-1, keepdims=True)
    out = vec / np.maximum(length, 1e-12)
    if mask is not None:
        out[~mask] = 0.0
    return out.astype(np.float32)


def downsample_normal_map(fine: NormalMapFrame, factor: int) -> NormalMapFrame:
    """Box-filter over masked pixels per block, renormalized.

    A coarse pixel is masked iff its block contains at least one masked fine
    pixel; pixels_per_meter shrinks by the factor.
    """
    if factor < 2:
        raise ParameterError(f"downsample factor must be >= 2, got {factor}")
    h, w, _ = fine.normals.shape
    if h % factor or w % factor:
        raise ParameterError(f"factor {factor} does not divide map size {h}x{w}")
    hh, ww = h // factor, w // factor
    blocks = fine.normals.astype(np.float64).reshape(hh, factor, ww, factor, 3)
    mblocks = fine.mask.reshape(hh, factor, ww, factor).astype(np.float64)
    sums = (blocks * mblocks[..., None]).sum(axis=(1, 3))
    counts = mblocks.sum(axis=(1, 3))
    mask = counts > 0
    mean = np.zeros_like(sums)
    np.divide(sums, counts[..., None], out=mean, where=mask[..., None])
    normals = renormalize(mean, mask)
    return NormalMapFrame(
        normals=normals,
        mask=mask,
        pixels_per_meter=fine.pixels_per_meter / factor,
        frame_index=fine.frame_index,
    )


def sample_bilinear(
    normals: np.ndarray,
    mask: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Mask-weighted bilinear lookup at fractional pixel coordinates.

    Returns (values, coverage) where coverage is the plain bilinear
    interpolation of the mask; values are averaged over masked corners only
    so background zeros never bleed into the result.
    """
    h, w = mask.shape
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    weights = [
        (1 - fr) * (1 - fc),
        (1 - fr) * fc,
        fr * (1 - fc),
        fr * fc,
    ]
    corners = [(r0, c0), (r0, c1), (r1, c0), (r1, c1)]
    values = np.zeros(r.shape + (normals.shape[-1],), dtype=np.float64)
    weight_sum = np.zeros_like(r, dtype=np.float64)
    coverage = np.zeros_like(r, dtype=np.float64)
    m = mask.astype(np.float64)
    src = normals.astype(np.float64)
    for wgt, (ri, ci) in zip(weights, corners):
        mw = wgt * m[ri, ci]
        values += mw[..., None] * src[ri, ci]
        weight_sum += mw
        coverage += wgt * m[ri, ci]
    nonzero = weight_sum > 1e-12
    values[nonzero] /= weight_sum[nonzero][..., None]
    return values, coverage


def resize_normal_map(frame: NormalMapFrame, target_ppm: float) -> NormalMapFrame:
    """Rescale so one pixel spans 1/target_ppm meters; renormalizes vectors.

    An output pixel is masked when the interpolated mask coverage reaches
    one half.
    """
    if target_ppm <= 0:
        raise ParameterError("target pixels_per_meter must be positive")
    scale = target_ppm / frame.pixels_per_meter
    if abs(scale - 1.0) < 1e-12:
        return frame.copy()
    h, w = frame.shape
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    rows = (np.arange(nh, dtype=np.float64)[:, None] + 0.5) / scale - 0.5
    cols = (np.arange(nw, dtype=np.float64)[None, :] + 0.5) / scale - 0.5
    rows = np.broadcast_to(rows, (nh, nw))
    cols = np.broadcast_to(cols, (nh, nw))
    values, coverage = sample_bilinear(frame.normals, frame.mask, rows, cols)
    mask = coverage >= 0.5
    normals = renormalize(values, mask)
    return NormalMapFrame(
        normals=normals,
        mask=mask,
        pixels_per_meter=target_ppm,
        frame_index=frame.frame_index,
    )


# ---------------------------------------------------------------------------
# disk I/O

_FRAME_PATTERN = "frame_{:04d}.png"


def _encode_png16(rgb: np.ndarray) -> np.ndarray:
    arr = np.clip(np.rint(rgb.astype(np.float64) * 65535.0), 0, 65535).astype(np.uint16)
    return arr[..., ::-1]  # cv2 writes BGR


def _decode_png16(arr: np.ndarray) -> np.ndarray:
    return arr[..., ::-1].astype(np.float64) / 65535.0


def save_normal_map(frame: NormalMapFrame, png_path: Path | str) -> None:
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(png_path), _encode_png16(frame.rgb()))
    if not ok:
        raise DataError(f"could not write {png_path}")


def load_normal_map(
    png_path: Path | str,
    mask: np.ndarray,
    pixels_per_meter: float,
    frame_index: int = 0,
) -> NormalMapFrame:
    raw = cv2.imread(str(png_path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise SequenceError(f"missing or unreadable normal map {png_path}")
    if raw.dtype != np.uint16 or raw.ndim != 3:
        raise DataError(f"{png_path}: expected 16-bit RGB png, got {raw.dtype} {raw.shape}")
    rgb = _decode_png16(raw)
    normals = decode_rgb(rgb)
    normals = renormalize(normals, mask.astype(bool))
    return NormalMapFrame(
        normals=normals,
        mask=mask.astype(bool),
        pixels_per_meter=pixels_per_meter,
        frame_index=frame_index,
    )


def save_mask(mask: np.ndarray, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(path), (mask.astype(np.uint8) * 255))
    if not ok:
        raise DataError(f"could not write {path}")


def load_mask(path: Path | str) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise SequenceError(f"missing mask image {path}")
    return raw >= 128


def save_sequence(frames: list[NormalMapFrame], directory: Path | str, extra: dict | None = None) -> None:
    """Write frames + shared mask + sidecar metadata."""
    if not frames:
        raise SequenceError("cannot save an empty sequence")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        save_normal_map(frame, directory / _FRAME_PATTERN.format(i))
    save_mask(frames[0].mask, directory / "mask.png")
    meta = {
        "pixels_per_meter": frames[0].pixels_per_meter,
        "frame_count": len(frames),
    }
    if extra:
        meta.update(extra)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_sequence(directory: Path | str) -> tuple[list[NormalMapFrame], dict]:
    """Read a sequence directory; returns (frames, metadata)."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise SequenceError(f"no meta.json in {directory}")
    meta = json.loads(meta_path.read_text())
    mask = load_mask(directory / "mask.png")
    count = int(meta["frame_count"])
    if count < 1:
        raise SequenceError(f"{directory}: empty sequence")
    frames = []
    for i in range(count):
        frames.append(
            load_normal_map(
                directory / _FRAME_PATTERN.format(i),
                mask,
                float(meta["pixels_per_meter"]),
                frame_index=i,
            )
        )
    return frames, meta
