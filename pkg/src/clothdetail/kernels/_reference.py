"""Vectorized numpy implementations of the hot kernels.

This is the portable fallback; `clothdetail.kernels._fast` provides the
compiled equivalents with identical signatures and semantics.
"""

from __future__ import annotations

import numpy as np

DEGENERATE_AREA = 1e-12      # twice-area in px^2 below which a UV triangle is skipped
EDGE_EPS = -1e-9             # inclusive inside test for pixel coverage
STRICT_EPS = 1e-4            # barycentric margin that counts as interior overlap
MIN_EDGE_LENGTH = 1e-9       # 3D edges shorter than this are skipped in the bend term


def rasterize_attributes(tri_px, attrs, height, width):
    """Rasterize per-corner attributes over pixel centers.

    tri_px: (F, 3, 2) float64 triangle corners in (row, col) pixel units.
    attrs: (F, 3, K) float64 attributes interpolated barycentrically.
    Returns (accum (H, W, K), owner (H, W) int32 face id or -1,
    overlap_count, degenerate_count). The first covering triangle claims a
    pixel; later strictly-interior claims are counted as chart overlaps.
    """
    tri_px = np.ascontiguousarray(tri_px, dtype=np.float64)
    attrs = np.ascontiguousarray(attrs, dtype=np.float64)
    nf, _, k = attrs.shape
    accum = np.zeros((height, width, k), dtype=np.float64)
    owner = np.full((height, width), -1, dtype=np.int32)
    overlap = 0
    degenerate = 0
    for f in range(nf):
        ar, ac = tri_px[f, 0]
        br, bc = tri_px[f, 1]
        cr, cc = tri_px[f, 2]
        den = (br - ar) * (cc - ac) - (bc - ac) * (cr - ar)
        if abs(den) < DEGENERATE_AREA:
            degenerate += 1
            continue
        r0 = max(0, int(np.ceil(min(ar, br, cr) - 1e-12)))
        r1 = min(height - 1, int(np.floor(max(ar, br, cr) + 1e-12)))
        c0 = max(0, int(np.ceil(min(ac, bc, cc) - 1e-12)))
        c1 = min(width - 1, int(np.floor(max(ac, bc, cc) + 1e-12)))
        if r1 < r0 or c1 < c0:
            continue
        rr, cc_grid = np.meshgrid(
            np.arange(r0, r1 + 1, dtype=np.float64),
            np.arange(c0, c1 + 1, dtype=np.float64),
            indexing="ij",
        )
        w0 = ((br - rr) * (cc - cc_grid) - (bc - cc_grid) * (cr - rr)) / den
        w1 = ((cr - rr) * (ac - cc_grid) - (cc - cc_grid) * (ar - rr)) / den
        w2 = ((ar - rr) * (bc - cc_grid) - (ac - cc_grid) * (br - rr)) / den
        wmin = np.minimum(np.minimum(w0, w1), w2)
        inside = wmin >= EDGE_EPS
        if not inside.any():
            continue
        sub_owner = owner[r0 : r1 + 1, c0 : c1 + 1]
        free = inside & (sub_owner < 0)
        overlap += int(np.count_nonzero((wmin >= STRICT_EPS) & (sub_owner >= 0)))
        if free.any():
            vals = (
                w0[free, None] * attrs[f, 0]
                + w1[free, None] * attrs[f, 1]
                + w2[free, None] * attrs[f, 2]
            )
            rows = rr[free].astype(np.int64)
            cols = cc_grid[free].astype(np.int64)
            accum[rows, cols] = vals
            sub_owner[free] = f
    return accum, owner, overlap, degenerate


def winding_numbers(points, tri_verts, chunk=262144):
    """Generalized winding number of each query point w.r.t. a triangle soup.

    Uses the solid-angle formula; for a closed mesh the result is ~1 inside
    and ~0 outside.
    """
    points = np.asarray(points, dtype=np.float64)
    tri_verts = np.asarray(tri_verts, dtype=np.float64)
    n = len(points)
    nf = len(tri_verts)
    out = np.zeros(n, dtype=np.float64)
    if nf == 0 or n == 0:
        return out
    step = max(1, chunk // max(nf, 1))
    for s in range(0, n, step):
        p = points[s : s + step]
        a = tri_verts[None, :, 0] - p[:, None]
        b = tri_verts[None, :, 1] - p[:, None]
        c = tri_verts[None, :, 2] - p[:, None]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        triple = np.einsum("nfi,nfi->nf", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("nfi,nfi->nf", a, b) * lc
            + np.einsum("nfi,nfi->nf", b, c) * la
            + np.einsum("nfi,nfi->nf", c, a) * lb
        )
        out[s : s + step] = np.arctan2(triple, denom).sum(axis=1) / (2.0 * np.pi)
    return out


def closest_points(points, tri_verts, chunk=2097152):
    """Nearest point on a triangle soup for each query (Ericson's regions).

    Returns (distances (N,), closest (N, 3)).
    """
    points = np.asarray(points, dtype=np.float64)
    tri_verts = np.asarray(tri_verts, dtype=np.float64)
    n = len(points)
    nf = len(tri_verts)
    best_d2 = np.full(n, np.inf)
    best_pt = np.zeros((n, 3))
    if nf == 0 or n == 0:
        return np.sqrt(best_d2), best_pt
    step = max(1, chunk // max(nf, 1))
    a = tri_verts[:, 0]
    ab = tri_verts[:, 1] - a
    ac = tri_verts[:, 2] - a

    def _safe_div(num, den):
        ok = np.abs(den) > 1e-300
        return np.where(ok, num / np.where(ok, den, 1.0), 0.0)

    for s in range(0, n, step):
        p = points[s : s + step]
        ap = p[:, None] - a[None]                       # (m, F, 3)
        d1 = np.einsum("fi,nfi->nf", ab, ap)
        d2 = np.einsum("fi,nfi->nf", ac, ap)
        bp = ap - ab[None]
        d3 = np.einsum("fi,nfi->nf", ab, bp)
        d4 = np.einsum("fi,nfi->nf", ac, bp)
        cp = ap - ac[None]
        d5 = np.einsum("fi,nfi->nf", ab, cp)
        d6 = np.einsum("fi,nfi->nf", ac, cp)
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        # Barycentric (v, w) per region; regions applied in reverse of the
        # early-return precedence (vertex A checked first wins last write).
        v = np.clip(_safe_div(vb, va + vb + vc), 0.0, 1.0)
        w = np.clip(_safe_div(vc, va + vb + vc), 0.0, 1.0)
        scale = np.maximum(v + w, 1.0)
        v = v / scale
        w = w / scale
        t_bc = np.clip(_safe_div(d4 - d3, (d4 - d3) + (d5 - d6)), 0.0, 1.0)
        in_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        v = np.where(in_bc, 1.0 - t_bc, v)
        w = np.where(in_bc, t_bc, w)
        t_ac = np.clip(_safe_div(d2, d2 - d6), 0.0, 1.0)
        in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        v = np.where(in_ac, 0.0, v)
        w = np.where(in_ac, t_ac, w)
        in_c = (d6 >= 0) & (d5 <= d6)
        v = np.where(in_c, 0.0, v)
        w = np.where(in_c, 1.0, w)
        t_ab = np.clip(_safe_div(d1, d1 - d3), 0.0, 1.0)
        in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v = np.where(in_ab, t_ab, v)
        w = np.where(in_ab, 0.0, w)
        in_b = (d3 >= 0) & (d4 <= d3)
        v = np.where(in_b, 1.0, v)
        w = np.where(in_b, 0.0, w)
        in_a = (d1 <= 0) & (d2 <= 0)
        v = np.where(in_a, 0.0, v)
        w = np.where(in_a, 0.0, w)
        cand = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
        d2_all = ((p[:, None] - cand) ** 2).sum(axis=2)
        idx = np.argmin(d2_all, axis=1)
        rows = np.arange(len(p))
        best_d2[s : s + step] = d2_all[rows, idx]
        best_pt[s : s + step] = cand[rows, idx]
    return np.sqrt(best_d2), best_pt


def _edge_arrays(indptr, indices):
    counts = np.diff(indptr)
    src = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    return src, np.asarray(indices, dtype=np.int64), counts.astype(np.int64)


def laplacian_energy_grad(disp, indptr, indices):
    """Energy sum ||L d||^2 of the umbrella Laplacian of a displacement field
    and its gradient. L d at p is mean(d over one-ring) - d_p; isolated
    vertices contribute nothing."""
    disp = np.asarray(disp, dtype=np.float64)
    src, dst, deg = _edge_arrays(indptr, indices)
    nbr_sum = np.zeros_like(disp)
    np.add.at(nbr_sum, src, disp[dst])
    safe_deg = np.maximum(deg, 1)
    lap = nbr_sum / safe_deg[:, None] - disp
    lap[deg == 0] = 0.0
    energy = float((lap**2).sum())
    scaled = lap / safe_deg[:, None]
    acc = np.zeros_like(disp)
    np.add.at(acc, src, scaled[dst])
    grad = 2.0 * (acc - lap)
    grad[deg == 0] = 0.0
    return energy, grad


def deform_energy_grad(pos, p0, normals, indptr, indices, eta, omega):
    """Energy and gradient of the normal-alignment deformation objective.

    E = sum over directed edges (n_p . (q-p)/|q-p|)^2
        + eta * sum_p ||L (p - p0)||^2
        + omega * sum_p ||p - p0||^2

    Near-zero-length edges are skipped in the first term and counted.
    Returns (energy, grad (V, 3), skipped_edges).
    """
    pos = np.asarray(pos, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    src, dst, _ = _edge_arrays(indptr, indices)
    grad = np.zeros_like(pos)
    skipped = 0
    if len(src):
        e = pos[dst] - pos[src]
        r = np.linalg.norm(e, axis=1)
        ok = r >= MIN_EDGE_LENGTH
        skipped = int(np.count_nonzero(~ok))
        e = e[ok]
        r = r[ok]
        n = normals[src[ok]]
        u = e / r[:, None]
        s = (n * u).sum(axis=1)
        bend = float((s**2).sum())
        g = (2.0 * s / r)[:, None] * (n - s[:, None] * u)
        np.add.at(grad, dst[ok], g)
        np.subtract.at(grad, src[ok], g)
    else:
        bend = 0.0
    disp = pos - p0
    lap_e, lap_g = laplacian_energy_grad(disp, indptr, indices)
    anchor = float((disp**2).sum())
    grad += eta * lap_g + 2.0 * omega * disp
    energy = bend + eta * lap_e + omega * anchor
    return energy, grad, skipped
