"""Displacement-field algebra.

A displacement field stores per-voxel offsets in voxel units, one component
per spatial axis. Deformations are identity-plus-displacement and are
applied by pull-sampling: output(p) = input(p + u(p)), with sample
coordinates clamped to the valid grid.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import engine
from .engine import ShapeError, Tensor


@dataclass
class DisplacementField:
    components: np.ndarray  # (D, spatial...), float32

    def __post_init__(self):
        self.components = np.asarray(self.components, dtype=np.float32)
        if self.components.ndim < 2:
            raise ShapeError("field needs a component axis plus spatial axes")
        if self.components.shape[0] != self.components.ndim - 1:
            raise ShapeError(
                f"{self.components.shape[0]} components for "
                f"{self.components.ndim - 1} spatial dims"
            )
        if not np.all(np.isfinite(self.components)):
            raise ValueError("displacement field contains non-finite values")

    @property
    def spatial_shape(self):
        return self.components.shape[1:]

    @staticmethod
    def zero(shape) -> "DisplacementField":
        shape = tuple(shape)
        return DisplacementField(np.zeros((len(shape),) + shape, dtype=np.float32))


def _sample_coords(shape) -> np.ndarray:
    """Identity grid: (D, spatial...) array of voxel coordinates."""
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    return np.stack(grids)


def _multilinear(values: np.ndarray, coords: np.ndarray,
                 want_grads: bool = False):
    """Multilinear sampling of `values` at absolute `coords` (D, spatial...).

    Coordinates are clamped to the grid. Returns (sampled, aux); aux carries
    what the backward pass needs when want_grads is set.
    """
    D = coords.shape[0]
    shape = values.shape
    x = np.empty_like(coords)
    inside = np.empty(coords.shape, dtype=bool) if want_grads else None
    for d in range(D):
        x[d] = np.clip(coords[d], 0.0, shape[d] - 1)
        if want_grads:
            inside[d] = (coords[d] > 0) & (coords[d] < shape[d] - 1)
    i0 = np.empty(coords.shape, dtype=np.int64)
    f = np.empty_like(x)
    for d in range(D):
        i0[d] = np.clip(np.floor(x[d]).astype(np.int64), 0, max(shape[d] - 2, 0))
        f[d] = x[d] - i0[d]
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    corners = list(itertools.product((0, 1), repeat=D))
    vals = {}
    for off in corners:
        idx = tuple(np.minimum(i0[d] + off[d], shape[d] - 1) for d in range(D))
        w = np.ones(coords.shape[1:], dtype=np.float64)
        for d in range(D):
            w = w * (f[d] if off[d] else 1.0 - f[d])
        v = values[idx]
        out += w * v
        if want_grads:
            vals[off] = (idx, v)
    aux = (i0, f, inside, vals, corners) if want_grads else None
    return out, aux


def warp_linear_raw(image: np.ndarray, field: DisplacementField) -> np.ndarray:
    """Non-differentiable multilinear warp on raw arrays."""
    if image.shape != field.spatial_shape:
        raise ShapeError(f"image {image.shape} vs field grid {field.spatial_shape}")
    if not np.any(field.components):
        return image.copy()
    coords = _sample_coords(image.shape) + field.components.astype(np.float64)
    out, _ = _multilinear(image.astype(np.float64), coords)
    return out.astype(image.dtype)


def warp_linear(image: Tensor, field: Tensor) -> Tensor:
    """Differentiable multilinear warp: output(p) = image(p + field(p))."""
    if image.shape != field.shape[1:] or field.shape[0] != image.ndim:
        raise ShapeError(f"image {image.shape} vs field {field.shape}")
    # with a zero field the interpolation weights are exactly 0 and 1, so the
    # general path below is already a bit-exact identity
    coords = _sample_coords(image.shape) + field.data.astype(np.float64)
    vals = image.data.astype(np.float64)
    out, aux = _multilinear(vals, coords, want_grads=True)
    i0, f, inside, corner_vals, corners = aux
    D = len(corners[0])

    def bwd(g):
        g64 = g.astype(np.float64)
        gi = np.zeros(image.shape, dtype=np.float64)
        gf = np.zeros(field.shape, dtype=np.float64)
        for off in corners:
            idx, v = corner_vals[off]
            w = np.ones(g.shape, dtype=np.float64)
            for d in range(D):
                w = w * (f[d] if off[d] else 1.0 - f[d])
            np.add.at(gi, idx, w * g64)
            for d in range(D):
                wd = np.ones(g.shape, dtype=np.float64)
                for e in range(D):
                    if e == d:
                        continue
                    wd = wd * (f[e] if off[e] else 1.0 - f[e])
                sign = 1.0 if off[d] else -1.0
                gf[d] += sign * wd * v * g64
        gf *= inside  # per-axis: a clamped coordinate has zero gradient
        return gi.astype(image.data.dtype), gf.astype(field.data.dtype)

    return engine._record("warp_linear", (image, field), out.astype(image.data.dtype), bwd)


def warp_nearest(labels: np.ndarray, field: DisplacementField) -> np.ndarray:
    """Label warp: output(p) = labels at round(p + u(p)), clamped."""
    labels = np.asarray(labels)
    if labels.shape != field.spatial_shape:
        raise ShapeError(f"labels {labels.shape} vs field grid {field.spatial_shape}")
    if not np.any(field.components):
        return labels.copy()
    coords = _sample_coords(labels.shape) + field.components.astype(np.float64)
    idx = tuple(
        np.clip(np.floor(coords[d] + 0.5).astype(np.int64), 0, labels.shape[d] - 1)
        for d in range(coords.shape[0])
    )
    return labels[idx]


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field of (id+u_outer) ∘ (id+u_inner): u(p) = u_in(p) + u_out(p + u_in(p))."""
    if outer.spatial_shape != inner.spatial_shape:
        raise ShapeError(f"grid mismatch: {outer.spatial_shape} vs {inner.spatial_shape}")
    coords = _sample_coords(inner.spatial_shape) + inner.components.astype(np.float64)
    comps = np.empty_like(inner.components)
    for d in range(inner.components.shape[0]):
        sampled, _ = _multilinear(outer.components[d].astype(np.float64), coords)
        comps[d] = inner.components[d] + sampled.astype(np.float32)
    return DisplacementField(comps)


def random_smooth_field(shape, grid_spacing: int, amplitude: float,
                        blur_radius: int, seed) -> DisplacementField:
    """Uniform vectors on a sparse control grid, multilinearly interpolated
    to the full grid, then box-blurred. |component| never exceeds amplitude."""
    shape = tuple(shape)
    if grid_spacing < 2:
        raise ValueError(f"grid_spacing must be >= 2, got {grid_spacing}")
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    D = len(shape)
    rng = np.random.default_rng(seed)
    ctrl_shape = tuple((s - 1) // grid_spacing + 2 for s in shape)
    ctrl = rng.uniform(-amplitude, amplitude, size=(D,) + ctrl_shape)
    if amplitude == 0:
        return DisplacementField.zero(shape)
    coords = _sample_coords(shape) / grid_spacing
    comps = np.empty((D,) + shape, dtype=np.float32)
    for d in range(D):
        sampled, _ = _multilinear(ctrl[d], coords)
        comps[d] = sampled.astype(np.float32)
    if blur_radius > 0:
        size = 2 * blur_radius + 1
        for d in range(D):
            comps[d] = ndimage.uniform_filter(
                comps[d].astype(np.float64), size=size, mode="nearest"
            ).astype(np.float32)
    return DisplacementField(comps)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """1 where any face-adjacent neighbor carries a different label."""
    labels = np.asarray(labels)
    mask = np.zeros(labels.shape, dtype=np.uint8)
    for ax in range(labels.ndim):
        lo = [slice(None)] * labels.ndim
        hi = [slice(None)] * labels.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        diff = labels[tuple(lo)] != labels[tuple(hi)]
        mask[tuple(lo)] |= diff
        mask[tuple(hi)] |= diff
    return mask
