"""Occlusion-sensitivity maps: probability drop under a sliding obstruction box."""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

AXES = {"axial": 0, "coronal": 1, "sagittal": 2}


@dataclass
class AttentionMap:
    grid: np.ndarray
    box: tuple
    stride: tuple
    baseline_prob: float
    target_class: int
    volume_shape: tuple


def _triple(v):
    return (int(v),) * 3 if np.isscalar(v) else tuple(int(a) for a in v)


def grid_extents(volume_shape, box, stride):
    out = []
    for axis, (n, b, s) in enumerate(zip(volume_shape, box, stride)):
        if b < 1 or s < 1:
            raise ConfigError(f"box and stride must be >= 1, got box={box} stride={stride}")
        if b > n:
            raise ConfigError(f"occlusion box {b} exceeds volume extent {n} on axis {axis}")
        out.append((n - b) // s + 1)
    return tuple(out)


def occlusion_map(net, volume, target_class, box=7, stride=7, fill=0.0, batch_size=8):
    """Drop of ``target_class`` probability when each box position is filled with ``fill``.

    Occluded inputs are built as copies, so ``volume`` itself is never written.
    Negative values (occlusion raising confidence) are kept.
    """
    box, stride = _triple(box), _triple(stride)
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ShapeError(f"volume must be 3-D, got shape {volume.shape}")
    ext = grid_extents(volume.shape, box, stride)
    base = np.asarray(volume, dtype=np.float32)
    p0 = float(net.predict(base[None, None], batch_size=1)[0, target_class])
    positions = [(z, y, x) for z in range(ext[0]) for y in range(ext[1]) for x in range(ext[2])]
    drops = np.empty(len(positions), dtype=np.float64)
    for start in range(0, len(positions), batch_size):
        chunk = positions[start:start + batch_size]
        occluded = np.repeat(base[None, None], len(chunk), axis=0)
        for n, (z, y, x) in enumerate(chunk):
            z0, y0, x0 = z * stride[0], y * stride[1], x * stride[2]
            occluded[n, 0, z0:z0 + box[0], y0:y0 + box[1], x0:x0 + box[2]] = fill
        probs = net.predict(occluded, batch_size=batch_size)[:, target_class]
        drops[start:start + len(chunk)] = p0 - probs.astype(np.float64)
    return AttentionMap(drops.reshape(ext), box, stride, p0, int(target_class), tuple(volume.shape))


def upsample_map(amap, to_shape=None):
    """Nearest-neighbour expansion of the grid back to volume coordinates.

    Each voxel takes the value of the box position whose centre is closest.
    """
    to_shape = amap.volume_shape if to_shape is None else tuple(int(v) for v in to_shape)
    if len(to_shape) != 3 or grid_extents(to_shape, amap.box, amap.stride) != amap.grid.shape:
        raise ShapeError(f"target shape {to_shape} is inconsistent with grid {amap.grid.shape}")
    index = []
    for n, b, s, g in zip(to_shape, amap.box, amap.stride, amap.grid.shape):
        pos = np.floor((np.arange(n) - (b - 1) / 2.0) / s + 0.5).astype(np.int64)
        index.append(np.clip(pos, 0, g - 1))
    return amap.grid[np.ix_(*index)]


def _write_matrix_csv(path, mat):
    np.savetxt(path, mat, delimiter=",", fmt="%.9g")


def _write_pgm(path, mat):
    lo, hi = float(mat.min()), float(mat.max())
    scaled = np.zeros(mat.shape) if hi <= lo else (mat - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mat.shape[1]} {mat.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def _write_ppm(path, mat):
    # diverging blue-white-red around zero
    peak = float(np.abs(mat).max())
    t = np.zeros(mat.shape) if peak == 0 else mat / peak
    r = np.where(t > 0, 1.0, 1.0 + t)
    g = 1.0 - np.abs(t)
    b = np.where(t < 0, 1.0, 1.0 - t)
    pix = np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{mat.shape[1]} {mat.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def take_slice(arr, axis, index):
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    a = AXES[axis]
    if not 0 <= index < arr.shape[a]:
        raise IndexError(f"{axis} index {index} outside [0, {arr.shape[a]})")
    return np.take(arr, index, axis=a)


def export_slices(volume, heat, axis, index, out_dir, prefix="attention"):
    """Write one volume slice and the aligned heatmap slice as CSV + PGM/PPM.

    ``heat`` is either an :class:`AttentionMap` (upsampled here) or a
    volume-shaped array. Returns a dict of written paths.
    """
    volume = np.asarray(volume)
    if isinstance(heat, AttentionMap):
        heat = upsample_map(heat, volume.shape)
    heat = np.asarray(heat)
    if heat.shape != volume.shape:
        raise ShapeError(f"heatmap shape {heat.shape} != volume shape {volume.shape}")
    vs = take_slice(volume, axis, index)
    hs = take_slice(heat, axis, index)
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"{prefix}_{axis}_{index}")
    paths = {
        "volume_csv": f"{stem}_volume.csv",
        "heatmap_csv": f"{stem}_heatmap.csv",
        "volume_pgm": f"{stem}_volume.pgm",
        "heatmap_ppm": f"{stem}_heatmap.ppm",
    }
    _write_matrix_csv(paths["volume_csv"], vs)
    _write_matrix_csv(paths["heatmap_csv"], hs)
    _write_pgm(paths["volume_pgm"], vs)
    _write_ppm(paths["heatmap_ppm"], hs)
    return paths


def localization_ratio(amap, region):
    """Mean |drop| inside ``region`` divided by mean |drop| outside it (voxel-wise)."""
    heat = np.abs(upsample_map(amap, region.shape))
    inside = heat[region].mean()
    outside = heat[~region].mean()
    return float(inside / outside) if outside > 0 else float("inf")
