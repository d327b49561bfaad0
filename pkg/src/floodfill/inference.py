"""Full-volume segmentation: seed selection and per-object flood fill.

Seeds are local minima of the smoothed Sobel-Feldman gradient magnitude
(object interiors are flat, membranes ridge-like), greedily thinned to a
minimum spacing. Each seed starts one object: a FIFO of FOV positions is
walked, the network's logits overwrite the object map inside the evaluated
window, and a neighbor position joins the queue when the map's corresponding
FOV face reaches the movement threshold and the position was never enqueued
before. When the queue drains, voxels whose object-map probability clears the
mask threshold are claimed under the next free id; earlier objects always
win overlaps.

Objects are segmented sequentially (claiming is order-dependent); the
per-object object map lives in a bounding region grown on demand in
delta-sized slabs so large volumes never allocate a full-volume map.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import normalize_image
from .model import FfnConfig, FfnParams, forward, logit

POM_BACKGROUND = 0.05
POM_SEED = 0.95

_DIRECTIONS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def _border_to_inf(arr: np.ndarray) -> np.ndarray:
    arr[0, :, :] = arr[-1, :, :] = np.inf
    arr[:, 0, :] = arr[:, -1, :] = np.inf
    arr[:, :, 0] = arr[:, :, -1] = np.inf
    return arr


def _raw_sobel_magnitude(vol: np.ndarray) -> np.ndarray:
    f = vol.astype(np.float64)
    g2 = np.zeros_like(f)
    for axis in range(3):
        d = ndimage.sobel(f, axis=axis)
        g2 += d * d
    return np.sqrt(g2)


def sobel_magnitude_3d(vol: np.ndarray) -> np.ndarray:
    """Sobel-Feldman gradient magnitude per voxel; border voxels are +inf.

    The border ring has no full 3x3x3 support, so it is excluded from any
    seed consideration by construction.
    """
    vol = np.asarray(vol)
    if vol.ndim != 3 or min(vol.shape) < 3:
        raise ValueError(f"volume must be 3-D with every extent >= 3, got {vol.shape}")
    return _border_to_inf(_raw_sobel_magnitude(vol))


@dataclass
class Seed:
    pos: tuple  # (z, y, x)
    score: float  # smoothed gradient magnitude; lower = deeper interior


def find_seeds(vol: np.ndarray, min_spacing: float, smooth_radius: int = 1) -> list:
    """Seed positions at local minima of the smoothed gradient magnitude.

    Candidates (non-strict 26-neighborhood minima) are visited in ascending
    (magnitude, z, y, x) order and greedily accepted while keeping pairwise
    Euclidean spacing >= min_spacing; ties therefore break lexicographically.
    """
    vol = np.asarray(vol)
    if vol.ndim != 3 or min(vol.shape) < 3:
        raise ValueError(f"volume must be 3-D with every extent >= 3, got {vol.shape}")
    mag = _raw_sobel_magnitude(vol)
    smooth = _border_to_inf(ndimage.uniform_filter(mag, size=2 * smooth_radius + 1))

    is_min = (smooth <= ndimage.minimum_filter(smooth, size=3)) & np.isfinite(smooth)
    zz, yy, xx = np.nonzero(is_min)
    scores = smooth[zz, yy, xx]
    order = np.lexsort((xx, yy, zz, scores))

    accepted: list = []
    acc_pts = np.empty((0, 3), dtype=np.float64)
    min_d2 = float(min_spacing) ** 2
    for k in order:
        pt = np.array([zz[k], yy[k], xx[k]], dtype=np.float64)
        if acc_pts.shape[0]:
            d2 = ((acc_pts - pt) ** 2).sum(axis=1)
            if float(d2.min()) < min_d2:
                continue
        acc_pts = np.vstack([acc_pts, pt])
        accepted.append(Seed(pos=(int(zz[k]), int(yy[k]), int(xx[k])), score=float(scores[k])))
    return accepted


class FfnPredictor:
    """Wraps trained parameters as the (image, pom, origin) -> logits callable
    the flood fill consumes. Oracle predictors with the same signature can be
    substituted in tests."""

    def __init__(self, config: FfnConfig, params: FfnParams):
        self.config = config
        self.params = params

    def __call__(self, image_fov, pom_fov, origin):
        logits, _ = forward(self.params, image_fov, pom_fov)
        return logits[0]  # (F, F, F)


class WorkingRegion:
    """Object-map logits over a bounding box grown on demand in delta slabs."""

    def __init__(self, vol_shape, lo, hi, delta: int, fill: float):
        self.vol_shape = vol_shape
        self.delta = delta
        self.fill = fill
        self.lo = np.array(lo, dtype=np.int64)
        self.hi = np.array(hi, dtype=np.int64)
        self.pom = np.full(tuple(self.hi - self.lo), fill, dtype=np.float32)

    def ensure(self, win_lo, win_hi):
        """Grow (in delta multiples, clipped to the volume) to cover a window."""
        win_lo = np.asarray(win_lo)
        win_hi = np.asarray(win_hi)
        if np.all(win_lo >= self.lo) and np.all(win_hi <= self.hi):
            return
        shape = np.array(self.vol_shape)
        below = np.maximum(self.lo - win_lo, 0)
        above = np.maximum(win_hi - self.hi, 0)
        grow_lo = np.ceil(below / self.delta).astype(np.int64) * self.delta
        grow_hi = np.ceil(above / self.delta).astype(np.int64) * self.delta
        new_lo = np.maximum(self.lo - grow_lo, 0)
        new_hi = np.minimum(self.hi + grow_hi, shape)
        new_pom = np.full(tuple(new_hi - new_lo), self.fill, dtype=np.float32)
        off = self.lo - new_lo
        sz = self.hi - self.lo
        new_pom[
            off[0] : off[0] + sz[0], off[1] : off[1] + sz[1], off[2] : off[2] + sz[2]
        ] = self.pom
        self.lo, self.hi, self.pom = new_lo, new_hi, new_pom

    def window(self, win_lo, size: int) -> np.ndarray:
        a = np.asarray(win_lo) - self.lo
        return self.pom[a[0] : a[0] + size, a[1] : a[1] + size, a[2] : a[2] + size]

    def set_window(self, win_lo, values: np.ndarray):
        a = np.asarray(win_lo) - self.lo
        s = values.shape
        self.pom[a[0] : a[0] + s[0], a[1] : a[1] + s[1], a[2] : a[2] + s[2]] = values

    def set_voxel(self, pos, value: float):
        a = np.asarray(pos) - self.lo
        self.pom[a[0], a[1], a[2]] = value


class FovQueue:
    """FIFO of pending FOV centers; a position is never enqueued twice."""

    def __init__(self):
        self._q = deque()
        self._seen = set()

    def push(self, pos) -> bool:
        if pos in self._seen:
            return False
        self._seen.add(pos)
        self._q.append(pos)
        return True

    def pop(self):
        return self._q.popleft()

    def __len__(self):
        return len(self._q)

    @property
    def visited(self):
        return set(self._seen)


@dataclass
class SegmentationCanvas:
    """Label volume under construction plus per-voxel claimed flags."""

    labels: np.ndarray
    claimed: np.ndarray
    next_id: int = 1

    @classmethod
    def for_volume(cls, shape) -> "SegmentationCanvas":
        return cls(
            labels=np.zeros(shape, dtype=np.uint32),
            claimed=np.zeros(shape, dtype=bool),
        )


@dataclass
class FloodFillResult:
    claimed_voxels: int
    visited_positions: list = field(default_factory=list)
    skipped: bool = False


def flood_fill_object(
    predictor,
    vol_norm: np.ndarray,
    canvas: SegmentationCanvas,
    seed,
    *,
    fov_size: int,
    delta: int,
    t_move: float = 0.9,
    t_mask: float = 0.5,
) -> FloodFillResult:
    """Segment one object from a seed; claims voxels into the canvas.

    Returns a skip result (not an error) when the seed voxel is already
    claimed. The FOV around the seed must lie inside the volume.
    """
    pos = tuple(int(c) for c in (seed.pos if isinstance(seed, Seed) else seed))
    if canvas.claimed[pos]:
        return FloodFillResult(claimed_voxels=0, skipped=True)
    shape = vol_norm.shape
    r = fov_size // 2
    if any(c - r < 0 or c + r + 1 > s for c, s in zip(pos, shape)):
        raise ValueError(f"FOV around seed {pos} leaves the volume {shape}")

    move_cut = logit(t_move)
    mask_cut = logit(t_mask)
    region = WorkingRegion(
        shape,
        lo=[c - r for c in pos],
        hi=[c + r + 1 for c in pos],
        delta=delta,
        fill=logit(POM_BACKGROUND),
    )
    region.set_voxel(pos, logit(POM_SEED))

    queue = FovQueue()
    queue.push(pos)
    visited_order = []
    while len(queue):
        center = queue.pop()
        visited_order.append(center)
        win_lo = tuple(c - r for c in center)
        win_hi = tuple(c + r + 1 for c in center)
        region.ensure(win_lo, win_hi)
        image_fov = vol_norm[
            win_lo[0] : win_hi[0], win_lo[1] : win_hi[1], win_lo[2] : win_hi[2]
        ]
        pom_fov = region.window(win_lo, fov_size).copy()
        logits = predictor(image_fov, pom_fov, win_lo)
        region.set_window(win_lo, np.asarray(logits, dtype=np.float32))

        updated = region.window(win_lo, fov_size)
        for d in _DIRECTIONS:
            neigh = tuple(c + delta * s for c, s in zip(center, d))
            if any(
                c - r < 0 or c + r + 1 > dim for c, dim in zip(neigh, shape)
            ):
                continue
            face = [slice(None)] * 3
            for axis, s in enumerate(d):
                if s < 0:
                    face[axis] = 0
                elif s > 0:
                    face[axis] = fov_size - 1
            if float(updated[tuple(face)].max()) >= move_cut:
                queue.push(neigh)

    lo, hi = region.lo, region.hi
    view = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
    take = (region.pom >= mask_cut) & ~canvas.claimed[view]
    count = int(np.count_nonzero(take))
    if count:
        canvas.labels[view][take] = canvas.next_id
        canvas.claimed[view][take] = True
        canvas.next_id += 1
    return FloodFillResult(claimed_voxels=count, visited_positions=visited_order)


def segment_volume(
    predictor,
    vol: np.ndarray,
    seeds,
    *,
    fov_size: int,
    delta: int,
    t_move: float = 0.9,
    t_mask: float = 0.5,
) -> np.ndarray:
    """Run the flood fill for every seed in order; first object wins overlaps.

    Seeds whose FOV would leave the volume, or whose voxel is already claimed,
    start no object. Ids are consecutive from 1 in seed order.
    """
    vol_norm = vol if vol.dtype.kind == "f" else normalize_image(vol)
    canvas = SegmentationCanvas.for_volume(vol.shape)
    r = fov_size // 2
    for seed in seeds:
        pos = seed.pos if isinstance(seed, Seed) else tuple(seed)
        if any(c - r < 0 or c + r + 1 > s for c, s in zip(pos, vol.shape)):
            continue
        flood_fill_object(
            predictor,
            vol_norm,
            canvas,
            pos,
            fov_size=fov_size,
            delta=delta,
            t_move=t_move,
            t_mask=t_mask,
        )
    return canvas.labels
