"""Volume I/O, synthetic volumes, training-example extraction, and sampling.

Volumes are numpy arrays indexed (z, y, x); uint8 for grayscale images and
uint32 for label volumes (0 = background). Files use the "FFNV" format:

    magic  b"FFNV"
    dtype  u8   0 = uint8 grayscale, 1 = uint32 labels
    dims   3 x u64 little-endian, stored as (x, y, z)
    data   raw voxels, x fastest (C order of the (z, y, x) array)

Training examples are cut from a parent volume lazily: extract_examples scans
every valid center once (fractions via per-object integral images) and the
returned TrainingSet materializes crops on indexing, so large example sets
stay cheap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

VOLUME_MAGIC = b"FFNV"
NUM_FRACTION_CLASSES = 17

_VOLUME_DTYPES = {0: np.uint8, 1: np.uint32}

SOFT_LABEL_IN = 0.95
SOFT_LABEL_OUT = 0.05


class VolumeFormatError(Exception):
    """Base class for FFNV file problems."""


class BadVolumeMagicError(VolumeFormatError):
    pass


class VolumeDtypeError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


def save_volume(path, vol: np.ndarray):
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise VolumeFormatError(f"volume must be 3-D (z, y, x), got {vol.shape}")
    if vol.dtype == np.uint8:
        code = 0
    elif vol.dtype == np.uint32:
        code = 1
    else:
        raise VolumeDtypeError(f"volume dtype must be uint8 or uint32, got {vol.dtype}")
    z, y, x = vol.shape
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<B", code))
        fh.write(struct.pack("<QQQ", x, y, z))
        fh.write(np.ascontiguousarray(vol).tobytes())


def load_volume(path, expect: str | None = None) -> np.ndarray:
    """Read an FFNV file. expect may be "image" or "labels" to enforce dtype."""
    with open(path, "rb") as fh:
        header = fh.read(29)
        if len(header) < 29:
            raise TruncatedVolumeError(f"{path}: header truncated")
        if header[:4] != VOLUME_MAGIC:
            raise BadVolumeMagicError(f"{path} is not an FFNV volume (bad magic)")
        code = header[4]
        if code not in _VOLUME_DTYPES:
            raise VolumeDtypeError(f"{path}: unknown dtype code {code}")
        x, y, z = struct.unpack("<QQQ", header[5:29])
        dtype = np.dtype(_VOLUME_DTYPES[code])
        want = x * y * z * dtype.itemsize
        payload = fh.read(want + 1)
    if len(payload) < want:
        raise TruncatedVolumeError(
            f"{path}: payload has {len(payload)} bytes, header promises {want}"
        )
    if len(payload) > want:
        raise VolumeFormatError(f"{path}: trailing bytes after payload")
    if expect == "image" and code != 0:
        raise VolumeDtypeError(f"{path}: expected a grayscale image volume")
    if expect == "labels" and code != 1:
        raise VolumeDtypeError(f"{path}: expected a label volume")
    return np.frombuffer(payload, dtype=dtype.newbyteorder("<")).reshape(z, y, x).astype(dtype)


def normalize_image(vol: np.ndarray) -> np.ndarray:
    """Map uint8 voxels to float32 in [-0.5, 0.5], the network's input range."""
    return (vol.astype(np.float32) / 255.0) - 0.5


def gen_synthetic(
    dims, num_objects: int, noise_sigma: float, rng_seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Generate an EM-like volume: Voronoi-cell objects with dark membranes.

    dims: (x, y, z) or a single cube edge. Objects are the Voronoi cells of
    num_objects random seed points (ties to the lowest id); the 1-voxel shell
    of each cell against differing neighbors is rendered dark, interiors get a
    per-object base intensity, and Gaussian noise of the given sigma is added.
    Returns (image uint8, labels uint32), deterministic per seed.
    """
    if np.isscalar(dims):
        dims = (int(dims),) * 3
    x, y, z = (int(d) for d in dims)
    if min(x, y, z) < 4:
        raise ValueError(f"dims {dims} too small; each extent must be >= 4")
    n = x * y * z
    if not 1 <= num_objects <= n:
        raise ValueError(f"num_objects must be in [1, {n}]")
    rng = np.random.default_rng(rng_seed)

    flat_seeds = rng.choice(n, size=num_objects, replace=False)
    sz, sy, sx = np.unravel_index(flat_seeds, (z, y, x))
    zz, yy, xx = np.meshgrid(
        np.arange(z), np.arange(y), np.arange(x), indexing="ij"
    )
    best_d2 = np.full((z, y, x), np.inf)
    labels = np.zeros((z, y, x), dtype=np.uint32)
    for i in range(num_objects):
        d2 = (zz - sz[i]) ** 2 + (yy - sy[i]) ** 2 + (xx - sx[i]) ** 2
        closer = d2 < best_d2  # strict: ties keep the earlier (lower) id
        labels[closer] = i + 1
        best_d2[closer] = d2[closer]

    boundary = np.zeros((z, y, x), dtype=bool)
    boundary[1:, :, :] |= labels[1:, :, :] != labels[:-1, :, :]
    boundary[:-1, :, :] |= labels[1:, :, :] != labels[:-1, :, :]
    boundary[:, 1:, :] |= labels[:, 1:, :] != labels[:, :-1, :]
    boundary[:, :-1, :] |= labels[:, 1:, :] != labels[:, :-1, :]
    boundary[:, :, 1:] |= labels[:, :, 1:] != labels[:, :, :-1]
    boundary[:, :, :-1] |= labels[:, :, 1:] != labels[:, :, :-1]

    base = rng.uniform(160.0, 200.0, size=num_objects + 1)
    image = base[labels]
    image[boundary] = 30.0
    if noise_sigma > 0:
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image, labels


def partition_class(f: float) -> int:
    """Uniform 17-bin class of an in-object voxel fraction; bin 16 is closed."""
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"fraction {f} outside [0, 1]")
    return min(int(f * NUM_FRACTION_CLASSES), NUM_FRACTION_CLASSES - 1)


@dataclass
class TrainingExample:
    """One materialized subvolume crop with its soft-label mask."""

    image: np.ndarray  # float32 (S, S, S), normalized to [-0.5, 0.5]
    mask: np.ndarray  # float32 (S, S, S), values 0.05 / 0.95
    center: tuple  # (z, y, x) in parent-volume coordinates
    fraction: float  # share of 0.95 voxels
    class_id: int


class TrainingSet:
    """All valid training examples of a volume, materialized on indexing."""

    def __init__(self, vol, labels, subvol_size, centers, fractions, class_ids):
        self.vol = vol
        self.labels = labels
        self.subvol_size = subvol_size
        self.centers = centers
        self.fractions = fractions
        self.class_ids = class_ids
        self._normalized = normalize_image(vol)

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i: int) -> TrainingExample:
        cz, cy, cx = (int(c) for c in self.centers[i])
        r = self.subvol_size // 2
        sl = (slice(cz - r, cz + r + 1), slice(cy - r, cy + r + 1), slice(cx - r, cx + r + 1))
        label_crop = self.labels[sl]
        center_id = self.labels[cz, cy, cx]
        mask = np.where(label_crop == center_id, SOFT_LABEL_IN, SOFT_LABEL_OUT).astype(
            np.float32
        )
        return TrainingExample(
            image=self._normalized[sl].copy(),
            mask=mask,
            center=(cz, cy, cx),
            fraction=float(self.fractions[i]),
            class_id=int(self.class_ids[i]),
        )

    def class_members(self) -> dict:
        """Nonempty class id -> array of example indices."""
        out = {}
        for c in range(NUM_FRACTION_CLASSES):
            idx = np.flatnonzero(self.class_ids == c)
            if idx.size:
                out[c] = idx
        return out


def _window_sums(mask: np.ndarray, s: int) -> np.ndarray:
    """Sum of a boolean mask over every s-cube window, via a 3D integral image."""
    integral = np.zeros(tuple(d + 1 for d in mask.shape), dtype=np.int64)
    integral[1:, 1:, 1:] = (
        mask.astype(np.int64).cumsum(axis=0).cumsum(axis=1).cumsum(axis=2)
    )
    i = integral
    return (
        i[s:, s:, s:]
        - i[:-s, s:, s:]
        - i[s:, :-s, s:]
        - i[s:, s:, :-s]
        + i[:-s, :-s, s:]
        + i[:-s, s:, :-s]
        + i[s:, :-s, :-s]
        - i[:-s, :-s, :-s]
    )


def extract_examples(
    vol: np.ndarray, labels: np.ndarray, subvol_size: int = 49
) -> TrainingSet:
    """One training example per subvolume center whose voxel is labeled.

    Centers on background (label 0) are skipped: they have no object to mask.
    The soft mask marks voxels sharing the center's object id as 0.95 and the
    rest as 0.05; the fraction of 0.95 voxels picks one of 17 classes.
    """
    if vol.shape != labels.shape:
        raise ValueError(f"volume {vol.shape} and labels {labels.shape} differ")
    s = int(subvol_size)
    if s < 1 or s % 2 == 0:
        raise ValueError("subvol_size must be odd and >= 1")
    if any(d < s for d in vol.shape):
        raise ValueError(
            f"volume {vol.shape} is smaller than subvolume size {s}"
        )
    r = s // 2
    core = (slice(r, vol.shape[0] - r), slice(r, vol.shape[1] - r), slice(r, vol.shape[2] - r))
    center_ids = labels[core]

    fractions_grid = np.zeros(center_ids.shape, dtype=np.float64)
    for obj in np.unique(center_ids):
        if obj == 0:
            continue
        sums = _window_sums(labels == obj, s)
        sel = center_ids == obj
        fractions_grid[sel] = sums[sel] / float(s**3)

    valid = center_ids != 0
    zz, yy, xx = np.nonzero(valid)
    centers = np.stack([zz + r, yy + r, xx + r], axis=1)
    fractions = fractions_grid[valid]
    class_ids = np.minimum(
        (fractions * NUM_FRACTION_CLASSES).astype(np.int64), NUM_FRACTION_CLASSES - 1
    )
    return TrainingSet(vol, labels, s, centers, fractions, class_ids)


@dataclass
class ShardSpec:
    worker_id: int
    num_workers: int

    def __post_init__(self):
        if self.num_workers < 1 or not 0 <= self.worker_id < self.num_workers:
            raise ValueError(
                f"invalid shard: worker {self.worker_id} of {self.num_workers}"
            )


def shard_indices(n: int, shard: ShardSpec, rng_seed: int) -> np.ndarray:
    """This worker's example indices: round-robin over a seed-shuffled order.

    All workers shuffle with the same seed, so the shards partition the full
    index set: pairwise disjoint, union complete.
    """
    order = np.random.default_rng(rng_seed).permutation(n)
    return order[shard.worker_id :: shard.num_workers]


def balanced_sampler(examples: TrainingSet, shard: ShardSpec, rng_seed: int):
    """Infinite deterministic stream of examples, balanced over 17 classes.

    Each draw picks a uniformly random nonempty class within this worker's
    shard, then a uniform member of it. Streams on different workers draw from
    disjoint shards and are individually deterministic for a fixed seed.
    """
    if len(examples) == 0:
        raise ValueError("cannot sample from an empty example list")
    mine = shard_indices(len(examples), shard, rng_seed)
    by_class = {}
    for idx in mine:
        by_class.setdefault(int(examples.class_ids[idx]), []).append(int(idx))
    classes = sorted(by_class)
    members = [np.array(by_class[c]) for c in classes]
    if not classes:
        raise ValueError("worker shard is empty; use fewer workers")
    rng = np.random.default_rng([rng_seed, shard.worker_id])
    while True:
        c = rng.integers(len(classes))
        pool = members[c]
        yield examples[int(pool[rng.integers(pool.size)])]
