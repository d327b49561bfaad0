"""The flood-filling network: a stack of residual 3D conv modules.

The network sees a 2-channel field of view (normalized image + object-map
logits) and emits a 1-channel logit update for the same window. Each module
computes y = relu(x + conv(relu(conv(x)))); an input-stage conv lifts the two
channels to the feature width and an output-stage conv projects back to one
channel. SAME padding keeps the spatial shape constant end to end, which the
recurrent object-map overwrite relies on.

Checkpoint files (*.ffnc) use a small binary format documented in the README:
magic "FFNC", u32 version, config block, named little-endian tensors, and an
optional optimizer-moments section. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor_ops import (
    ConvKernel,
    ShapeMismatchError,
    conv3d_backward,
    conv3d_forward,
    relu,
)

CHECKPOINT_MAGIC = b"FFNC"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {"float32": 0, "float64": 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def logit(p: float) -> float:
    """Inverse sigmoid; maps a probability to the logit the network works in."""
    return float(np.log(p / (1.0 - p)))


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """A stored tensor's shape disagrees with the expected configuration."""


@dataclass
class FfnConfig:
    num_modules: int = 12
    features: int = 32
    fov_size: int = 33
    delta: int = 8
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_modules < 1:
            raise ValueError("num_modules must be >= 1")
        if self.features < 1:
            raise ValueError("features must be >= 1")
        if self.fov_size < 3 or self.fov_size % 2 == 0:
            raise ValueError("fov_size must be odd and >= 3")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if self.dtype not in _DTYPE_CODES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPE_CODES)}")

    @property
    def train_subvol_size(self) -> int:
        """Training subvolume edge: one delta step of headroom per direction."""
        return self.fov_size + 2 * self.delta

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def _param_layout(config: FfnConfig):
    """Canonical parameter ordering: (name, shape) pairs.

    This fixed order defines the flattened gradient vector exchanged by the
    ring collective; replica consistency depends on every worker using it.
    """
    k, e = config.features, 3
    layout = [("in.w", (k, 2, e, e, e)), ("in.b", (k,))]
    for m in range(config.num_modules):
        layout.append((f"m{m:02d}a.w", (k, k, e, e, e)))
        layout.append((f"m{m:02d}a.b", (k,)))
        layout.append((f"m{m:02d}b.w", (k, k, e, e, e)))
        layout.append((f"m{m:02d}b.b", (k,)))
    layout.append(("out.w", (1, k, e, e, e)))
    layout.append(("out.b", (1,)))
    return layout


@dataclass
class FfnParams:
    """All network weights, grouped into stage/module kernels."""

    config: FfnConfig
    stage_in: ConvKernel
    modules: list
    stage_out: ConvKernel

    def named_tensors(self):
        yield "in.w", self.stage_in.weights
        yield "in.b", self.stage_in.bias
        for m, (k1, k2) in enumerate(self.modules):
            yield f"m{m:02d}a.w", k1.weights
            yield f"m{m:02d}a.b", k1.bias
            yield f"m{m:02d}b.w", k2.weights
            yield f"m{m:02d}b.b", k2.bias
        yield "out.w", self.stage_out.weights
        yield "out.b", self.stage_out.bias

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.named_tensors()])

    @property
    def num_params(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    @staticmethod
    def flat_layout(config: FfnConfig):
        """(name, start, stop, shape) slices of the flattened vector."""
        out = []
        pos = 0
        for name, shape in _param_layout(config):
            size = int(np.prod(shape))
            out.append((name, pos, pos + size, shape))
            pos += size
        return out

    @classmethod
    def from_flat(cls, config: FfnConfig, flat: np.ndarray) -> "FfnParams":
        layout = cls.flat_layout(config)
        expected = layout[-1][2]
        if flat.size != expected:
            raise ShapeMismatchError(
                f"flat vector has {flat.size} elements, config needs {expected}"
            )
        tensors = {
            name: flat[a:b].reshape(shape) for name, a, b, shape in layout
        }
        modules = [
            (
                ConvKernel(tensors[f"m{m:02d}a.w"], tensors[f"m{m:02d}a.b"]),
                ConvKernel(tensors[f"m{m:02d}b.w"], tensors[f"m{m:02d}b.b"]),
            )
            for m in range(config.num_modules)
        ]
        return cls(
            config=config,
            stage_in=ConvKernel(tensors["in.w"], tensors["in.b"]),
            modules=modules,
            stage_out=ConvKernel(tensors["out.w"], tensors["out.b"]),
        )


def init_params(config: FfnConfig, rng_seed: int) -> FfnParams:
    """He-style fan-in-scaled Gaussian weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(rng_seed)
    dtype = config.np_dtype

    def kernel(out_f, in_f):
        fan_in = in_f * 27
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_f, in_f, 3, 3, 3))
        return ConvKernel(w.astype(dtype), np.zeros(out_f, dtype=dtype))

    k = config.features
    stage_in = kernel(k, 2)
    modules = [(kernel(k, k), kernel(k, k)) for _ in range(config.num_modules)]
    stage_out = kernel(1, k)
    return FfnParams(config, stage_in, modules, stage_out)


@dataclass
class ForwardCache:
    """Activations retained for the hand-chained backward pass."""

    x: np.ndarray
    module_inputs: list = field(default_factory=list)  # h entering each module
    pre_relu1: list = field(default_factory=list)  # conv1 output per module
    pre_relu2: list = field(default_factory=list)  # skip-sum per module
    head_input: np.ndarray = None  # h entering the output stage
    cols: list = None  # unfolded conv inputs, in call order (training only)


def forward(
    params: FfnParams,
    image_fov: np.ndarray,
    pom_fov: np.ndarray,
    keep_cols: bool = False,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on one FOV (or a batch of FOVs).

    image_fov and pom_fov: (Z, Y, X) or (B, Z, Y, X), equal shapes matching
    fov_size. Returns 1-channel logits with the same spatial shape plus the
    activation cache for backward(). keep_cols trades memory for speed by
    retaining each conv's unfolded input for the backward pass.
    """
    image_fov = np.asarray(image_fov)
    pom_fov = np.asarray(pom_fov)
    if image_fov.shape != pom_fov.shape:
        raise ShapeMismatchError(
            f"image shape {image_fov.shape} != pom shape {pom_fov.shape}"
        )
    f = params.config.fov_size
    if image_fov.shape[-3:] != (f, f, f):
        raise ShapeMismatchError(
            f"FOV spatial shape {image_fov.shape[-3:]} != ({f}, {f}, {f})"
        )
    dtype = params.config.np_dtype
    x = np.stack([image_fov, pom_fov], axis=-4).astype(dtype, copy=False)

    cache = ForwardCache(x=x, cols=[] if keep_cols else None)

    def conv(value, kernel):
        if not keep_cols:
            return conv3d_forward(value, kernel)
        out, cols = conv3d_forward(value, kernel, return_cols=True)
        cache.cols.append(cols)
        return out

    h = conv(x, params.stage_in)
    for k1, k2 in params.modules:
        cache.module_inputs.append(h)
        a = conv(h, k1)
        cache.pre_relu1.append(a)
        s = h + conv(relu(a), k2)
        cache.pre_relu2.append(s)
        h = relu(s)
    cache.head_input = h
    logits = conv(h, params.stage_out)
    return logits, cache


def backward(
    params: FfnParams, cache: ForwardCache, grad_logits: np.ndarray
) -> FfnParams:
    """Exact parameter gradients for a matching forward() call.

    Returns an FfnParams-shaped container holding the gradients.
    """
    if cache is None or cache.head_input is None:
        raise ValueError("backward() needs the cache produced by forward()")
    cols = cache.cols

    def col(i):
        return None if cols is None else cols[i]

    last = 1 + 2 * len(params.modules)
    gh, g_out = conv3d_backward(
        cache.head_input, params.stage_out, grad_logits, cols=col(last)
    )
    g_modules = [None] * len(params.modules)
    for m in range(len(params.modules) - 1, -1, -1):
        k1, k2 = params.modules[m]
        gs = np.where(cache.pre_relu2[m] > 0, gh, 0)
        r = relu(cache.pre_relu1[m])
        gr, g_k2 = conv3d_backward(r, k2, gs, cols=col(2 + 2 * m))
        ga = np.where(cache.pre_relu1[m] > 0, gr, 0)
        gh_conv, g_k1 = conv3d_backward(
            cache.module_inputs[m], k1, ga, cols=col(1 + 2 * m)
        )
        gh = gs + gh_conv
        g_modules[m] = (g_k1, g_k2)
    _, g_in = conv3d_backward(cache.x, params.stage_in, gh, cols=col(0))
    return FfnParams(params.config, g_in, g_modules, g_out)


def apply_pom_update(
    pom: np.ndarray, logits: np.ndarray, fov_origin: tuple
) -> np.ndarray:
    """Overwrite the FOV window of a POM-logit region with fresh network output.

    pom: (Z, Y, X) logits covering the working region; logits: (F, F, F) or
    (1, F, F, F); fov_origin: window corner (z, y, x) in region coordinates.
    The window must lie inside the region. Updates in place and returns pom.
    """
    logits = np.asarray(logits)
    if logits.ndim == 4:
        if logits.shape[0] != 1:
            raise ShapeMismatchError(f"expected 1-channel logits, got {logits.shape}")
        logits = logits[0]
    z0, y0, x0 = fov_origin
    fz, fy, fx = logits.shape
    if (
        z0 < 0 or y0 < 0 or x0 < 0
        or z0 + fz > pom.shape[0]
        or y0 + fy > pom.shape[1]
        or x0 + fx > pom.shape[2]
    ):
        raise ValueError(
            f"FOV window at {fov_origin} size {logits.shape} is outside region "
            f"{pom.shape}"
        )
    pom[z0 : z0 + fz, y0 : y0 + fy, x0 : x0 + fx] = logits
    return pom


# --- checkpoint I/O ---------------------------------------------------------


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(
            f"truncated checkpoint: wanted {n} bytes, got {len(data)}"
        )
    return data


def _write_tensor(fh, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype.name], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).astype(f"<{arr.dtype.str[1:]}").tobytes())


def _read_tensor(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"unknown dtype code {code} for tensor {name}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    dtype = np.dtype(_CODE_DTYPES[code]).newbyteorder("<")
    nbytes = int(np.prod(shape)) * dtype.itemsize
    arr = np.frombuffer(_read_exact(fh, nbytes), dtype=dtype).reshape(shape)
    return name, arr.astype(_CODE_DTYPES[code])


def save_checkpoint(path, params: FfnParams, step: int, adam_state=None):
    """Write params (and, when given, Adam moments) to a versioned binary file."""
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(
            struct.pack(
                "<IIIIB",
                cfg.num_modules,
                cfg.features,
                cfg.fov_size,
                cfg.delta,
                _DTYPE_CODES[cfg.dtype],
            )
        )
        fh.write(struct.pack("<Q", step))
        tensors = list(params.named_tensors())
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)
        if adam_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", adam_state.t))
            fh.write(struct.pack("<ddd", adam_state.beta1, adam_state.beta2, adam_state.eps))
            _write_tensor(fh, "adam.m", adam_state.m)
            _write_tensor(fh, "adam.v", adam_state.v)


def load_checkpoint(path, expect_config: FfnConfig | None = None):
    """Read a checkpoint; returns (params, step, adam_state_or_None).

    When expect_config is given, every stored tensor shape is validated
    against it and the first disagreement raises CheckpointShapeError.
    """
    from .optim import AdamState  # local import to avoid a cycle

    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        num_modules, features, fov_size, delta, dcode = struct.unpack(
            "<IIIIB", _read_exact(fh, 17)
        )
        if dcode not in _CODE_DTYPES:
            raise CheckpointError(f"unknown config dtype code {dcode}")
        config = FfnConfig(
            num_modules=num_modules,
            features=features,
            fov_size=fov_size,
            delta=delta,
            dtype=_CODE_DTYPES[dcode],
        )
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        expected_shapes = (
            dict(_param_layout(expect_config)) if expect_config is not None else None
        )
        tensors = {}
        for _ in range(count):
            name, arr = _read_tensor(fh)
            if expected_shapes is not None:
                want = expected_shapes.get(name)
                if want is None or tuple(arr.shape) != tuple(want):
                    raise CheckpointShapeError(
                        f"tensor {name}: stored shape {tuple(arr.shape)} does not "
                        f"match expected {want}"
                    )
            tensors[name] = arr
        want_names = [name for name, _ in _param_layout(config)]
        missing = [n for n in want_names if n not in tensors]
        if missing:
            raise CheckpointShapeError(f"checkpoint is missing tensors: {missing}")
        (adam_flag,) = struct.unpack("<B", _read_exact(fh, 1))
        adam_state = None
        if adam_flag:
            (t,) = struct.unpack("<Q", _read_exact(fh, 8))
            beta1, beta2, eps = struct.unpack("<ddd", _read_exact(fh, 24))
            _, m = _read_tensor(fh)
            _, v = _read_tensor(fh)
            adam_state = AdamState(m=m, v=v, t=t, beta1=beta1, beta2=beta2, eps=eps)

    flat = np.concatenate([tensors[name].ravel() for name in want_names])
    params = FfnParams.from_flat(config, flat.astype(config.np_dtype))
    return params, step, adam_state
