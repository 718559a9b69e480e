"""Dense tensor primitives, reverse-mode gradients and the NDT1 tensor file format.

Arithmetic and differentiation run on torch tensors; this module pins down the
contracts the rest of the package relies on (error types, masking sentinel,
row softmax, the counter-based RNG and the on-disk format).
"""

from __future__ import annotations

import io
import math
import os
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

MASK_SENTINEL = 1e9
NORM_EPS = 1e-5

_DTYPES = {"f32": torch.float32, "f64": torch.float64}
_NP_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {torch.float32: "f32", torch.float64: "f64"}


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class UnknownLeafError(KeyError):
    pass


class TensorFormatError(ValueError):
    pass


def dtype_of(name: str) -> torch.dtype:
    try:
        return _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


def dtype_name(dtype: torch.dtype) -> str:
    try:
        return _NAMES[dtype]
    except KeyError:
        raise TensorFormatError(f"unsupported dtype {dtype}") from None


# ---------------------------------------------------------------------------
# operations


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with row-max subtraction.

    Entries equal to -inf (or pushed below -MASK_SENTINEL/2 by masking) come
    out as exact zeros. A row with no finite entry raises DegenerateRowError.
    """
    finite = torch.isfinite(x) & (x > -0.5 * MASK_SENTINEL)
    if x.numel() and not bool(finite.any(dim=-1).all()):
        raise DegenerateRowError("softmax_rows: row with no visible (finite) entry")
    row_max = x.detach().masked_fill(~finite, -math.inf).amax(dim=-1, keepdim=True)
    z = torch.exp(x - row_max)
    return z / z.sum(dim=-1, keepdim=True)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def elementwise_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError(f"elementwise_mul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a * b


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = NORM_EPS) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def _check_axis(x: torch.Tensor, axis: int, op: str) -> int:
    nd = x.dim()
    if not -nd <= axis < nd:
        raise DimensionError(f"{op}: axis {axis} out of range for tensor of rank {nd}")
    return axis % nd


def mean_pool(x: torch.Tensor, axis: int) -> torch.Tensor:
    return x.mean(dim=_check_axis(x, axis, "mean_pool"))


def concat(xs: Sequence[torch.Tensor], axis: int) -> torch.Tensor:
    if not xs:
        raise DimensionError("concat: empty input list")
    ax = _check_axis(xs[0], axis, "concat")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        shape = list(t.shape)
        if len(shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(shape, ref)) if i != ax):
            raise DimensionError(f"concat: shape {tuple(shape)} incompatible with {tuple(ref)} along axis {axis}")
    return torch.cat(list(xs), dim=ax)


def grad(loss: torch.Tensor, params: Sequence[torch.Tensor], *, retain_graph: bool = False) -> list[torch.Tensor]:
    """Reverse-mode gradient of a scalar loss with respect to graph leaves.

    Parameters that the loss does not depend on get a zero gradient; a tensor
    that is not a differentiable leaf raises UnknownLeafError.
    """
    if loss.numel() != 1:
        raise DimensionError(f"grad: loss must be scalar, got shape {tuple(loss.shape)}")
    for i, p in enumerate(params):
        if not (p.is_leaf and p.requires_grad):
            raise UnknownLeafError(f"grad: parameter #{i} is not a differentiable leaf of the graph")
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    gs = torch.autograd.grad(loss, list(params), retain_graph=retain_graph, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]


def central_difference(fn: Callable[[], torch.Tensor], param: torch.Tensor, index: tuple[int, ...],
                       h: float = 1e-5) -> float:
    """Central finite difference of a scalar closure w.r.t. one parameter coordinate."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + h
        up = float(fn())
        param[index] = orig - h
        down = float(fn())
        param[index] = orig
    return (up - down) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------------
# counter-based RNG


class Rng:
    """Philox-4x64 generator keyed by (seed, stream).

    Philox is counter based, so distinct streams never overlap and the scalar
    sequence for a given key is the same on every platform.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=(self.stream << 64) | self.seed))

    def child(self, stream: int) -> "Rng":
        # mixes parent stream into the child key so nested derivations stay disjoint
        return Rng(self.seed, (self.stream * 0x9E3779B97F4A7C15 + int(stream) + 1) & 0xFFFFFFFFFFFFFFFF)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def dirichlet(self, alpha, size=None) -> np.ndarray:
        return self._gen.dirichlet(alpha, size)

    def tensor_normal(self, shape: Sequence[int], dtype: torch.dtype = torch.float32,
                      scale: float = 1.0) -> torch.Tensor:
        return torch.from_numpy(self._gen.normal(0.0, scale, tuple(shape))).to(dtype)

    def tensor_uniform(self, shape: Sequence[int], dtype: torch.dtype = torch.float32,
                       low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        return torch.from_numpy(self._gen.uniform(low, high, tuple(shape))).to(dtype)


# ---------------------------------------------------------------------------
# NDT1 tensor format


def encode_tensor(t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    name = dtype_name(t.dtype)
    dims = " ".join(str(s) for s in t.shape)
    header = f"NDT1 {name} {t.dim()}" + (f" {dims}" if dims else "") + "\n"
    payload = t.numpy().astype(_NP_DTYPES[name], copy=False).tobytes(order="C")
    return header.encode("ascii") + payload


def decode_tensor(buf: bytes | io.BufferedIOBase) -> torch.Tensor:
    stream = io.BytesIO(buf) if isinstance(buf, (bytes, bytearray)) else buf
    t = _read_one(stream)
    if stream.read(1):
        raise TensorFormatError("trailing bytes after tensor payload")
    return t


def _read_one(stream) -> torch.Tensor:
    line = stream.readline(256)
    if not line.endswith(b"\n"):
        raise TensorFormatError("truncated or missing NDT1 header")
    parts = line.decode("ascii").split()
    if not parts or parts[0] != "NDT1":
        raise TensorFormatError(f"bad magic {parts[:1]!r}, expected NDT1")
    if len(parts) < 3 or parts[1] not in _NP_DTYPES:
        raise TensorFormatError(f"malformed header {line!r}")
    ndim = int(parts[2])
    shape = tuple(int(s) for s in parts[3:])
    if len(shape) != ndim or any(s < 0 for s in shape):
        raise TensorFormatError(f"header declares {ndim} dims but lists {shape}")
    dt = _NP_DTYPES[parts[1]]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise TensorFormatError(f"truncated payload: expected {nbytes} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=False))


def save_tensor(path: str | os.PathLike, t: torch.Tensor) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path: str | os.PathLike) -> torch.Tensor:
    return decode_tensor(Path(path).read_bytes())


def flatten_params(tensors: Iterable[torch.Tensor]) -> torch.Tensor:
    return torch.cat([t.reshape(-1) for t in tensors])


def init_param(rng: Rng, shape: Sequence[int], scale: float, dtype: torch.dtype) -> torch.nn.Parameter:
    """Gaussian-initialised parameter; ``scale == 0`` gives an exact zero tensor."""
    if scale == 0.0:
        return torch.nn.Parameter(torch.zeros(tuple(shape), dtype=dtype))
    return torch.nn.Parameter(rng.tensor_normal(shape, dtype=dtype, scale=scale))
