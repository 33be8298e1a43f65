"""Parameter store, AdamW, EMA, finite-difference gradient checking,
and the binary checkpoint format.
"""

from __future__ import annotations

import struct
from typing import Callable

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"MARD"
CHECKPOINT_VERSION = 1


class OptimError(RuntimeError):
    pass


class ParamStore:
    """Named parameters plus per-parameter AdamW state and a step counter.

    Entries registered with requires_grad=False are buffers: checkpointed and
    EMA-tracked but never touched by the optimizer (no decay either).
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, values, requires_grad: bool = True) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(values), requires_grad=requires_grad)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore()
        for name, p in self.params.items():
            vals = p.values.astype(dtype) if dtype is not None else p.values.copy()
            out.add(name, vals, requires_grad=p.requires_grad)
        out.step = self.step
        for name, arr in self.m.items():
            out.m[name] = arr.copy()
        for name, arr in self.v.items():
            out.v[name] = arr.copy()
        return out

    def astype(self, dtype) -> "ParamStore":
        return self.copy(dtype=dtype)

    def load_values(self, entries: dict[str, np.ndarray]):
        """Overwrite parameter values in place from a name -> array map."""
        for name, p in self.params.items():
            if name not in entries:
                raise OptimError(f"checkpoint missing parameter {name!r}")
            arr = entries[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise OptimError(f"shape mismatch for {name!r}: {arr.shape} vs {p.shape}")
            p.values = arr.astype(p.dtype, copy=True)


def adamw_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.95,
               weight_decay: float = 0.02, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam step over every trainable parameter."""
    t = store.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for parameter {name!r}")
        if name not in store.m:
            store.m[name] = np.zeros_like(p.values)
            store.v[name] = np.zeros_like(p.values)
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.values
        p.values = p.values - np.asarray(lr, dtype=p.dtype) * update.astype(p.dtype)
    store.step = t


def ema_update(shadow: ParamStore, live: ParamStore, momentum: float = 0.9999) -> None:
    """shadow <- momentum * shadow + (1 - momentum) * live, elementwise."""
    for name, p in live.params.items():
        if name not in shadow.params:
            raise OptimError(f"EMA shadow missing parameter {name!r}")
        s = shadow.params[name]
        if s.shape != p.shape:
            raise OptimError(f"EMA shape mismatch for {name!r}: {s.shape} vs {p.shape}")
        s.values = momentum * s.values + (1.0 - momentum) * p.values


def grad_check(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore,
               step: float = 1e-4, coords_per_param: int = 6, rng=None,
               eps_floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    Runs in float64 regardless of the store's training dtype. Coordinates are
    subsampled per parameter when a parameter is larger than coords_per_param.
    """
    work = params.astype(np.float64)
    out = loss_fn(work)
    base = float(out.values)
    if not np.isfinite(base):
        raise OptimError("non-finite loss at the evaluation point")
    out.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
                for name, p in work.params.items()}

    worst = 0.0
    for name, p in work.params.items():
        if not p.requires_grad or p.size == 0:
            continue
        flat = p.values.reshape(-1)
        if p.size <= coords_per_param or rng is None:
            coords = np.arange(min(p.size, coords_per_param))
        else:
            coords = np.unique(rng.integers(0, p.size, (coords_per_param,)))
        for c in coords:
            c = int(c)
            orig = flat[c]
            flat[c] = orig + step
            hi = float(loss_fn(work).values)
            flat[c] = orig - step
            lo = float(loss_fn(work).values)
            flat[c] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise OptimError(f"non-finite loss while perturbing {name!r}[{c}]")
            fd = (hi - lo) / (2.0 * step)
            an = float(analytic[name].reshape(-1)[c])
            denom = max(abs(an), abs(fd), eps_floor)
            worst = max(worst, abs(an - fd) / denom)
    return worst


# -- checkpoint format -------------------------------------------------------
#
# magic "MARD", u32 version, then repeated entries until EOF:
#   u32 name length, UTF-8 name, u32 rank, u32 extents..., little-endian f32 data


def save_entries(path, entries: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in entries.items():
            arr = np.asarray(arr, dtype=np.float32)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(arr.astype("<f4").tobytes(order="C"))


def load_entries(path) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise OptimError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise OptimError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            entries[name] = data.copy()
    return entries
