"""Dense float64 tensors with reverse-mode autodiff over a fixed kernel set.

Values are immutable once produced by an op (the backing array is frozen);
trainable parameters keep a writeable value buffer plus a persistent gradient
buffer that the optimizer consumes. All math runs in 64-bit floats so that
finite-difference gradient checks are decisive.
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = ["ShapeError", "Tensor", "ParamTensor", "RngState", "no_grad"]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


# Toggled by the no_grad context manager; when False, ops skip graph recording.
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-dimensional float64 value, optionally a node in a backward graph.

    ``shape`` is a tuple of positive ints (may be empty for scalars) and
    ``data`` is the flat row-major view of the values.
    """

    __slots__ = ("array", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, array, requires_grad: bool = False):
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keep 0-d shapes intact
        self.array = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray] | None, ...] = ()

    # -- construction -----------------------------------------------------

    @classmethod
    def from_op(
        cls,
        array: np.ndarray,
        parents: Sequence["Tensor"],
        vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None],
    ) -> "Tensor":
        """Wrap an op result, recording the backward graph if needed."""
        out = cls.__new__(cls)
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not arr.flags.owndata and arr.base is not None:
            arr = arr.copy()  # op outputs own their storage before freezing
        arr.flags.writeable = False
        out.array = arr
        out.grad = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._vjps = tuple(vjps)
        else:
            out._parents = ()
            out._vjps = ()
        return out

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape)), requires_grad=requires_grad)

    @classmethod
    def from_flat(cls, shape: Sequence[int], data: Sequence[float]) -> "Tensor":
        arr = np.asarray(list(data), dtype=np.float64)
        shape = tuple(shape)
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise ShapeError(
                f"shape {shape} implies {int(np.prod(shape, dtype=np.int64))} "
                f"elements but {arr.size} were given"
            )
        return cls(arr.reshape(shape))

    # -- views & metadata --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def to_numpy(self) -> np.ndarray:
        """Detached copy of the values."""
        return np.array(self.array, dtype=np.float64)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output, accumulating leaf gradients."""
        if self.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones(self.shape)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if vjp is None or not parent.requires_grad:
                    continue
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib


class ParamTensor:
    """A named trainable parameter: value tensor plus persistent gradient buffer.

    Names are dotted paths unique within one model (e.g. ``cwp.text.chunk3.W1``).
    """

    __slots__ = ("name", "value")

    def __init__(self, name: str, array: np.ndarray):
        if not name:
            raise ValueError("parameter name must be non-empty")
        self.name = name
        self.value = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self.value.grad = np.zeros(self.value.shape)

    @property
    def grad(self) -> Tensor:
        if self.value.grad is None:
            self.value.grad = np.zeros(self.value.shape)
        return Tensor(self.value.grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.value.grad = np.zeros(self.value.shape)

    def assign(self, array: np.ndarray) -> None:
        """Overwrite the value in place (optimizer / checkpoint restore path)."""
        arr = np.asarray(array, dtype=np.float64)
        if arr.shape != self.value.shape:
            raise ShapeError(
                f"cannot assign shape {arr.shape} to parameter '{self.name}' "
                f"of shape {self.value.shape}"
            )
        self.value.array[...] = arr

    def __repr__(self) -> str:
        return f"ParamTensor(name={self.name!r}, shape={self.shape})"


def _mix_label(label) -> int:
    """Map a child-stream label to a stable 32-bit integer."""
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8")) & 0xFFFFFFFF


class RngState:
    """Deterministic random stream: same seed + same call sequence, same draws.

    Backed by PCG64; child streams derived from labels are independent of the
    parent's consumption, so fold/cell parallelism cannot perturb determinism.
    """

    ALGORITHM = "pcg64"

    def __init__(self, seed: int, algorithm: str = ALGORITHM, _spawn_key: tuple[int, ...] = ()):
        if algorithm != self.ALGORITHM:
            raise ValueError(f"unsupported rng algorithm {algorithm!r}")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.algorithm = algorithm
        self._spawn_key = _spawn_key
        seq = np.random.SeedSequence(self.seed, spawn_key=_spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *labels) -> "RngState":
        """Derive an independent stream keyed by the given labels."""
        key = self._spawn_key + tuple(_mix_label(l) for l in labels)
        return RngState(self.seed, self.algorithm, _spawn_key=key)

    def uniform(self, low: float, high: float, shape: Sequence[int]) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def normal(self, shape: Sequence[int], std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape: Sequence[int] = ()) -> np.ndarray:
        return self._gen.integers(low, high, size=tuple(shape))

    def choice(self, options: Sequence, shape: Sequence[int] = ()) -> np.ndarray:
        return self._gen.choice(np.asarray(options), size=tuple(shape) or None)

    def keep_mask(self, keep_prob: float, shape: Sequence[int]) -> np.ndarray:
        """Boolean mask, True with probability keep_prob per element."""
        return self._gen.uniform(0.0, 1.0, size=tuple(shape)) < keep_prob

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, algorithm={self.algorithm!r}, key={self._spawn_key})"


def init_weight(rng: RngState, fan_in: int, fan_out: int) -> np.ndarray:
    """Weight init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def unique_names(params: Iterable[ParamTensor]) -> None:
    seen: set[str] = set()
    for p in params:
        if p.name in seen:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)
