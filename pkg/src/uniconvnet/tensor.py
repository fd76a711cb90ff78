"""Dense tensors, seeded initialization and a reverse-mode gradient tape.

Activations are rank-4 arrays in (batch, channel, height, width) order.
Parameters (biases, LayerNorm affines, linear weights) ride on the same tape
with their natural ranks.

A :class:`Tape` is an append-only list of nodes.  Every node stores the ids
of its inputs and a closure mapping the output gradient to input gradients,
so node ids are topologically ordered by construction and one reverse sweep
over the ids visits each node exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Tensor extents do not satisfy an operator's contract."""


class PartitionError(ValueError):
    """Channel split sizes do not add up to the channel count."""


class TapeError(LookupError):
    """A node id is not on the tape, or tensors from different tapes were mixed."""


DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64


def resolve_dtype(precision: str | np.dtype | type | None) -> np.dtype:
    if precision is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(precision, str):
        try:
            return np.dtype({"f32": np.float32, "f64": np.float64}[precision])
        except KeyError:
            raise ValueError(f"precision must be 'f32' or 'f64', got {precision!r}") from None
    return np.dtype(precision)


class Rng:
    """Seeded sample stream backed by numpy's PCG64 bit generator.

    PCG64 (128-bit LCG state, XSL-RR output) is specified independently of
    the host platform, so a seed always yields the same stream.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int = 0):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def truncated_normal(self, size, std: float) -> np.ndarray:
        # Rejection resampling keeps the stream order fixed for a given seed.
        z = self.normal(size)
        bad = np.abs(z) > 2.0
        while bad.any():
            z[bad] = self.normal(int(bad.sum()))
            bad = np.abs(z) > 2.0
        return z * std


class Tensor:
    """An immutable array, optionally tracked by a :class:`Tape`."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data: np.ndarray, tape: Tape | None = None, node_id: int | None = None):
        data = np.asarray(data).view()
        data.flags.writeable = False
        self.data = data
        self.tape = tape
        self.id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        where = f"node {self.id}" if self.tape is not None else "constant"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {where})"


def _check_shape(shape: Sequence[int]) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 1 for s in shape):
        raise ShapeError(f"shape must be four positive extents (B, C, H, W), got {shape}")
    return shape


def tensor_new(shape: Sequence[int], data, dtype=None) -> Tensor:
    """Copy ``data`` into a new (B, C, H, W) tensor."""
    shape = _check_shape(shape)
    flat = np.array(data, dtype=resolve_dtype(dtype)).ravel()
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ShapeError(
            f"data length {flat.size} does not match shape {shape} (expected {expected})"
        )
    return Tensor(flat.reshape(shape))


def tensor_random_normal(shape: Sequence[int], std: float, rng: Rng, dtype=None) -> Tensor:
    """Truncated normal (cut at two standard deviations), mean zero."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = _check_shape(shape)
    return Tensor(rng.truncated_normal(shape, std).astype(resolve_dtype(dtype)))


@dataclass
class Node:
    tag: str
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    dtype: np.dtype


@dataclass
class Tape:
    """Append-only record of tensor operations."""

    nodes: list[Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, tag: str = "leaf") -> Tensor:
        """Register an input or parameter tensor as a differentiable leaf."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        self.nodes.append(Node(tag, (), None, data.shape, data.dtype))
        return Tensor(data, self, len(self.nodes) - 1)

    def record(self, tag: str, inputs: Sequence[Tensor], value: np.ndarray, backward) -> Tensor:
        ids = []
        for t in inputs:
            if t.tape is not self:
                raise TapeError(f"{tag}: input {t!r} does not belong to this tape")
            ids.append(t.id)
        self.nodes.append(Node(tag, tuple(ids), backward, value.shape, value.dtype))
        return Tensor(value, self, len(self.nodes) - 1)

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if not n.inputs and n.backward is None]


def record(tag: str, inputs: Sequence[Tensor], value: np.ndarray, backward) -> Tensor:
    """Attach ``value`` to the tape shared by the tracked ``inputs``.

    Untracked inputs are constants: their gradients are computed by
    ``backward`` but dropped.  With no tracked input the result is constant.
    """
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise TapeError(f"{tag}: inputs come from different tapes")
    tape = next(iter(tapes.values()))
    tracked = [i for i, t in enumerate(inputs) if t.tape is not None]
    if len(tracked) == len(inputs):
        return tape.record(tag, inputs, value, backward)

    def partial(g):
        grads = backward(g)
        return [grads[i] for i in tracked]

    return tape.record(tag, [inputs[i] for i in tracked], value, partial)


def backward(tape: Tape, output: Tensor | int, seed_gradient) -> dict[int, np.ndarray]:
    """Gradient of <seed_gradient, output> with respect to every leaf on ``tape``."""
    out_id = output.id if isinstance(output, Tensor) else int(output)
    if isinstance(output, Tensor) and output.tape is not tape:
        raise TapeError("output tensor does not belong to this tape")
    if not 0 <= out_id < len(tape.nodes):
        raise TapeError(f"unknown node id {out_id}")
    node = tape.nodes[out_id]
    seed = seed_gradient.data if isinstance(seed_gradient, Tensor) else np.asarray(seed_gradient)
    if seed.shape != node.shape:
        raise ShapeError(f"seed gradient shape {seed.shape} != output shape {node.shape}")

    grads: dict[int, np.ndarray] = {out_id: seed.astype(node.dtype, copy=True)}
    for i in range(out_id, -1, -1):
        g = grads.get(i)
        n = tape.nodes[i]
        if g is None or n.backward is None:
            continue
        for src, gi in zip(n.inputs, n.backward(g)):
            if gi is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
        if n.inputs:
            del grads[i]

    result = {}
    for i in tape.leaves():
        n = tape.nodes[i]
        result[i] = grads.get(i, np.zeros(n.shape, dtype=n.dtype))
    return result


def split_channels(t: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Contiguous channel slices of ``t`` with the given channel counts."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise PartitionError(f"split sizes must be positive, got {sizes}")
    if sum(sizes) != t.shape[1]:
        raise PartitionError(f"split sizes {sizes} sum to {sum(sizes)}, tensor has {t.shape[1]} channels")
    out = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s

        def bwd(g, lo=lo, hi=hi):
            full = np.zeros(t.shape, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        out.append(record("split", [t], t.data[:, lo:hi].copy(), bwd))
        start = hi
    return out


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis."""
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    b, _, h, w = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (b, h, w):
            raise ShapeError(
                f"cannot concatenate {[q.shape for q in parts]}: batch/height/width differ"
            )
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    value = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return record("concat", parts, value, bwd)
