"""Reverse-mode differentiation substrate: arrays, tape, parameters.

Every tensor taking part in gradient computation is a :class:`DiffArray`.
Operations (see :mod:`nve.diffcore.ops`) record closures on a :class:`Tape`;
:func:`backward` replays them in reverse to produce exact adjoints.

Dtype policy: float64 for tests and gradient checks, float32 allowed for
training.  Forward passes reject NaN/Inf outputs unless finite checking is
disabled.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Module-level switch; scanning every op output costs a few percent but
# catches divergence at the op that produced it.
_check_finite = True


def set_check_finite(enabled: bool) -> bool:
    """Enable/disable NaN/Inf validation of op outputs. Returns previous value."""
    global _check_finite
    previous = _check_finite
    _check_finite = bool(enabled)
    return previous


def check_finite_enabled() -> bool:
    return _check_finite


_node_counter = itertools.count()


class DiffArray:
    """N-dimensional float array with an identity on a computation tape."""

    __slots__ = ("values", "tape", "node_id", "grad")

    def __init__(self, values, tape: "Tape | None" = None, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if _check_finite and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in DiffArray")
        self.values = arr
        self.tape = tape
        self.node_id = next(_node_counter)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}, node={self.node_id})"


class Tape:
    """Ordered record of one forward pass, replayable once in reverse."""

    def __init__(self):
        self._records: list[tuple[int, object]] = []
        self.consumed = False

    def record(self, out_id: int, backward_fn) -> None:
        self._records.append((out_id, backward_fn))

    def __len__(self):
        return len(self._records)


@dataclass
class Parameter:
    """Named model weight. Non-trainable parameters (e.g. running batch-norm
    statistics) are checkpointed but skipped by the optimizer."""

    name: str
    array: DiffArray
    trainable: bool = True

    @property
    def values(self) -> np.ndarray:
        return self.array.values

    @values.setter
    def values(self, new: np.ndarray) -> None:
        self.array.values = new


def _accumulate(adjoints: dict, node_id: int, grad: np.ndarray) -> None:
    # No in-place accumulation: stored arrays may alias gradients shared with
    # other nodes (and 0-d results may be immutable numpy scalars).
    existing = adjoints.get(node_id)
    if existing is None:
        adjoints[node_id] = grad
    else:
        adjoints[node_id] = existing + grad


def backward(loss: DiffArray, tape: Tape, params) -> dict[str, np.ndarray]:
    """Replay ``tape`` in reverse from scalar ``loss``.

    Returns a gradient map ``{parameter name -> array}``; parameters that did
    not influence ``loss`` get zero gradients.  Also stores each gradient on
    ``param.array.grad``.  A tape may be consumed at most once.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward call")
    if loss.tape is not tape:
        raise ValueError("loss was not computed on the given tape")
    tape.consumed = True

    adjoints: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.values)
    }
    for out_id, backward_fn in reversed(tape._records):
        grad = adjoints.pop(out_id, None)
        if grad is not None:
            backward_fn(grad, adjoints)

    if isinstance(params, dict):
        params = params.values()
    grads: dict[str, np.ndarray] = {}
    for p in params:
        g = adjoints.get(p.array.node_id)
        if g is None:
            g = np.zeros_like(p.array.values)
        p.array.grad = g
        grads[p.name] = g
    return grads


def tape_of(*arrays: DiffArray) -> Tape | None:
    """Common tape of the inputs (None if all are tape-less)."""
    tape = None
    for a in arrays:
        if a.tape is not None:
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def uniform_fan_in(shape, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Fan-in-scaled uniform init: U(-b, b) with b = sqrt(1/fan_in)."""
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
