"""Named, ordered collections of trainable arrays."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np


class WeightSet:
    """Ordered ``name -> float64 array`` mapping with vector-space helpers.

    Insertion order is the canonical parameter order used for flattening, so
    gradient vectors produced by different code paths line up component-wise.
    Instances are treated as immutable: arithmetic returns new sets.
    """

    __slots__ = ("_arrays",)

    def __init__(self, arrays):
        items = arrays.items() if isinstance(arrays, Mapping) else arrays
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in items:
            if name in self._arrays:
                raise ValueError(f"duplicate weight name {name!r}")
            self._arrays[name] = np.asarray(value, dtype=np.float64)

    def names(self) -> tuple[str, ...]:
        return tuple(self._arrays)

    def items(self):
        return self._arrays.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}:{v.shape}" for k, v in self._arrays.items())
        return f"WeightSet({shapes})"

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._arrays)

    def copy(self) -> "WeightSet":
        return WeightSet({k: v.copy() for k, v in self._arrays.items()})

    def axpy(self, alpha: float, other) -> "WeightSet":
        """Return ``self + alpha * other`` without mutating either operand."""
        data = other._arrays if isinstance(other, WeightSet) else dict(other)
        if set(data) != set(self._arrays):
            missing = set(self._arrays) ^ set(data)
            raise ValueError(f"weight names differ: {sorted(missing)}")
        return WeightSet(
            {k: self._arrays[k] + alpha * np.asarray(data[k], dtype=np.float64)
             for k in self._arrays}
        )

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    @classmethod
    def from_flat(cls, template: "WeightSet", vec: np.ndarray) -> "WeightSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != template.size:
            raise ValueError(f"expected length {template.size}, got {vec.size}")
        out, pos = {}, 0
        for name, arr in template.items():
            out[name] = vec[pos:pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        return cls(out)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def equal(self, other: "WeightSet") -> bool:
        """Bit-exact equality of names, shapes, and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self._arrays[k], other._arrays[k])
                   for k in self._arrays)
