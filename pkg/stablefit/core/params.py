"""
ParamStore: the ordered map of named parameter tensors.

A ParamStore is the unit of checkpointing, layer substitution, optimizer
state and gradient-norm reporting. Names follow the dotted BERT-style
scheme (``layer3.attention.query.weight``); iteration order is insertion
order.
"""

from typing import Callable, Dict, Iterable, Iterator, Mapping, Optional, Tuple, Union

import numpy as np

from .ids import array_hash
from .validate import StabilityValidationError

LEAF_SUFFIXES = ("weight", "bias", "gain", "offset")
TOP_LEVEL_GROUPS = ("embeddings", "pooler", "classifier", "mlm_head")


class ParamStore(Mapping[str, np.ndarray]):
    """Ordered, name-unique collection of numpy arrays."""

    def __init__(self, items: Optional[Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]] = None):
        self._data: Dict[str, np.ndarray] = {}
        if items is None:
            return
        pairs = items.items() if isinstance(items, Mapping) else items
        for name, arr in pairs:
            self.add(name, arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} tensors, {self.numel()} values)"

    def add(self, name: str, array: np.ndarray) -> None:
        """Insert a new tensor; names must be unique."""
        if name in self._data:
            raise StabilityValidationError(f"duplicate parameter name: {name}")
        self._data[name] = np.asarray(array)

    def names(self) -> list:
        return list(self._data)

    def numel(self) -> int:
        return int(sum(arr.size for arr in self._data.values()))

    @property
    def dtype(self) -> np.dtype:
        dtypes = {arr.dtype for arr in self._data.values()}
        if len(dtypes) > 1:
            raise StabilityValidationError(f"mixed parameter dtypes: {sorted(str(d) for d in dtypes)}")
        return dtypes.pop() if dtypes else np.dtype(np.float32)

    def copy(self) -> "ParamStore":
        return ParamStore((name, arr.copy()) for name, arr in self._data.items())

    def astype(self, dtype: Union[str, np.dtype]) -> "ParamStore":
        return ParamStore((name, arr.astype(dtype)) for name, arr in self._data.items())

    def zeros_like(self, dtype: Optional[Union[str, np.dtype]] = None) -> "ParamStore":
        return ParamStore(
            (name, np.zeros_like(arr, dtype=dtype or arr.dtype)) for name, arr in self._data.items()
        )

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParamStore":
        return ParamStore((name, fn(name, arr)) for name, arr in self._data.items())

    def select(self, predicate: Callable[[str], bool]) -> "ParamStore":
        return ParamStore((name, arr) for name, arr in self._data.items() if predicate(name))

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamStore":
        """Return a new store with some tensors swapped out; names must exist."""
        unknown = [name for name in updates if name not in self._data]
        if unknown:
            raise StabilityValidationError(f"unknown parameter names: {unknown}")
        return ParamStore((name, updates.get(name, arr)) for name, arr in self._data.items())

    def hash(self) -> str:
        return array_hash(self._data)

    def equal(self, other: "ParamStore") -> bool:
        """Bitwise equality: same names, order, dtypes and values."""
        if self.names() != other.names():
            return False
        return all(
            self[name].dtype == other[name].dtype and np.array_equal(self[name], other[name])
            for name in self
        )


def group_of(name: str, granularity: str = "layer") -> str:
    """
    Map a parameter name to its reporting group.

    ``layer`` granularity groups by encoder layer (``layer3``) or by the
    top-level component (``embeddings``, ``pooler``, ``classifier``,
    ``mlm_head``). ``matrix`` granularity drops only the trailing leaf
    (``layer3.attention.key``, ``layer3.attention.output.dense``).
    """
    parts = name.split(".")
    if granularity == "layer":
        return parts[0]
    if granularity == "matrix":
        if len(parts) > 1 and parts[-1] in LEAF_SUFFIXES:
            parts = parts[:-1]
        return ".".join(parts)
    raise StabilityValidationError(f"unknown gradient-norm granularity: {granularity!r}")


def layer_index(name: str) -> Optional[int]:
    """Encoder layer index of a parameter, or None for non-layer parameters."""
    head = name.split(".", 1)[0]
    if head.startswith("layer") and head[5:].isdigit():
        return int(head[5:])
    return None


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    """L2 norm over the concatenation of all entries, accumulated in float64."""
    total = 0.0
    for arr in arrays:
        a = np.asarray(arr, dtype=np.float64)
        total += float(np.dot(a.ravel(), a.ravel()))
    return float(np.sqrt(total))
