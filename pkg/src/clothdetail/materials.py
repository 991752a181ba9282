"""Material vocabulary and one-hot labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

# Order is part of the checkpoint contract: CIN bank index == vocabulary index.
DEFAULT_MATERIALS = (
    "silk_chamuse",
    "denim_lightweight",
    "knit_terry",
    "wool_melton",
    "silk_chiffon",
)


@dataclass(frozen=True)
class MaterialLabel:
    """One-hot material indicator over a fixed vocabulary."""

    one_hot: np.ndarray
    vocabulary: tuple[str, ...] = DEFAULT_MATERIALS

    def __post_init__(self):
        vec = np.asarray(self.one_hot, dtype=np.int64)
        object.__setattr__(self, "one_hot", vec)
        if vec.ndim != 1 or len(vec) != len(self.vocabulary):
            raise ParameterError(
                f"one-hot length {vec.shape} does not match vocabulary size "
                f"{len(self.vocabulary)}"
            )
        if vec.sum() != 1 or not np.all((vec == 0) | (vec == 1)):
            raise ParameterError(f"not a one-hot vector: {vec.tolist()}")

    @property
    def index(self) -> int:
        return int(np.argmax(self.one_hot))

    @property
    def name(self) -> str:
        return self.vocabulary[self.index]

    @classmethod
    def from_index(cls, index: int, vocabulary=DEFAULT_MATERIALS) -> "MaterialLabel":
        if not 0 <= index < len(vocabulary):
            raise ParameterError(f"material index {index} outside vocabulary")
        vec = np.zeros(len(vocabulary), dtype=np.int64)
        vec[index] = 1
        return cls(vec, tuple(vocabulary))

    @classmethod
    def from_name(cls, name: str, vocabulary=DEFAULT_MATERIALS) -> "MaterialLabel":
        try:
            index = tuple(vocabulary).index(name)
        except ValueError:
            raise ParameterError(
                f"unknown material {name!r}; vocabulary: {list(vocabulary)}"
            ) from None
        return cls.from_index(index, vocabulary)

    def __eq__(self, other):
        return (
            isinstance(other, MaterialLabel)
            and self.vocabulary == other.vocabulary
            and self.index == other.index
        )
