"""
Numpy-backed field types for pydantic models.
"""

from typing import Annotated, Any

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, PlainSerializer


def _as_float32(value: Any) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(value, dtype=np.float32))


def _as_float64(value: Any) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(value, dtype=np.float64))


def _as_bool(value: Any) -> np.ndarray:
    array = np.asarray(value)
    if array.dtype != np.bool_:
        array = array > 0
    return np.ascontiguousarray(array)


def _to_list(array: np.ndarray) -> list:
    return array.tolist()


Float32Array = Annotated[np.ndarray, BeforeValidator(_as_float32), PlainSerializer(_to_list)]
Float64Array = Annotated[np.ndarray, BeforeValidator(_as_float64), PlainSerializer(_to_list)]
BoolArray = Annotated[np.ndarray, BeforeValidator(_as_bool), PlainSerializer(_to_list)]


class ArrayModel(BaseModel):
    """Base model whose equality compares array fields element-wise."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    def __eq__(self, other: object) -> bool:
        if type(self) is not type(other):
            return NotImplemented
        for name in type(self).model_fields:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None
