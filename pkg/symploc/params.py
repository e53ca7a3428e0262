"""
Named registry of learnable tensors.

Every branch registers its weights here under dotted names
('instance.rie.w_q', 'global.smt.beta', ...). The registry is what the
optimizer walks and what checkpoints serialize.
"""

import math
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np

from .autodiff import Tensor
from .exceptions import CheckpointFormatError


def inverse_softplus(value: float) -> float:
    """Pre-activation that softplus maps to value (value > 0)."""
    return float(value + math.log(-math.expm1(-value)))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ModelParams:
    """
    Ordered mapping of unique names to requires_grad tensors.

    Insertion order is preserved so that optimizer state and checkpoint
    layout are deterministic.
    """

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"Parameter '{name}' is already registered")
        data = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError(f"Parameter '{name}' has non-finite initial values")
        tensor = Tensor(data, requires_grad=True)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, predicate: Optional[Callable[[str], bool]] = None) -> List[str]:
        return [name for name in self._tensors if predicate is None or predicate(name)]

    def tensors(self, predicate: Optional[Callable[[str], bool]] = None) -> List[Tensor]:
        return [self._tensors[name] for name in self.names(predicate)]

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.grad = None

    def count(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._tensors.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Replace parameter values in place.

        Raises:
            CheckpointFormatError: If names or shapes differ from the registry
        """
        missing = set(self._tensors) - set(state)
        unexpected = set(state) - set(self._tensors)
        if missing or unexpected:
            raise CheckpointFormatError(
                f"Checkpoint does not match model: missing={sorted(missing)}, "
                f"unexpected={sorted(unexpected)}"
            )
        for name, tensor in self._tensors.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise CheckpointFormatError(
                    f"Parameter '{name}' has shape {value.shape}, expected {tensor.shape}"
                )
            tensor.data = value.copy()
