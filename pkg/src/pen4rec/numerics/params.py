from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Parameter, Tape


class ModelParams:
    """Ordered, uniquely named collection of :class:`Parameter` objects."""

    def __init__(self, items: dict[str, np.ndarray] | None = None):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def accumulate(self, tape: Tape) -> None:
        """Add the tape's gradients into each parameter's buffer."""
        for p in self:
            p.grad += tape.grad(p)

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            target = self._params[name]
            if target.data.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {target.data.shape}")
            target.data[...] = value

    def copy(self) -> "ModelParams":
        return ModelParams(self.state())

    def n_entries(self) -> int:
        return int(sum(p.data.size for p in self))
