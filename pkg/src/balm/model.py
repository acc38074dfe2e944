"""Parameter containers, seeded initialisation and the linear layer."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from .autograd import Tensor, add, matmul


def role_rng(seed: int, role: str) -> np.random.Generator:
    """Independent stream per (seed, role) so adding a group never shifts another's init."""
    return np.random.default_rng([int(seed), zlib.crc32(role.encode())])


def uniform_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    """Weight ``(fan_in, fan_out)`` and bias ``(1, fan_out)`` from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    W = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=(1, fan_out)), requires_grad=True)
    return W, b


def zero_linear(fan_in: int, fan_out: int):
    return (Tensor(np.zeros((fan_in, fan_out)), requires_grad=True),
            Tensor(np.zeros((1, fan_out)), requires_grad=True))


def linear(x, W: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, W), b)


class ModelState:
    """Named parameter groups, e.g. ``encoder:a``, ``fusion``, ``head``, ``fcm``, ``uni:a``."""

    def __init__(self, groups: dict[str, dict[str, Tensor]] | None = None):
        self.groups: dict[str, dict[str, Tensor]] = {}
        for name, params in (groups or {}).items():
            self.add_group(name, params)

    def add_group(self, name: str, params: dict[str, Tensor]) -> None:
        if name in self.groups:
            raise ValueError(f"duplicate parameter group {name!r}")
        self.groups[name] = dict(params)
        self.audit()

    def __getitem__(self, name) -> dict[str, Tensor]:
        return self.groups[name]

    def __contains__(self, name) -> bool:
        return name in self.groups

    def tensors(self, group: str) -> list[Tensor]:
        return list(self.groups[group].values())

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for g, params in self.groups.items():
            for k, t in params.items():
                yield f"{g}/{k}", t

    def audit(self) -> None:
        """Raise if any tensor object appears in two groups."""
        seen: dict[int, str] = {}
        for name, t in self.named_tensors():
            if id(t) in seen:
                raise ValueError(f"tensor shared between {seen[id(t)]} and {name}")
            seen[id(t)] = name

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def clone(self) -> "ModelState":
        return ModelState({
            g: {k: Tensor(t.data, requires_grad=t.requires_grad) for k, t in params.items()}
            for g, params in self.groups.items()
        })
