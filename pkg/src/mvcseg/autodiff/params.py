"""Parameters, SGD with momentum, finite-difference checking, checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import NumericDomainError, Tensor, backward

MAGIC = b"PMVC1"


@dataclass(eq=False)
class Parameter:
    name: str
    tensor: Tensor
    buffer: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.tensor.grad is None:
            self.tensor.grad = np.zeros_like(self.tensor.data)
        if self.buffer is None:
            self.buffer = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad


def uniform_weight(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParameterSet:
    """Ordered, name-unique collection of parameters."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def new(self, name: str, value: np.ndarray) -> Tensor:
        return self.add(Parameter(name, Tensor(value, requires_grad=True))).tensor

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return sum(p.data.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.tensor.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing, extra = set(self._params) - set(state), set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"checkpoint does not match model: missing {sorted(missing)[:5]}, "
                             f"unexpected {sorted(extra)[:5]}")
        for name, value in state.items():
            p = self._params[name]
            if p.data.shape != value.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {p.data.shape}")
            p.data[...] = value


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0) -> None:
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    params = list(params)
    bad = [p.name for p in params if not np.all(np.isfinite(p.grad))]
    if bad:
        raise NumericDomainError(f"non-finite gradient in {', '.join(bad)}")
    for p in params:
        p.buffer *= momentum
        p.buffer += p.grad
        p.data[...] -= lr * p.buffer
        p.grad[...] = 0.0


def grad_check(
    fragment: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative gap between backprop and central differences.

    ``fragment`` must rebuild its scalar output from the current parameter
    values on every call. With ``max_coords`` set, each parameter is probed at
    that many randomly chosen coordinates instead of all of them.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.tensor.zero_grad()
    out = fragment()
    if not np.all(np.isfinite(out.data)):
        raise NumericDomainError("fragment produced a non-finite value")
    backward(out)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.tensor.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = fragment().item()
            flat[i] = orig - eps
            down = fragment().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericDomainError(f"non-finite value while probing {p.name}")
            numeric = (up - down) / (2.0 * eps)
            err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    path = Path(path)
    chunks = [MAGIC]
    for p in params:
        name = p.name.encode("utf-8")
        shape = p.data.shape
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a PMVC1 checkpoint")
    pos = len(MAGIC)
    state: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return state
