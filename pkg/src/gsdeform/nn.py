"""Dense network substrate: MLPs, reverse-mode gradients, Adam, checkpoints.

Tensors are plain ``torch.Tensor`` values; torch's autograd engine records
the tape.  Everything defaults to float64 so gradient checks against finite
differences are meaningful; training may opt into float32.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ContractError, DataError, DimensionError, NumericError

DEFAULT_DTYPE = torch.float64

CHECKPOINT_MAGIC = b"GSDW"
CHECKPOINT_VERSION = 1


def kaiming_uniform_(weight: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    # ReLU gain, fan-in mode: bound = sqrt(6 / fan_in)
    fan_in = weight.shape[1]
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        u = torch.rand(weight.shape, generator=generator, dtype=torch.float64)
        weight.copy_((2.0 * u - 1.0) * bound)
    return weight


class MLP(nn.Module):
    """Stack of affine layers with ReLU between them and a linear output.

    ``widths`` lists every layer boundary, e.g. ``[in, 64, 64, out]`` is a
    three-layer network.  When ``skip`` is set, the original input is
    concatenated to the activations entering layer ``skip``.
    """

    def __init__(
        self,
        widths: Sequence[int],
        skip: int | None = None,
        zero_last: bool = False,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = DEFAULT_DTYPE,
    ):
        super().__init__()
        if len(widths) < 2:
            raise DimensionError("an MLP needs at least an input and an output width")
        if skip is not None and not 0 < skip < len(widths) - 1:
            raise DimensionError(f"skip index {skip} outside hidden layers 1..{len(widths) - 2}")
        self.widths = list(widths)
        self.skip = skip
        layers = []
        for i in range(len(widths) - 1):
            fan_in = widths[i] + (widths[0] if i == skip else 0)
            layer = nn.Linear(fan_in, widths[i + 1], dtype=dtype)
            kaiming_uniform_(layer.weight, generator)
            nn.init.zeros_(layer.bias)
            layers.append(layer)
        if zero_last:
            nn.init.zeros_(layers[-1].weight)
        self.layers = nn.ModuleList(layers)

    @property
    def in_features(self) -> int:
        return self.widths[0]

    @property
    def out_features(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return forward_mlp(self, x)


def forward_mlp(mlp: MLP, x: torch.Tensor) -> torch.Tensor:
    """Evaluate ``mlp`` on a batch of rows (or a single row)."""
    h = x
    last = len(mlp.layers) - 1
    for i, layer in enumerate(mlp.layers):
        if i == mlp.skip:
            h = torch.cat([h, x], dim=-1)
        if h.shape[-1] != layer.in_features:
            raise DimensionError(
                f"layer {i} expects width {layer.in_features}, got {h.shape[-1]}"
            )
        h = layer(h)
        if i != last:
            h = torch.relu(h)
    return h


class ParamTape(dict):
    """Mapping ``name -> gradient`` produced by :func:`backward`."""

    def flat(self) -> torch.Tensor:
        return torch.cat([g.reshape(-1) for g in self.values()])


def backward(
    loss: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    retain_graph: bool = False,
) -> ParamTape:
    """Reverse-mode gradient of a scalar ``loss`` w.r.t. every named parameter.

    Parameters the loss does not reach receive an all-zero gradient.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = [n for n, p in params.items() if p.requires_grad]
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(
        loss.reshape(()), tensors, retain_graph=retain_graph, allow_unused=True
    )
    tape = ParamTape()
    for name in params:
        tape[name] = torch.zeros_like(params[name])
    for name, p, g in zip(names, tensors, grads):
        tape[name] = torch.zeros_like(p) if g is None else g
    return tape


@dataclass
class ExponentialLR:
    """Log-linear interpolation from ``lr_init`` to ``lr_final``."""

    lr_init: float
    lr_final: float
    total_steps: int

    def __call__(self, step: int) -> float:
        if self.total_steps <= 0 or self.lr_init == self.lr_final:
            return self.lr_init
        frac = min(max(step / self.total_steps, 0.0), 1.0)
        return math.exp((1.0 - frac) * math.log(self.lr_init) + frac * math.log(self.lr_final))


@dataclass
class AdamState:
    schedules: dict[str, ExponentialLR]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def lr(self, name: str, step: int | None = None) -> float:
        return self.schedules[name](self.step if step is None else step)

    def extend(self, name: str, n_rows: int) -> None:
        """Append zero moment rows for ``n_rows`` new leading-dimension entries."""
        if name not in self.m:
            return
        for buf in (self.m, self.v):
            old = buf[name]
            pad = torch.zeros((n_rows, *old.shape[1:]), dtype=old.dtype)
            buf[name] = torch.cat([old, pad], dim=0)

    def compact(self, name: str, keep: torch.Tensor) -> None:
        if name not in self.m:
            return
        self.m[name] = self.m[name][keep]
        self.v[name] = self.v[name][keep]


def adam_step(
    state: AdamState,
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
) -> None:
    """One bias-corrected Adam update, in place, at the scheduled learning rates.

    Every parameter with a schedule is updated; a NaN gradient aborts before
    any parameter is touched.
    """
    names = [n for n in params if n in state.schedules]
    for name in names:
        if name not in grads:
            raise ContractError(f"missing gradient for {name}")
        if torch.isnan(grads[name]).any():
            raise NumericError(f"NaN gradient in {name} at step {state.step}")
    lrs = {name: state.lr(name) for name in names}
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    with torch.no_grad():
        for name in names:
            p, g = params[name], grads[name]
            m = state.m.get(name)
            if m is None or m.shape != p.shape:
                if m is not None:
                    raise ContractError(
                        f"moment buffer for {name} has shape {tuple(m.shape)}, param {tuple(p.shape)}"
                    )
                m = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            state.m[name] = m
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m / c1, denom, value=-lrs[name])


# -- checkpoint format -----------------------------------------------------


def save_weights(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray]) -> None:
    """Write named tensors in the GSDW little-endian float32 format."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.array(value, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a GSDW checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + n].decode("utf-8")
            offset += n
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(dims)
            offset += 4 * size
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    return out


def module_tensors(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module_tensors(prefix: str, module: nn.Module, weights: Mapping[str, np.ndarray]) -> None:
    state = module.state_dict()
    for key, value in state.items():
        name = f"{prefix}.{key}"
        if name not in weights:
            raise DataError(f"checkpoint lacks {name}")
        arr = weights[name]
        if tuple(arr.shape) != tuple(value.shape):
            raise DataError(f"{name}: shape {arr.shape} != expected {tuple(value.shape)}")
        state[key] = torch.as_tensor(arr, dtype=value.dtype)
    module.load_state_dict(state)


def named_parameters(modules: Iterable[tuple[str, nn.Module]]) -> dict[str, torch.Tensor]:
    out = {}
    for prefix, module in modules:
        for k, p in module.named_parameters():
            out[f"{prefix}.{k}"] = p
    return out
