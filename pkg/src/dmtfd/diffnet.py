"""Encoder stack: temporal GRU, attention graph encoder, manifold head.

Reverse-mode differentiation is delegated to torch autograd; this module
adds the pieces the pipeline needs on top of it: seeded initialisation,
a guarded backward pass, and a flat binary checkpoint format.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT = 1


class NonFiniteError(FloatingPointError):
    """A loss or intermediate went NaN/Inf."""


@dataclass
class EncoderOutput:
    temporal: torch.Tensor  # (B, K, h)
    spatial: torch.Tensor  # (B, K, h)
    head: torch.Tensor  # (B, K, h_z)
    steps: torch.Tensor | None = None  # (B, K, T, h_z) features preceding each step, causal mode only


def init_fan_in_(module: nn.Module) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    for name, p in module.named_parameters(recurse=False):
        if "bias" in name:
            nn.init.zeros_(p)
        else:
            fan_in = p.shape[1] if p.dim() > 1 else p.shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(p, -bound, bound)


class TemporalEncoder(nn.Module):
    """Single-layer GRU run over the time axis of every entity, shared weights."""

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.hidden = hidden
        self.gru = nn.GRU(input_size=1, hidden_size=hidden, batch_first=True)
        init_fan_in_(self.gru)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        b, k, t = windows.shape
        seq = windows.reshape(b * k, t, 1)
        _, h_last = self.gru(seq)
        return h_last[-1].reshape(b, k, self.hidden)

    def sequence(self, windows: torch.Tensor) -> torch.Tensor:
        """Hidden state after every step: (B, K, T) -> (B, K, T, h)."""
        b, k, t = windows.shape
        states, _ = self.gru(windows.reshape(b * k, t, 1))
        return states.reshape(b, k, t, self.hidden)


class GraphEncoder(nn.Module):
    """Dense self-attention adjacency over entities, one message-passing step.

    ``A = softmax(q k^T / sqrt(h))`` row-wise, ``y = A g W + g``.
    """

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.hidden = hidden
        self.query = nn.Linear(hidden, hidden, bias=False)
        self.key = nn.Linear(hidden, hidden, bias=False)
        self.weight = nn.Linear(hidden, hidden, bias=False)
        for m in (self.query, self.key, self.weight):
            init_fan_in_(m)

    def adjacency(self, temporal: torch.Tensor) -> torch.Tensor:
        scores = self.query(temporal) @ self.key(temporal).transpose(-1, -2)
        return torch.softmax(scores / math.sqrt(self.hidden), dim=-1)

    def forward(self, temporal: torch.Tensor) -> torch.Tensor:
        adj = self.adjacency(temporal)
        return self.weight(adj @ temporal) + temporal


class ManifoldHead(nn.Module):
    """Two-layer perceptron applied per entity.

    With ``normalize`` the output is layer-normalized (no gain or bias).  The
    median-scaled kernel loss is blind to the overall scale of z, so without
    it that scale drifts upward during training until the flow conditioner
    saturates.
    """

    def __init__(self, hidden: int = 32, out_dim: int = 16, activation: bool = True, normalize: bool = True):
        super().__init__()
        if normalize and out_dim < 2:
            raise ValueError("a normalized head needs out_dim >= 2")
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        self.act = nn.LeakyReLU(0.1) if activation else nn.Identity()
        self.norm = nn.LayerNorm(out_dim, elementwise_affine=False) if normalize else nn.Identity()
        for m in (self.fc1, self.fc2):
            init_fan_in_(m)

    def forward(self, spatial: torch.Tensor) -> torch.Tensor:
        return self.norm(self.fc2(self.act(self.fc1(spatial))))


def first_non_finite(named_tensors) -> str | None:
    for name, t in named_tensors:
        if t is not None and not torch.isfinite(t).all():
            return name
    return None


def backprop(loss: torch.Tensor, intermediates=()) -> None:
    """Backward pass that refuses to propagate a non-finite loss.

    ``intermediates`` is an ordered iterable of (name, tensor) pairs used to
    name the first offending value in the error message.
    """
    if not torch.isfinite(loss).all():
        culprit = first_non_finite(intermediates)
        where = f"first non-finite intermediate: {culprit}" if culprit else "loss only"
        raise NonFiniteError(f"non-finite loss {loss.item()!r} ({where})")
    loss.backward()


# --- checkpoint format ------------------------------------------------------

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def save_checkpoint(state: dict, directory, meta: dict | None = None) -> None:
    """Write ``checkpoint.json`` (layout + meta) and ``checkpoint.bin`` (raw little-endian)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, tensor in state.items():
        code = _DTYPES[tensor.dtype]
        raw = tensor.detach().cpu().contiguous().numpy().astype(code, copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(tensor.shape), "dtype": code, "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    (directory / "checkpoint.bin").write_bytes(b"".join(chunks))
    manifest = {"format": CHECKPOINT_FORMAT, "parameters": entries, "meta": meta or {}}
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "checkpoint.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = (directory / "checkpoint.bin").read_bytes()
    state = {}
    for e in manifest["parameters"]:
        arr = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        native = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="), copy=True)
        state[e["name"]] = torch.from_numpy(native)
    return state, manifest["meta"]
