"""Numerical substrate: precision modes, named RNG streams, gradient checks and
the tensor container format used for every checkpoint in the package.

Gradients come from torch autograd. ``finite_difference_check`` is the
independent oracle: it only ever evaluates the loss at perturbed inputs.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from arralab.errors import IntegrityError, ShapeError

GraphFn = Callable[[Mapping[str, torch.Tensor]], torch.Tensor]

_VERIFY = False


# ---------------------------------------------------------------------------
# precision / determinism


def compute_dtype() -> torch.dtype:
    return torch.float64 if _VERIFY else torch.float32


@contextlib.contextmanager
def verification_mode():
    """Run the enclosed block in 64-bit mode (gradient checks need it)."""
    global _VERIFY
    prev_flag, prev_dtype = _VERIFY, torch.get_default_dtype()
    _VERIFY = True
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        _VERIFY = prev_flag
        torch.set_default_dtype(prev_dtype)


def set_deterministic(flag: bool = True, threads: int = 1) -> None:
    """Single-threaded, deterministic kernels. Parallelism only when off."""
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(max(1, threads))
        torch.use_deterministic_algorithms(False)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # tanh approximation everywhere, including under gradient checks
    return F.gelu(x, approximate="tanh")


def check_same_shape(a: torch.Tensor, b: torch.Tensor, op: str, names=("a", "b")) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(op, {names[0]: tuple(a.shape), names[1]: tuple(b.shape)})


# ---------------------------------------------------------------------------
# RNG


def _stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStreams:
    """Independent counter-based generators, one per named stochastic site.

    Two runs that differ in one config axis still draw identical numbers at
    every site that axis does not touch.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = np.random.Generator(np.random.Philox(key=_stream_key(self.seed, name)))
            self._streams[name] = gen
        return gen

    def state_dict(self) -> dict:
        return {name: _jsonable(g.bit_generator.state) for name, g in self._streams.items()}

    def load_state_dict(self, state: Mapping) -> None:
        for name, st in state.items():
            gen = self.get(name)
            gen.bit_generator.state = _philox_state(st)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return {"__nd__": obj.dtype.str, "v": [int(v) for v in obj.ravel()]}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _philox_state(obj):
    if isinstance(obj, dict) and "__nd__" in obj:
        return np.array(obj["v"], dtype=np.dtype(obj["__nd__"]))
    if isinstance(obj, dict):
        return {k: _philox_state(v) for k, v in obj.items()}
    return obj


def normal_(t: torch.Tensor, rng: np.random.Generator, std: float) -> None:
    with torch.no_grad():
        t.copy_(torch.from_numpy(np.asarray(rng.standard_normal(tuple(t.shape)) * std)))


def init_module(module: torch.nn.Module, rng: np.random.Generator, std: float = 0.02) -> None:
    """Seeded init: N(0, std) for matrices and embeddings, zeros for biases,
    identity affine for layer norms. Parameter order is registration order."""
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        with torch.no_grad():
            if p.dim() >= 2:
                normal_(p, rng, std)
            elif "ln" in name or "norm" in name:
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                normal_(p, rng, std)


# ---------------------------------------------------------------------------
# gradients


def forward_backward(graph_fn: GraphFn, params: Mapping[str, torch.Tensor]):
    """Evaluate ``graph_fn(params)`` and its gradient w.r.t. every param.

    Returns ``(loss, grads)`` with ``grads`` keyed and shaped like ``params``.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = graph_fn(leaves)
    if loss.dim() != 0:
        raise ShapeError("forward_backward", {"loss": tuple(loss.shape), "expected": ()})
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    got = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    grads = {
        k: (g if g is not None else torch.zeros_like(leaves[k])) for k, g in zip(leaves, got)
    }
    return loss.detach(), grads


@dataclass
class GradReport:
    max_rel_err: float
    max_abs_err: float
    per_parameter: dict[str, dict] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def finite_difference_check(
    graph_fn: GraphFn,
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    max_elements: int = 10_000,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradReport:
    """Compare analytic gradients with central differences, element by element.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. The floor is raised
    to the difference-quotient resolution so that one ulp of loss noise on an
    exactly-zero gradient counts as at most 1e-6. Above ``max_elements`` total
    elements a seeded random subsample is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for k, v in params.items():
        if v.dtype != torch.float64:
            raise ValueError(f"parameter {k!r} is {v.dtype}; gradient checks need float64")

    loss, grads = forward_backward(graph_fn, params)
    floor = max(floor, float(np.spacing(abs(loss.item()))) / (2 * eps) / 1e-6)
    base = {k: v.detach().clone() for k, v in params.items()}
    total = sum(v.numel() for v in base.values())
    rng = np.random.default_rng(seed)
    if total > max_elements:
        chosen = set(rng.choice(total, size=max_elements, replace=False).tolist())
    else:
        chosen = None

    def loss_at() -> float:
        with torch.no_grad():
            return float(graph_fn(base))

    report = GradReport(0.0, 0.0)
    offset = 0
    for name, tensor in base.items():
        flat = tensor.view(-1)
        g = grads[name].reshape(-1)
        rel_max = abs_max = 0.0
        n_checked = 0
        for j in range(flat.numel()):
            if chosen is not None and (offset + j) not in chosen:
                continue
            orig = flat[j].item()
            flat[j] = orig + eps
            plus = loss_at()
            flat[j] = orig - eps
            minus = loss_at()
            flat[j] = orig
            numeric = (plus - minus) / (2 * eps)
            analytic = g[j].item()
            abs_err = abs(analytic - numeric)
            rel_err = abs_err / max(abs(analytic), abs(numeric), floor)
            rel_max, abs_max = max(rel_max, rel_err), max(abs_max, abs_err)
            n_checked += 1
        offset += flat.numel()
        report.per_parameter[name] = {
            "max_rel_err": rel_max,
            "max_abs_err": abs_max,
            "checked": n_checked,
        }
        report.max_rel_err = max(report.max_rel_err, rel_max)
        report.max_abs_err = max(report.max_abs_err, abs_max)
    return report


# ---------------------------------------------------------------------------
# container format
#
#   b"ARRC" | u32 version | u64 index_len | u32 index_crc | index JSON | entries
#   entry  = u32 header_len | header JSON {name, dtype, shape} | raw LE data
#
# index JSON = {"meta": {...}, "entries": [{name, offset, length, crc32}],
#               "data_length": int}; offsets are relative to the first entry.

MAGIC = b"ARRC"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


def _as_numpy(value) -> tuple[str, np.ndarray]:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.float64:
        tag = "f64"
    elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        tag = "i64"
    else:
        tag = "f32"
    return tag, arr.astype(_DTYPES[tag], order="C")


def save_tensors(path, tensors: Mapping[str, object], meta: Mapping | None = None) -> None:
    """Write named tensors plus a JSON metadata block; atomic via rename."""
    blobs, entries, offset = [], [], 0
    for name, value in tensors.items():
        tag, arr = _as_numpy(value)
        header = json.dumps({"name": name, "dtype": tag, "shape": list(arr.shape)}).encode()
        blob = struct.pack("<I", len(header)) + header + arr.tobytes(order="C")
        entries.append(
            {"name": name, "offset": offset, "length": len(blob), "crc32": zlib.crc32(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    index = json.dumps(
        {"meta": dict(meta or {}), "entries": entries, "data_length": offset}
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQI", VERSION, len(index), zlib.crc32(index)))
        fh.write(index)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read a container; any truncation or corruption raises IntegrityError."""
    raw = Path(path).read_bytes()
    head = 4 + struct.calcsize("<IQI")
    if len(raw) < head or raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a tensor container")
    version, index_len, index_crc = struct.unpack("<IQI", raw[4:head])
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported version {version}")
    index_bytes = raw[head : head + index_len]
    if len(index_bytes) != index_len or zlib.crc32(index_bytes) != index_crc:
        raise IntegrityError(f"{path}: index table checksum mismatch")
    index = json.loads(index_bytes)
    data = raw[head + index_len :]
    if len(data) != index["data_length"]:
        raise IntegrityError(
            f"{path}: expected {index['data_length']} data bytes, found {len(data)}"
        )
    out: dict[str, torch.Tensor] = {}
    for e in index["entries"]:
        blob = data[e["offset"] : e["offset"] + e["length"]]
        if zlib.crc32(blob) != e["crc32"]:
            raise IntegrityError(f"{path}: entry {e['name']!r} checksum mismatch")
        (hlen,) = struct.unpack("<I", blob[:4])
        header = json.loads(blob[4 : 4 + hlen])
        arr = np.frombuffer(blob[4 + hlen :], dtype=_DTYPES[header["dtype"]])
        out[header["name"]] = torch.from_numpy(arr.reshape(header["shape"]).copy())
    return out, index["meta"]


def module_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
