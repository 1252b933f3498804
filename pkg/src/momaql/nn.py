"""Dense networks with a small reverse-mode tape, gradient clipping and Adam.

Networks are plain MLPs: ``layers`` hidden layers of width ``hidden_dim`` with
an activation after each, followed by a linear output layer. Weights are stored
as ``(fan_in, fan_out)`` matrices so a forward pass is ``h @ W + b``.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, fields

import numpy as np

from . import _kernels
from .errors import DataFormatError, DimensionError, TrainingDivergence, UsageError

CHECKPOINT_FORMAT = "momaql-params"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("silu", "relu", "tanh", "identity")


class ParamStore:
    """Named float64 arrays with a lexicographic iteration order."""

    __slots__ = ("_arrays",)

    def __init__(self, arrays=None):
        arrays = arrays or {}
        self._arrays = {k: np.asarray(arrays[k], dtype=np.float64) for k in sorted(arrays)}

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, value):
        if name not in self._arrays:
            raise KeyError(f"unknown parameter {name!r}")
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    def values(self):
        return self._arrays.values()

    def shapes(self):
        return {k: a.shape for k, a in self._arrays.items()}

    def copy(self):
        return ParamStore({k: a.copy() for k, a in self._arrays.items()})

    def zeros_like(self):
        return ParamStore({k: np.zeros_like(a) for k, a in self._arrays.items()})

    def size(self):
        return sum(a.size for a in self._arrays.values())

    def flat(self):
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def global_norm(self):
        return math.sqrt(sum(float(np.dot(a.ravel(), a.ravel())) for a in self._arrays.values()))

    def check_layout(self, other):
        if self.shapes() != other.shapes():
            raise DimensionError("parameter layouts differ")

    def __repr__(self):
        inner = ", ".join(f"{k}{a.shape}" for k, a in self._arrays.items())
        return f"ParamStore({inner})"


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden_dim: int
    layers: int
    out_dim: int
    activation: str = "silu"

    def __post_init__(self):
        if self.hidden_dim < 1 or self.layers < 1:
            raise DimensionError("hidden_dim and layers must both be >= 1")
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimensionError("in_dim and out_dim must both be >= 1")
        if self.activation not in ACTIVATIONS:
            raise DimensionError(f"unknown activation {self.activation!r}")

    @property
    def n_linear(self):
        return self.layers + 1

    def widths(self):
        return [self.in_dim] + [self.hidden_dim] * self.layers + [self.out_dim]

    def layout(self):
        """Mapping of parameter name to shape."""
        w = self.widths()
        out = {}
        for i in range(self.n_linear):
            out[f"l{i:02d}.b"] = (w[i + 1],)
            out[f"l{i:02d}.w"] = (w[i], w[i + 1])
        return out


def init_params(spec: MlpSpec, rng, zero_last=False):
    """Uniform fan-in init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.

    ``zero_last`` zeroes the output layer so the network starts at 0.
    """
    arrays = {}
    w = spec.widths()
    for i in range(spec.n_linear):
        bound = 1.0 / math.sqrt(w[i])
        arrays[f"l{i:02d}.w"] = rng.uniform(-bound, bound, size=(w[i], w[i + 1]))
        arrays[f"l{i:02d}.b"] = rng.uniform(-bound, bound, size=(w[i + 1],))
    if zero_last:
        last = spec.n_linear - 1
        arrays[f"l{last:02d}.w"][:] = 0.0
        arrays[f"l{last:02d}.b"][:] = 0.0
    return ParamStore(arrays)


def _act(name, z):
    if name == "silu":
        return _kernels.silu(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, g, aux=None):
    if name == "silu":
        if aux is None:
            _, aux = _kernels.silu_sig(z)
        return _kernels.silu_grad(z, aux, g)
    if name == "relu":
        return g * (z > 0.0)
    if name == "tanh":
        th = np.tanh(z)
        return g * (1.0 - th * th)
    return g


class Tape:
    """Cached activations of one forward pass; consumed by a single ``backward``."""

    __slots__ = ("spec", "params", "inputs", "preacts", "aux", "used")

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params
        self.inputs = []
        self.preacts = []
        self.aux = []
        self.used = False


def _check_params(spec, params):
    layout = spec.layout()
    if set(layout) != set(params.keys()):
        raise DimensionError("parameter names do not match the network layout")
    for name, shape in layout.items():
        if params[name].shape != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")


def mlp_forward(spec: MlpSpec, params: ParamStore, x, record=True, check=False):
    """Run the network on a ``(batch, in_dim)`` matrix.

    Returns ``(out, tape)``; ``tape`` is ``None`` when ``record`` is false.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise DimensionError(f"expected input (batch, {spec.in_dim}), got {x.shape}")
    if check:
        _check_params(spec, params)
    tape = Tape(spec, params) if record else None
    h = x
    last = spec.n_linear - 1
    for i in range(spec.n_linear):
        z = h @ params[f"l{i:02d}.w"] + params[f"l{i:02d}.b"]
        if tape is not None:
            tape.inputs.append(h)
            tape.preacts.append(z)
        if i == last:
            h = z
        elif tape is not None and spec.activation == "silu":
            h, sig = _kernels.silu_sig(z)
            tape.aux.append(sig)
        else:
            h = _act(spec.activation, z)
            if tape is not None:
                tape.aux.append(None)
    return h, tape


def backward(tape: Tape, grad_out):
    """Pull ``dL/d(out)`` back through a recorded pass.

    Returns ``(grads, grad_input)``. Parameters are not touched.
    """
    if tape.used:
        raise UsageError("backward called twice on the same tape")
    tape.used = True
    spec, params = tape.spec, tape.params
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != tape.preacts[-1].shape:
        raise DimensionError(f"grad_out shape {g.shape} != output shape {tape.preacts[-1].shape}")
    grads = {}
    last = spec.n_linear - 1
    for i in range(last, -1, -1):
        if i != last:
            g = _act_grad(spec.activation, tape.preacts[i], g, tape.aux[i])
        grads[f"l{i:02d}.w"] = tape.inputs[i].T @ g
        grads[f"l{i:02d}.b"] = g.sum(axis=0)
        g = g @ params[f"l{i:02d}.w"].T
    tape.inputs = tape.preacts = tape.aux = None
    return ParamStore(grads), g


def add_into(acc: ParamStore, other: ParamStore):
    """In-place ``acc += other``; returns ``acc``."""
    for k, a in other.items():
        acc[k] += a
    return acc


def clip_global_norm(grads: ParamStore, max_norm: float):
    """Rescale so the global L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = grads.global_norm()
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return ParamStore({k: a * scale for k, a in grads.items()}), norm


@dataclass
class AdamState:
    m: ParamStore
    v: ParamStore
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, lr=1e-3, **kw):
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, **kw)


def adam_step(params: ParamStore, grads: ParamStore, state: AdamState):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    params.check_layout(grads)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ------------------------------------------------------------ checkpoints --


def _spec_lines(spec):
    return [f"spec.{f.name}: {getattr(spec, f.name)}" for f in fields(spec)]


def dumps_params(params: ParamStore, spec: MlpSpec | None = None, meta: dict | None = None) -> bytes:
    """Serialize to a text manifest followed by a little-endian float64 payload."""
    lines = [f"format: {CHECKPOINT_FORMAT}", f"version: {CHECKPOINT_VERSION}"]
    if spec is not None:
        lines += _spec_lines(spec)
    for k, v in (meta or {}).items():
        if "\n" in str(v) or ":" in str(k):
            raise ValueError(f"meta entry {k!r} is not a single-line key/value")
        lines.append(f"meta.{k}: {v}")
    offset = 0
    for name, arr in params.items():
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"param: {name} {offset} {shape}")
        offset += arr.size
    lines.append(f"payload_count: {offset}")
    lines.append("end")
    head = ("\n".join(lines) + "\n").encode("ascii")
    payload = params.flat().astype("<f8").tobytes() if offset else b""
    return head + payload


def loads_params(blob: bytes):
    """Inverse of :func:`dumps_params`. Returns ``(params, spec_or_None, meta)``."""
    buf = io.BytesIO(blob)
    header = {}
    spec_kw = {}
    meta = {}
    index = []
    lineno = 0
    while True:
        raw = buf.readline()
        lineno += 1
        if not raw:
            raise DataFormatError("manifest not terminated", lineno)
        line = raw.decode("ascii").rstrip("\n")
        if line == "end":
            break
        key, sep, val = line.partition(": ")
        if not sep:
            raise DataFormatError(f"malformed manifest line {line!r}", lineno)
        if key == "param":
            parts = val.split(" ")
            if len(parts) != 3:
                raise DataFormatError(f"malformed param entry {val!r}", lineno)
            shape = tuple(int(s) for s in parts[2].split(",") if s)
            index.append((parts[0], int(parts[1]), shape))
        elif key.startswith("spec."):
            spec_kw[key[5:]] = val
        elif key.startswith("meta."):
            meta[key[5:]] = val
        else:
            header[key] = val
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"not a parameter file (format={header.get('format')!r})")
    if int(header.get("version", -1)) != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {header.get('version')}")
    count = int(header["payload_count"])
    payload = buf.read()
    if len(payload) != 8 * count:
        raise DataFormatError(f"payload has {len(payload)} bytes, expected {8 * count}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays = {}
    for name, off, shape in index:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = flat[off:off + n].reshape(shape).copy()
    spec = None
    if spec_kw:
        spec = MlpSpec(
            in_dim=int(spec_kw["in_dim"]),
            hidden_dim=int(spec_kw["hidden_dim"]),
            layers=int(spec_kw["layers"]),
            out_dim=int(spec_kw["out_dim"]),
            activation=spec_kw.get("activation", "silu"),
        )
        _check_params(spec, ParamStore(arrays))
    return ParamStore(arrays), spec, meta


def save_params(path, params, spec=None, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps_params(params, spec, meta))


def load_params(path):
    with open(path, "rb") as fh:
        return loads_params(fh.read())
