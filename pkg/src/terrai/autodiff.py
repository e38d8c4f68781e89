"""Minimal reverse-mode differentiation for the U-Net operator set.

Tensors are NCHW numpy arrays. A :class:`Graph` records one closure per
forward op; :meth:`Graph.backward` replays them in exact reverse order and can
run only once. Ops keep the dtype of their input, so the same code runs in
float32 for training and float64 for finite-difference checks.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, name={self.name!r})"


class Parameter(Tensor):
    """Trainable tensor whose gradient buffer always exists and matches its shape."""

    __slots__ = ("identifier",)

    def __init__(self, data, identifier: str):
        super().__init__(data, requires_grad=True, name=identifier)
        self.identifier = identifier
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> "Parameter":
        return Parameter(self.data.astype(dtype), self.identifier)


class Graph:
    """Tape of backward closures for one forward pass.

    ``Graph(enabled=False)`` runs the same ops without recording, for inference.
    """

    def __init__(self, enabled: bool = True):
        self._tape: list[Callable[[], None]] = []
        self._used = False
        self.enabled = enabled

    def __len__(self):
        return len(self._tape)

    def record(self, backward_fn: Callable[[], None]):
        if self._used:
            raise GraphError("graph already ran backward; build a new graph")
        if self.enabled:
            self._tape.append(backward_fn)

    def backward(self, output: Tensor, seed: float = 1.0):
        if not self._tape:
            raise GraphError("backward called before any forward op was recorded")
        if self._used:
            raise GraphError("backward called twice on the same graph")
        if output.data.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
        self._used = True
        output.grad = np.full_like(output.data, seed)
        for fn in reversed(self._tape):
            fn()

    def _out(self, data) -> Tensor:
        return Tensor(data, requires_grad=True)

    # -- ops -------------------------------------------------------------------

    def conv2d(self, x: Tensor, weight: Tensor, bias: Tensor, padding: int | None = None) -> Tensor:
        """Zero-padded stride-1 cross-correlation; ``weight`` is (C_out, C_in, k, k)."""
        c_out, c_in, k, k2 = weight.shape
        if k != k2 or k not in (1, 3):
            raise ValueError(f"kernel must be 1x1 or 3x3, got {k}x{k2}")
        pad = (k - 1) // 2 if padding is None else padding
        if 2 * pad != k - 1:
            raise ValueError(f"padding {pad} does not preserve size for a {k}x{k} kernel")
        n, c, h, w = x.shape
        if c != c_in:
            raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
        dtype = x.dtype
        wmat = weight.data.reshape(c_out, -1).astype(dtype, copy=False)
        if k == 1:
            cols = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        else:
            xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
        y = cols @ wmat.T
        y += bias.data.astype(dtype, copy=False)
        out = self._out(np.ascontiguousarray(y.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)))

        def backward():
            if out.grad is None:
                return
            g = out.grad.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
            weight._accumulate((g.T @ cols).reshape(weight.shape))
            bias._accumulate(g.sum(axis=0))
            if not x.requires_grad:
                return
            dcols = g @ wmat
            if k == 1:
                x._accumulate(dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2))
                return
            dcols = dcols.reshape(n, h, w, c, k, k)
            dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, pad:pad + h, pad:pad + w])

        self.record(backward)
        return out

    def relu(self, x: Tensor) -> Tensor:
        active = x.data > 0
        out = self._out(np.where(active, x.data, 0).astype(x.dtype, copy=False))

        def backward():
            if out.grad is None:
                return
            x._accumulate(np.where(active, out.grad, 0))

        self.record(backward)
        return out

    def leaky_relu(self, x: Tensor, slope: float = 0.01) -> Tensor:
        active = x.data > 0
        factor = np.where(active, 1.0, slope).astype(x.dtype)
        out = self._out(x.data * factor)

        def backward():
            if out.grad is None:
                return
            x._accumulate(out.grad * factor)

        self.record(backward)
        return out

    def activation(self, x: Tensor, kind: str = "relu") -> Tensor:
        if kind == "relu":
            return self.relu(x)
        if kind == "leaky_relu":
            return self.leaky_relu(x)
        raise ValueError(f"unknown activation {kind!r}")

    def maxpool2(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool2 needs even spatial size, got {h}x{w}")
        h2, w2 = h // 2, w // 2
        win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        # argmax returns the first maximum, i.e. row-major tie-breaking
        idx = win.argmax(axis=-1)[..., None]
        out = self._out(np.take_along_axis(win, idx, axis=-1)[..., 0])

        def backward():
            if out.grad is None:
                return
            g = np.zeros((n, c, h2, w2, 4), dtype=x.dtype)
            np.put_along_axis(g, idx, out.grad[..., None], axis=-1)
            x._accumulate(g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

        self.record(backward)
        return out

    def upsample2(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        """2x2 stride-2 transposed convolution; ``weight`` is (C_in, C_out, 2, 2)."""
        n, c, h, w = x.shape
        c_in, c_out, kh, kw = weight.shape
        if c != c_in or (kh, kw) != (2, 2):
            raise ValueError(f"upsample2 weight {weight.shape} incompatible with input {x.shape}")
        dtype = x.dtype
        wmat = weight.data.reshape(c_in, c_out * 4).astype(dtype, copy=False)
        xf = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        y = (xf @ wmat).reshape(n, h, w, c_out, 2, 2).transpose(0, 3, 1, 4, 2, 5)
        y = y.reshape(n, c_out, 2 * h, 2 * w) + bias.data.astype(dtype, copy=False)[:, None, None]
        out = self._out(np.ascontiguousarray(y))

        def backward():
            if out.grad is None:
                return
            gy = out.grad.reshape(n, c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)
            gy = gy.reshape(n * h * w, c_out * 4)
            weight._accumulate((xf.T @ gy).reshape(weight.shape))
            bias._accumulate(out.grad.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accumulate((gy @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2))

        self.record(backward)
        return out

    def concat_channels(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ValueError(f"concat needs matching N, H, W: {a.shape} vs {b.shape}")
        ca = a.shape[1]
        out = self._out(np.concatenate([a.data, b.data], axis=1))

        def backward():
            if out.grad is None:
                return
            a._accumulate(out.grad[:, :ca])
            b._accumulate(out.grad[:, ca:])

        self.record(backward)
        return out

    def sum(self, x: Tensor) -> Tensor:
        out = self._out(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype))

        def backward():
            if out.grad is None:
                return
            x._accumulate(np.broadcast_to(out.grad, x.shape))

        self.record(backward)
        return out


# -- parameter serialization ---------------------------------------------------


def save_parameters(params: list[Parameter], bin_path: Path, header: dict | None = None) -> dict:
    """Write all parameters as one flat little-endian float32 blob plus a JSON index.

    The index (written next to ``bin_path`` with a ``.json`` suffix) records
    identifier, shape, byte offset and sha256 of each parameter's bytes.
    """
    bin_path = Path(bin_path)
    entries, chunks, offset = [], [], 0
    for p in params:
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append(
            {
                "identifier": p.identifier,
                "shape": list(p.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    bin_path.write_bytes(blob)
    index = dict(header or {})
    index["parameters"] = entries
    index["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    bin_path.with_suffix(".json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return index


def load_parameters(bin_path: Path) -> tuple[list[Parameter], dict]:
    bin_path = Path(bin_path)
    index = json.loads(bin_path.with_suffix(".json").read_text())
    blob = bin_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != index["blob_sha256"]:
        raise ValueError(f"checksum mismatch in {bin_path.name}")
    params = []
    for e in index["parameters"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ValueError(f"checksum mismatch for parameter {e['identifier']}")
        data = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        params.append(Parameter(data, e["identifier"]))
    return params, index
