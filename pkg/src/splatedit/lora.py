"""Low-rank adaptation of frozen linear maps.

An :class:`AdaptedLinear` computes ``W x + scaling * B (A x) + bias`` where
``W`` and ``bias`` are frozen and only the rank-r factors ``A`` (r x d_in)
and ``B`` (d_out x r) train. ``B`` starts at zero so a fresh adapter is an
exact no-op.
"""
import struct
from dataclasses import dataclass

import numpy as np

DEFAULT_RANK = 8
LORA_MAGIC = b"LORA"
LORA_VERSION = 1


class LoraFormatError(ValueError):
    pass


@dataclass
class LowRankDelta:
    A: np.ndarray
    B: np.ndarray
    scaling: float = 1.0

    @property
    def rank(self):
        return self.A.shape[0]

    def dense(self):
        return self.scaling * (self.B @ self.A)


def init_delta(d_in, d_out, r, seed=0):
    """A ~ N(0, 1/r), B = 0, scaling 1; deterministic in ``seed``."""
    if not (isinstance(r, (int, np.integer)) and 0 < r <= min(d_in, d_out)):
        raise ValueError(f"rank must satisfy 0 < r <= min(d_in, d_out), got {r}")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, d_in))
    return LowRankDelta(A, np.zeros((d_out, r)), 1.0)


class AdaptedLinear:
    """Frozen linear map with an optional trainable low-rank residual."""

    def __init__(self, W, bias=None, delta=None, trainable=True):
        self.W = np.asarray(W, dtype=np.float64)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self.delta = delta
        self.trainable = trainable

    @property
    def d_in(self):
        return self.W.shape[1]

    @property
    def d_out(self):
        return self.W.shape[0]

    def __call__(self, x):
        return adapted_forward(self, x)

    def backward(self, x, grad_out, base=False):
        """Gradients for an output gradient ``grad_out`` (same leading dims as x).

        Returns ``(grad_x, grads)``; ``grads`` holds "A" and "B" when a delta
        is attached and, with ``base=True``, "W" and "bias" as well.
        """
        x2 = x.reshape(-1, self.d_in)
        g2 = grad_out.reshape(-1, self.d_out)
        grads = {}
        grad_x = g2 @ self.W
        if self.delta is not None:
            d = self.delta
            ax = x2 @ d.A.T
            gb = g2.T @ ax * d.scaling
            gax = (g2 @ d.B) * d.scaling
            grads["A"] = gax.T @ x2
            grads["B"] = gb
            grad_x = grad_x + gax @ d.A
        if base:
            grads["W"] = g2.T @ x2
            if self.bias is not None:
                grads["bias"] = g2.sum(axis=0)
        return grad_x.reshape(x.shape), grads


def adapted_forward(layer, x):
    """W x + scaling * B (A x) + bias, applied along the last axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.d_in:
        raise ValueError(f"expected input width {layer.d_in}, got {x.shape[-1]}")
    y = x @ layer.W.T
    d = layer.delta
    if d is not None:
        y = y + d.scaling * ((x @ d.A.T) @ d.B.T)
    if layer.bias is not None:
        y = y + layer.bias
    return y


def merge_delta(layer):
    """Dense W + scaling * B A (the bias stays separate)."""
    if layer.delta is None:
        return layer.W.copy()
    return layer.W + layer.delta.dense()


def save_deltas(layers, path):
    """Write the deltas of a ``{name: AdaptedLinear}`` mapping to a LORA file."""
    named = [(n, l.delta) for n, l in layers.items() if l.delta is not None]
    chunks = [LORA_MAGIC, struct.pack("<II", LORA_VERSION, len(named))]
    for name, d in named:
        raw = name.encode("utf-8")
        r, d_in = d.A.shape
        d_out = d.B.shape[0]
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<IIIf", d_in, d_out, r, d.scaling))
        chunks.append(d.A.astype("<f4").tobytes())
        chunks.append(d.B.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    return path


def load_deltas(path):
    """Read a LORA file into ``{name: LowRankDelta}``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != LORA_MAGIC:
        raise LoraFormatError("bad magic")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != LORA_VERSION:
            raise LoraFormatError(f"unsupported version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            d_in, d_out, r, scaling = struct.unpack_from("<IIIf", data, off)
            off += 16
            A = np.frombuffer(data, "<f4", r * d_in, off).reshape(r, d_in)
            off += 4 * r * d_in
            B = np.frombuffer(data, "<f4", d_out * r, off).reshape(d_out, r)
            off += 4 * d_out * r
            out[name] = LowRankDelta(A.astype(np.float64), B.astype(np.float64), float(scaling))
    except struct.error as exc:
        raise LoraFormatError(f"truncated LORA file: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, LoraFormatError):
            raise
        raise LoraFormatError(f"truncated LORA file: {exc}") from None
    return out
