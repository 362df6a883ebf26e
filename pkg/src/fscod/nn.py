"""Minimal trainable CNN engine on numpy.

Tensors are (N, C, H, W) arrays, float32 by default; the whole engine can
be instantiated in float64 for gradient checking. Every layer output is
checked for NaN/Inf and a violation raises NonFiniteError immediately.

A network owns one flat parameter vector and one flat gradient vector of
the same length; layers hold reshaped views into both. backward()
accumulates into the gradient vector, so two backward passes without
zero_grads() sum their contributions.
"""

from __future__ import annotations

import json
import math
import struct
import zlib

import numpy as np


class ShapeError(ValueError):
    """Tensor or architecture shape mismatch."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf appeared in an activation, gradient, or parameter."""


class ChecksumError(ValueError):
    """Stored parameter bytes do not match their checksum."""


class VersionError(ValueError):
    """Parameter file version not understood."""


def _require_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


class Conv2d:
    """k x k convolution, stride 1, zero 'same' padding. k is 1 or 3."""

    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, k: int):
        if k not in (1, 3):
            raise ShapeError(f"conv kernel must be 1 or 3, got {k}")
        if in_ch < 1 or out_ch < 1:
            raise ShapeError(f"conv channels must be positive, got {in_ch}->{out_ch}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = k
        self.pad = (k - 1) // 2
        self.w: np.ndarray | None = None
        self.b: np.ndarray | None = None
        self.dw: np.ndarray | None = None
        self.db: np.ndarray | None = None
        self._cache = None

    @property
    def param_count(self) -> int:
        return self.out_ch * self.in_ch * self.k * self.k + self.out_ch

    def bind(self, params: np.ndarray, grads: np.ndarray) -> None:
        nw = self.out_ch * self.in_ch * self.k * self.k
        self.w = params[:nw].reshape(self.out_ch, self.in_ch, self.k, self.k)
        self.b = params[nw:]
        self.dw = grads[:nw].reshape(self.out_ch, self.in_ch, self.k, self.k)
        self.db = grads[nw:]

    def init(self, rng: np.random.Generator) -> None:
        fan_in = self.in_ch * self.k * self.k
        bound = np.sqrt(6.0 / fan_in)
        self.w[...] = rng.uniform(-bound, bound, size=self.w.shape)
        self.b[...] = 0.0

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} input channels, got {c}")
        if self.k == 1:
            wm = self.w.reshape(self.out_ch, self.in_ch)
            y = np.tensordot(x, wm, axes=([1], [1]))  # (N, H, W, O)
            y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
            y += self.b[None, :, None, None]
            if train:
                self._cache = (x, None)
            return y
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * h * w, c * self.k * self.k
        )
        wm = self.w.reshape(self.out_ch, -1)
        y = cols @ wm.T
        y += self.b
        y = np.ascontiguousarray(y.reshape(n, h, w, self.out_ch).transpose(0, 3, 1, 2))
        if train:
            self._cache = (x, cols)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, cols = self._cache
        n, _, h, w = x.shape
        if self.k == 1:
            dym = dy.transpose(1, 0, 2, 3).reshape(self.out_ch, -1)
            xm = x.transpose(1, 0, 2, 3).reshape(self.in_ch, -1)
            self.dw += (dym @ xm.T).reshape(self.w.shape)
            self.db += dym.sum(axis=1)
            wm = self.w.reshape(self.out_ch, self.in_ch)
            dx = np.tensordot(dy, wm, axes=([1], [0]))  # (N, H, W, C)
            return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
        dym = dy.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_ch)
        self.dw += (dym.T @ cols).reshape(self.w.shape)
        self.db += dym.sum(axis=0)
        dcols = (dym @ self.w.reshape(self.out_ch, -1)).reshape(
            n, h, w, self.in_ch, self.k, self.k
        )
        dxp = np.zeros(
            (n, self.in_ch, h + 2 * self.pad, w + 2 * self.pad), dtype=dy.dtype
        )
        for ki in range(self.k):
            for kj in range(self.k):
                dxp[:, :, ki : ki + h, kj : kj + w] += dcols[:, :, :, :, ki, kj].transpose(
                    0, 3, 1, 2
                )
        return dxp[:, :, self.pad : self.pad + h, self.pad : self.pad + w]

    def manifest(self) -> list:
        return ["conv", self.in_ch, self.out_ch, self.k]


class MaxPool2:
    """2x2 max pooling, stride 2. Input sides must be even."""

    kind = "pool"
    param_count = 0

    def __init__(self, in_ch: int):
        self.in_ch = in_ch
        self.out_ch = in_ch
        self._cache = None

    def bind(self, params, grads):
        pass

    def init(self, rng):
        pass

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool needs even sides, got {h}x{w}")
        xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        xr = np.ascontiguousarray(xr).reshape(n, c, h // 2, w // 2, 4)
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (idx, (n, c, h, w))
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        idx, (n, c, h, w) = self._cache
        dxr = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
        dxr = dxr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(dxr).reshape(n, c, h, w)

    def manifest(self) -> list:
        return ["pool", self.in_ch]


class ChannelNorm:
    """Per-channel normalization over the spatial extent of each sample,
    with learnable scale and shift. No running statistics; train and eval
    compute the same thing."""

    kind = "norm"
    eps = 1e-5

    def __init__(self, in_ch: int):
        self.in_ch = in_ch
        self.out_ch = in_ch
        self.g: np.ndarray | None = None
        self.b: np.ndarray | None = None
        self.dg: np.ndarray | None = None
        self.db: np.ndarray | None = None
        self._cache = None

    @property
    def param_count(self) -> int:
        return 2 * self.in_ch

    def bind(self, params: np.ndarray, grads: np.ndarray) -> None:
        self.g = params[: self.in_ch]
        self.b = params[self.in_ch :]
        self.dg = grads[: self.in_ch]
        self.db = grads[self.in_ch :]

    def init(self, rng):
        self.g[...] = 1.0
        self.b[...] = 0.0

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"norm expects {self.in_ch} channels, got {x.shape[1]}")
        mu = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        y = xhat * self.g[None, :, None, None] + self.b[None, :, None, None]
        if train:
            self._cache = (xhat, inv)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        self.dg += np.sum(dy * xhat, axis=(0, 2, 3))
        self.db += np.sum(dy, axis=(0, 2, 3))
        dxhat = dy * self.g[None, :, None, None]
        m1 = dxhat.mean(axis=(2, 3), keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=(2, 3), keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    def manifest(self) -> list:
        return ["norm", self.in_ch]


class LeakyReLU:
    """leaky_relu with fixed negative slope 0.1."""

    kind = "lrelu"
    slope = 0.1
    param_count = 0

    def __init__(self, in_ch: int):
        self.in_ch = in_ch
        self.out_ch = in_ch
        self._cache = None

    def bind(self, params, grads):
        pass

    def init(self, rng):
        pass

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        neg = x < 0
        y = np.where(neg, x * x.dtype.type(self.slope), x)
        if train:
            self._cache = neg
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        neg = self._cache
        return np.where(neg, dy * dy.dtype.type(self.slope), dy)

    def manifest(self) -> list:
        return ["lrelu", self.in_ch]


class Network:
    """Sequential network over the layer kinds above.

    spec is a list of tuples: ("conv", k, out_channels), ("pool",),
    ("norm",), ("lrelu",). Channel bookkeeping is automatic. seed fixes
    the weight initialization.
    """

    def __init__(
        self,
        in_channels: int,
        spec: list[tuple],
        seed: int = 0,
        dtype=np.float32,
    ):
        if in_channels < 1:
            raise ShapeError(f"in_channels must be positive, got {in_channels}")
        self.in_channels = in_channels
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ShapeError(f"unsupported dtype {dtype}")
        self.layers = []
        ch = in_channels
        for i, entry in enumerate(spec):
            kind = entry[0]
            if kind == "conv":
                _, k, out = entry
                layer = Conv2d(ch, out, k)
            elif kind == "pool":
                layer = MaxPool2(ch)
            elif kind == "norm":
                layer = ChannelNorm(ch)
            elif kind == "lrelu":
                layer = LeakyReLU(ch)
            else:
                raise ShapeError(f"unknown layer kind at index {i}: {kind!r}")
            self.layers.append(layer)
            ch = layer.out_ch
        self.out_channels = ch
        total = sum(l.param_count for l in self.layers)
        self.params = np.zeros(total, dtype=self.dtype)
        self.grads = np.zeros(total, dtype=self.dtype)
        off = 0
        for layer in self.layers:
            n = layer.param_count
            layer.bind(self.params[off : off + n], self.grads[off : off + n])
            off += n
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)

    @property
    def downsample_factor(self) -> int:
        return 2 ** sum(1 for l in self.layers if l.kind == "pool")

    @property
    def param_count(self) -> int:
        return self.params.size

    def manifest(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "layers": [l.manifest() for l in self.layers],
            "param_count": int(self.params.size),
        }

    def zero_grads(self) -> None:
        self.grads[...] = 0.0

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 4:
            raise ShapeError(f"input must be (N, C, H, W), got {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"input has {x.shape[1]} channels, network expects {self.in_channels}"
            )
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        _require_finite(x, "network input")
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, train)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
            _require_finite(x, f"output of layer {i} ({layer.kind})")
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        d = np.asarray(dout, dtype=self.dtype)
        _require_finite(d, "upstream gradient")
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            d = layer.backward(d)
            _require_finite(d, f"gradient into layer {i} ({layer.kind})")
        return d


class SGD:
    """Plain momentum SGD: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, net: Network, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.velocity = np.zeros_like(net.params)

    def step(self) -> None:
        _require_finite(self.net.grads, "parameter gradients")
        self.velocity *= self.momentum
        self.velocity += self.net.grads
        self.net.params -= self.net.dtype.type(self.lr) * self.velocity
        _require_finite(self.net.params, "parameters after update")


class Adam:
    """Adam with bias correction (Kingma & Ba). The per-weight scaling
    matters here: objectness gradients are orders of magnitude smaller
    than the box-regression ones early on, and plain SGD stalls on them."""

    def __init__(self, net: Network, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros_like(net.params)
        self.v = np.zeros_like(net.params)

    def step(self) -> None:
        g = self.net.grads
        _require_finite(g, "parameter gradients")
        self.t += 1
        self.m += (1.0 - self.beta1) * (g - self.m)
        self.v += (1.0 - self.beta2) * (g * g - self.v)
        scale = self.lr * math.sqrt(1.0 - self.beta2**self.t) / (1.0 - self.beta1**self.t)
        self.net.params -= self.net.dtype.type(scale) * self.m / (np.sqrt(self.v) + self.eps)
        _require_finite(self.net.params, "parameters after update")


PARAMS_MAGIC = b"FSNN"
PARAMS_VERSION = 1


def save_params(net: Network, path) -> None:
    """Write magic, version, JSON architecture manifest, float32 parameters,
    and a trailing CRC32 of the parameter bytes."""
    manifest = json.dumps(net.manifest(), sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(net.params, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<H", PARAMS_VERSION))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        fh.write(struct.pack("<Q", net.params.size))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"parameter file truncated while reading {what}")
    return data


def _manifest_to_spec(manifest: dict) -> tuple[int, list[tuple]]:
    spec = []
    for entry in manifest["layers"]:
        kind = entry[0]
        if kind == "conv":
            _, in_ch, out_ch, k = entry
            spec.append(("conv", k, out_ch))
        elif kind in ("pool", "norm", "lrelu"):
            spec.append((kind,))
        else:
            raise ValueError(f"unknown layer kind in manifest: {kind!r}")
    return manifest["in_channels"], spec


def load_params(path, dtype=np.float32) -> Network:
    """Rebuild a network from a parameter file, verifying the checksum."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != PARAMS_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {PARAMS_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != PARAMS_VERSION:
            raise VersionError(f"parameter file version {version}, expected {PARAMS_VERSION}")
        (mlen,) = struct.unpack("<I", _read_exact(fh, 4, "manifest length"))
        manifest = json.loads(_read_exact(fh, mlen, "manifest").decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "parameter count"))
        payload = _read_exact(fh, 4 * count, "parameters")
        (crc,) = struct.unpack("<I", _read_exact(fh, 4, "checksum"))
    if zlib.crc32(payload) != crc:
        raise ChecksumError("parameter bytes fail their checksum")
    in_ch, spec = _manifest_to_spec(manifest)
    net = Network(in_ch, spec, seed=0, dtype=dtype)
    if net.params.size != count or manifest.get("param_count") != count:
        raise ShapeError(
            f"manifest declares {manifest.get('param_count')} parameters, file holds {count}"
        )
    net.params[...] = np.frombuffer(payload, dtype="<f4").astype(net.dtype)
    return net


def load_params_into(net: Network, path) -> None:
    """Load parameters into an existing network; the stored architecture
    manifest must match the network's exactly."""
    loaded = load_params(path, dtype=net.dtype)
    if loaded.manifest() != net.manifest():
        raise ShapeError(
            "stored architecture does not match target network: "
            f"{loaded.manifest()['layers']} vs {net.manifest()['layers']}"
        )
    net.params[...] = loaded.params
