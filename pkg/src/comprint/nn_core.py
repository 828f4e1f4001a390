"""A small convolutional-network engine: conv, batch norm, ReLU, ADAM.

Public entry points take tensors in (batch, channels, height, width) order.
Inside a :class:`Network` activations travel channel-major, i.e. as
(channels, batch, height, width), which keeps im2col and the per-channel
batch statistics contiguous.

Parameters are stored in ``param_dtype`` (float32 for training, float64
for gradient checks); arithmetic always runs in float64.
"""
from __future__ import annotations

import copy
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ShapeError, StateError, TrainingDivergenceError

F64 = np.float64

FORMAT_MAGIC = b"COMPRINT"
FORMAT_VERSION = 1


class Conv2D:
    """Stride-1 cross-correlation with zero padding (k - 1) / 2."""

    def __init__(self, in_ch, out_ch, kernel=3, bias=True, param_dtype=np.float32,
                 init_scale=1.0):
        if kernel % 2 != 1:
            raise InputError(f"kernel size must be odd, got {kernel}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.init_scale = init_scale
        self.weight = np.zeros((out_ch, in_ch, kernel, kernel), dtype=param_dtype)
        self.bias = np.zeros(out_ch, dtype=param_dtype) if bias else None
        self.grads = {}
        self._cache = None

    def init(self, rng):
        fan_in = self.in_ch * self.kernel * self.kernel
        w = rng.standard_normal(self.weight.shape) * np.sqrt(2.0 / fan_in) * self.init_scale
        self.weight[...] = w
        if self.bias is not None:
            self.bias[...] = 0

    def params(self):
        p = OrderedDict(weight=self.weight)
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def _chunk(self, x):
        c, n, h, w = x.shape
        per_image = c * self.kernel ** 2 * h * w * 8
        return max(1, _CHUNK_BYTES // per_image)

    def forward(self, x, train=False):
        c, n, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} input channels, got {c}")
        wm = self.weight.reshape(self.out_ch, -1).astype(F64)
        out = np.empty((self.out_ch, n, h, w), dtype=F64)
        step = self._chunk(x)
        for s in range(0, n, step):
            cols = _im2col(x[:, s:s + step], self.kernel)
            out[:, s:s + step] = (wm @ cols).reshape(self.out_ch, -1, h, w)
        if self.bias is not None:
            out += self.bias.astype(F64)[:, None, None, None]
        if train:
            self._cache = x
        return out

    def backward(self, dy, need_input_grad=True):
        if self._cache is None:
            raise StateError("conv backward called without a cached forward pass")
        x, self._cache = self._cache, None
        c, n, h, w = x.shape
        k = self.kernel
        dw = np.zeros((self.out_ch, c * k * k), dtype=F64)
        dx = np.empty_like(x) if need_input_grad else None
        if need_input_grad:
            # input gradient = correlation of dy with the flipped, transposed kernels
            wflip = self.weight.astype(F64)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            wflip = wflip.reshape(c, -1)
        step = self._chunk(x)
        # im2col is recomputed chunk by chunk; cheaper than caching it in RAM
        for s in range(0, n, step):
            cols = _im2col(x[:, s:s + step], k)
            dys = dy[:, s:s + step]
            dw += dys.reshape(self.out_ch, -1) @ cols.T
            if need_input_grad:
                dx[:, s:s + step] = (wflip @ _im2col(dys, k)).reshape(c, -1, h, w)
        self.grads["weight"] = dw.reshape(self.weight.shape)
        if self.bias is not None:
            self.grads["bias"] = dy.sum(axis=(1, 2, 3))
        return dx


# working-set target for one im2col chunk; keeps it cache resident
_CHUNK_BYTES = 4 << 20


def _im2col(x, k):
    """(C, N, H, W) -> (C*k*k, N*H*W) patch matrix, zero padded."""
    c, n, h, w = x.shape
    p = k // 2
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=F64)
    xp[:, :, p:p + h, p:p + w] = x
    cols = np.empty((c, k, k, n, h, w), dtype=F64)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, n * h * w)


class BatchNorm2D:
    def __init__(self, channels, eps=1e-5, momentum=0.9, param_dtype=np.float32):
        if eps <= 0:
            raise InputError("batch-norm epsilon must be positive")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = np.ones(channels, dtype=param_dtype)
        self.beta = np.zeros(channels, dtype=param_dtype)
        self.running_mean = np.zeros(channels, dtype=param_dtype)
        self.running_var = np.ones(channels, dtype=param_dtype)
        self.grads = {}
        self._cache = None

    def init(self, rng):
        self.gamma[...] = 1
        self.beta[...] = 0
        self.running_mean[...] = 0
        self.running_var[...] = 1

    def params(self):
        return OrderedDict(gamma=self.gamma, beta=self.beta)

    def buffers(self):
        return OrderedDict(running_mean=self.running_mean, running_var=self.running_var)

    def forward(self, x, train=False):
        c = x.shape[0]
        x2 = x.reshape(c, -1)
        g = self.gamma.astype(F64)[:, None]
        b = self.beta.astype(F64)[:, None]
        if not train:
            mean = self.running_mean.astype(F64)[:, None]
            var = self.running_var.astype(F64)[:, None]
            return ((x2 - mean) / np.sqrt(var + self.eps) * g + b).reshape(x.shape)
        m = x2.shape[1]
        mean = x2.mean(axis=1, keepdims=True)
        xc = x2 - mean
        var = np.mean(xc * xc, axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std
        self._cache = (xhat, inv_std, x.shape)
        unbiased = var[:, 0] * (m / max(m - 1, 1))
        mom = self.momentum
        self.running_mean[...] = mom * self.running_mean + (1 - mom) * mean[:, 0]
        self.running_var[...] = mom * self.running_var + (1 - mom) * unbiased
        return (xhat * g + b).reshape(x.shape)

    def backward(self, dy, need_input_grad=True):
        if self._cache is None:
            raise StateError("batch-norm backward called without a cached forward pass")
        xhat, inv_std, shape = self._cache
        self._cache = None
        dy2 = dy.reshape(shape[0], -1)
        self.grads["gamma"] = np.sum(dy2 * xhat, axis=1)
        self.grads["beta"] = dy2.sum(axis=1)
        g = self.gamma.astype(F64)[:, None]
        dxhat = dy2 * g
        dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
        return dx.reshape(shape)


class ReLU:
    grads = {}

    def __init__(self):
        self._mask = None

    def init(self, rng):
        pass

    def params(self):
        return OrderedDict()

    def forward(self, x, train=False):
        mask = x > 0
        if train:
            self._mask = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy, need_input_grad=True):
        if self._mask is None:
            raise StateError("ReLU backward called without a cached forward pass")
        mask, self._mask = self._mask, None
        return np.where(mask, dy, 0.0)


class Network:
    """An ordered stack of named layers.

    ``layers`` is a list of ``(name, layer)``; parameter names in files and
    gradient dictionaries are ``"{layer name}.{param}"``.
    """

    def __init__(self, layers, meta=None):
        self.layers = list(layers)
        self.meta = dict(meta or {})
        self._has_cache = False

    def init(self, rng):
        for _, layer in self.layers:
            layer.init(rng)

    def params(self):
        out = OrderedDict()
        for lname, layer in self.layers:
            for pname, arr in layer.params().items():
                out[f"{lname}.{pname}"] = arr
        return out

    def buffers(self):
        out = OrderedDict()
        for lname, layer in self.layers:
            if hasattr(layer, "buffers"):
                for bname, arr in layer.buffers().items():
                    out[f"{lname}.{bname}"] = arr
        return out

    def grads(self):
        out = OrderedDict()
        for lname, layer in self.layers:
            for pname in layer.params():
                if pname not in layer.grads:
                    raise StateError(f"no gradient for {lname}.{pname}; run backward first")
                out[f"{lname}.{pname}"] = layer.grads[pname]
        return out

    def forward_cm(self, x, train=False):
        """Forward pass on a channel-major (C, N, H, W) tensor."""
        for _, layer in self.layers:
            x = layer.forward(x, train)
        self._has_cache = train
        return x

    def backward_cm(self, dy, need_input_grad=True):
        if not self._has_cache:
            raise StateError("backward requires a preceding forward pass with train=True")
        last = len(self.layers) - 1
        for i, (_, layer) in enumerate(reversed(self.layers)):
            dy = layer.backward(dy, need_input_grad or i < last)
        self._has_cache = False
        return dy

    def forward(self, x, train=False):
        """Forward pass on an (N, C, H, W) tensor; returns (N, C_out, H, W)."""
        x = np.asarray(x, dtype=F64)
        if x.ndim != 4:
            raise ShapeError(f"expected a 4-D tensor, got shape {x.shape}")
        out = self.forward_cm(x.transpose(1, 0, 2, 3), train)
        if train and not np.all(np.isfinite(out)):
            raise TrainingDivergenceError(self.meta.get("step", -1), "non-finite activations")
        return out.transpose(1, 0, 2, 3)

    def backward(self, loss_gradient):
        """Back-propagate dLoss/dOutput (N, C_out, H, W); returns dLoss/dInput.

        Parameter gradients are left in each layer and returned by :meth:`grads`.
        """
        dy = np.asarray(loss_gradient, dtype=F64).transpose(1, 0, 2, 3)
        dx = self.backward_cm(dy)
        return dx.transpose(1, 0, 2, 3)

    def clear_cache(self):
        for _, layer in self.layers:
            if isinstance(layer, ReLU):
                layer._mask = None
            else:
                layer._cache = None
        self._has_cache = False

    def copy(self):
        self.clear_cache()
        return copy.deepcopy(self)


def conv_forward(layer, x):
    """Apply a single conv layer to an (N, C, H, W) tensor."""
    x = np.asarray(x, dtype=F64)
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D tensor, got shape {x.shape}")
    return layer.forward(x.transpose(1, 0, 2, 3)).transpose(1, 0, 2, 3)


def backward(network, loss_gradient):
    """Gradients of all parameters (dict) and of the input, given dLoss/dOutput."""
    dx = network.backward(loss_gradient)
    return network.grads(), dx


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One bias-corrected ADAM update, applied to `params` in place."""
    if set(params) != set(grads):
        raise ShapeError("parameter and gradient names differ")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"gradient shape {grads[name].shape} != parameter {p.shape} for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=F64)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(t, f"non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=F64)
            state.v[name] = np.zeros(p.shape, dtype=F64)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p[...] = (p.astype(F64) - update).astype(p.dtype)
    return params


# -- model files -------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic "COMPRINT"
#   uint32    length of the JSON header in bytes
#   header    UTF-8 JSON: format_version, architecture fields (depth, channels,
#             kernel_size, ...), free-form metadata, and "blocks": a list of
#             {"name", "shape", "dtype"} in storage order
#   blocks    raw little-endian arrays, concatenated in header order


def save_network(network, path, header):
    """Write parameters and batch-norm buffers of `network` to `path`."""
    arrays = OrderedDict(network.params())
    arrays.update(network.buffers())
    blocks = []
    payload = bytearray()
    for name, arr in arrays.items():
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        blocks.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        payload += np.ascontiguousarray(arr, dtype=dt).tobytes()
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["blocks"] = blocks
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(FORMAT_MAGIC + struct.pack("<I", len(raw)) + raw + bytes(payload))


def read_model_file(path):
    """Return (header dict, OrderedDict name -> array) from a model file."""
    data = Path(path).read_bytes()
    if data[:8] != FORMAT_MAGIC:
        raise InputError(f"{path}: not a model file (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported model format {header.get('format_version')}")
    pos = 12 + hlen
    arrays = OrderedDict()
    for blk in header["blocks"]:
        dt = np.dtype(blk["dtype"])
        count = int(np.prod(blk["shape"])) if blk["shape"] else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(data):
            raise InputError(f"{path}: truncated parameter block {blk['name']}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(blk["shape"])
        arrays[blk["name"]] = arr.astype(dt.newbyteorder("="))
        pos += nbytes
    return header, arrays


def load_into(network, arrays):
    targets = OrderedDict(network.params())
    targets.update(network.buffers())
    missing = set(targets) - set(arrays)
    if missing:
        raise InputError(f"model file lacks parameters: {sorted(missing)}")
    for name, arr in targets.items():
        if arrays[name].shape != arr.shape:
            raise InputError(f"shape mismatch for {name}: {arrays[name].shape} vs {arr.shape}")
        arr[...] = arrays[name]
