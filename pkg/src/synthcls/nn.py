"""Small layer library on top of the numcore tape: linear, conv, batch norm,
embeddings. Modules expose an ordered parameter list (input end first) so the
trainer can unfreeze a suffix of it."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Tensor


class Module:
    def parameters(self):
        """Parameters ordered from the input end to the output end."""
        out = []
        for attr in self.__dict__.values():
            if isinstance(attr, Parameter):
                out.append(attr)
            elif isinstance(attr, Module):
                out.extend(attr.parameters())
            elif isinstance(attr, (list, tuple)):
                for item in attr:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
                    elif isinstance(item, Parameter):
                        out.append(item)
        return out

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def state_arrays(self):
        """Name -> array for everything a checkpoint must carry (parameters
        plus non-trainable buffers such as batch-norm running statistics)."""
        out = {}
        for p in self.parameters():
            out[p.name] = p.data
        for bn in self._batchnorms():
            out[bn.prefix + ".running_mean"] = bn.running_mean
            out[bn.prefix + ".running_var"] = bn.running_var
        return out

    def load_state_arrays(self, arrays):
        for p in self.parameters():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing parameter '{p.name}'")
            if arrays[p.name].shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for '{p.name}'")
            p.data = arrays[p.name].astype(np.float32).copy()
        for bn in self._batchnorms():
            bn.running_mean = arrays[bn.prefix + ".running_mean"].astype(np.float32).copy()
            bn.running_var = arrays[bn.prefix + ".running_var"].astype(np.float32).copy()

    def _batchnorms(self):
        out = []
        for attr in self.__dict__.values():
            if isinstance(attr, BatchNorm2d):
                out.append(attr)
            elif isinstance(attr, Module):
                out.extend(attr._batchnorms())
            elif isinstance(attr, (list, tuple)):
                for item in attr:
                    if isinstance(item, Module):
                        out.extend(item._batchnorms())
        return out

    def checksum(self):
        """Order-stable digest of all parameter values."""
        import hashlib
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _init(rng, shape, fan_in):
    scale = np.sqrt(1.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * scale).astype(np.float32)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, name="linear"):
        self.weight = Parameter(_init(rng, (n_in, n_out), n_in), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out, dtype=np.float32), name=f"{name}.bias")

    def __call__(self, x):
        return nc.add(nc.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, pad=1, name="conv"):
        fan_in = c_in * k * k
        self.weight = Parameter(_init(rng, (c_out, c_in, k, k), fan_in), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32), name=f"{name}.bias")
        self.pad = pad

    def __call__(self, x):
        return nc.conv2d(x, self.weight, self.bias, pad=self.pad)


class BatchNorm2d(Module):
    """Batch normalization over (N, H, W) per channel.

    With `freeze_stats` set, running statistics are used in every mode and
    never updated, so inference is independent of batch composition.
    """

    def __init__(self, channels, name="bn", momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=np.float32), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=np.float32), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.freeze_stats = False
        self.prefix = name

    def __call__(self, x, train=False):
        c = self.gamma.size
        if train and not self.freeze_stats:
            mean = nc.tmean(x, axis=(0, 2, 3))
            centered = nc.sub(x, nc.reshape(mean, (1, c, 1, 1)))
            var = nc.tmean(nc.mul(centered, centered), axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean.data).astype(np.float32)
            self.running_var = ((1 - m) * self.running_var + m * var.data).astype(np.float32)
            inv = nc.div(1.0, nc.tsqrt(nc.add(nc.reshape(var, (1, c, 1, 1)), self.eps)))
            xhat = nc.mul(centered, inv)
        else:
            mean = self.running_mean.reshape(1, c, 1, 1)
            inv = 1.0 / np.sqrt(self.running_var.reshape(1, c, 1, 1) + self.eps)
            xhat = nc.mul(nc.sub(x, Tensor(mean)), Tensor(inv))
        return nc.add(nc.mul(xhat, nc.reshape(self.gamma, (1, c, 1, 1))),
                      nc.reshape(self.beta, (1, c, 1, 1)))


class Embedding(Module):
    def __init__(self, n, d, rng, name="embed"):
        self.weight = Parameter((rng.standard_normal((n, d)) * 0.1).astype(np.float32),
                                name=f"{name}.weight")

    def __call__(self, indices):
        return nc.take_rows(self.weight, indices)


def sinusoidal_embedding(t, dim):
    """Standard fixed sinusoidal embedding of integer timesteps t: (N,)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs.reshape(1, -1)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def normalize_rows(x, eps=1e-8):
    """Unit-normalize rows of a taped tensor."""
    sq = nc.tsum(nc.mul(x, x), axis=1, keepdims=True)
    return nc.div(x, nc.tsqrt(nc.add(sq, eps)))
