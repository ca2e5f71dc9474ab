"""Small numpy network engine: 3D (transposed) convolution, dense layers,
activations, Gaussian reparameterisation and Adam.

Tensors are ``(batch, channels, x, y, z)`` for volumetric layers and
``(batch, features)`` for dense ones.  Parameters are stored as float32;
:meth:`Network.cast` gives a float64 copy for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _container
from .errors import FormatError, NumericError, ValidationError

CHECKPOINT_MAGIC = b"SQNNET01"
CHECKPOINT_VERSION = 1


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValidationError(f"expected 3 values, got {v!r}")
    return t


def _im2col(xp: np.ndarray, k, s, out) -> np.ndarray:
    """(B, C, *padded) -> (B, C*kx*ky*kz, ox*oy*oz)."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k[0], k[1], k[2], out[0], out[1], out[2]), dtype=xp.dtype)
    for i in range(k[0]):
        for j in range(k[1]):
            for l in range(k[2]):
                cols[:, :, i, j, l] = xp[:, :, i:i + s[0] * out[0]:s[0],
                                         j:j + s[1] * out[1]:s[1],
                                         l:l + s[2] * out[2]:s[2]]
    return cols.reshape(b, c * k[0] * k[1] * k[2], out[0] * out[1] * out[2])


def _col2im(cols: np.ndarray, c: int, padded, k, s, out) -> np.ndarray:
    b = cols.shape[0]
    cols = cols.reshape(b, c, k[0], k[1], k[2], out[0], out[1], out[2])
    xp = np.zeros((b, c) + tuple(padded), dtype=cols.dtype)
    for i in range(k[0]):
        for j in range(k[1]):
            for l in range(k[2]):
                xp[:, :, i:i + s[0] * out[0]:s[0],
                   j:j + s[1] * out[1]:s[1],
                   l:l + s[2] * out[2]:s[2]] += cols[:, :, i, j, l]
    return xp


class Layer:
    kind = "LAYER"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def config(self) -> dict:
        return {}

    def init(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise ValidationError(f"{self.kind}: backward called before forward")
        return self._cache

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class Conv3D(Layer):
    kind = "CONV3D"

    def __init__(self, in_ch: int, out_ch: int, kernel=3, stride=1, pad=0):
        super().__init__()
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.k, self.s, self.p = _triple(kernel), _triple(stride), _triple(pad)
        self.params = {"w": np.zeros((self.out_ch, self.in_ch) + self.k, np.float32),
                       "b": np.zeros(self.out_ch, np.float32)}

    def config(self):
        return {"in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": list(self.k),
                "stride": list(self.s), "pad": list(self.p)}

    def init(self, rng):
        fan_in = self.in_ch * math.prod(self.k)
        w = rng.standard_normal(self.params["w"].shape) * math.sqrt(2.0 / fan_in)
        self.params["w"] = w.astype(self.params["w"].dtype)
        self.params["b"] = np.zeros_like(self.params["b"])

    def out_dims(self, dims):
        o = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(dims, self.p, self.k, self.s))
        if min(o) < 1:
            raise ValidationError(f"CONV3D: input {tuple(dims)} too small for kernel {self.k}")
        return o

    def forward(self, x, train, rng):
        if x.ndim != 5 or x.shape[1] != self.in_ch:
            raise ValidationError(f"CONV3D expects (B, {self.in_ch}, X, Y, Z), got {x.shape}")
        out = self.out_dims(x.shape[2:])
        xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in self.p)) if any(self.p) else x
        cols = _im2col(xp, self.k, self.s, out)
        w2 = self.params["w"].reshape(self.out_ch, -1).astype(x.dtype, copy=False)
        y = np.matmul(w2, cols) + self.params["b"].astype(x.dtype)[None, :, None]
        self._cache = (cols, xp.shape[2:], out, x.shape[2:])
        return y.reshape((x.shape[0], self.out_ch) + out)

    def backward(self, g):
        cols, padded, out, in_dims = self._need_cache()
        b = g.shape[0]
        g2 = g.reshape(b, self.out_ch, -1)
        self.grads["w"] = np.einsum("bon,bkn->ok", g2, cols).reshape(self.params["w"].shape)
        self.grads["b"] = g2.sum(axis=(0, 2))
        w2 = self.params["w"].reshape(self.out_ch, -1).astype(g.dtype, copy=False)
        dcols = np.matmul(w2.T, g2)
        dxp = _col2im(dcols, self.in_ch, padded, self.k, self.s, out)
        px, py, pz = self.p
        return dxp[:, :, px:px + in_dims[0], py:py + in_dims[1], pz:pz + in_dims[2]]


class ConvTranspose3D(Layer):
    """Adjoint of :class:`Conv3D`; output size ``(n - 1) * s - 2p + k``."""

    kind = "CONV3D_TRANSPOSE"

    def __init__(self, in_ch: int, out_ch: int, kernel=2, stride=2, pad=0):
        super().__init__()
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.k, self.s, self.p = _triple(kernel), _triple(stride), _triple(pad)
        self.params = {"w": np.zeros((self.in_ch, self.out_ch) + self.k, np.float32),
                       "b": np.zeros(self.out_ch, np.float32)}

    config = Conv3D.config

    def init(self, rng):
        fan_in = self.in_ch * math.prod(self.k) / math.prod(self.s)
        w = rng.standard_normal(self.params["w"].shape) * math.sqrt(2.0 / fan_in)
        self.params["w"] = w.astype(self.params["w"].dtype)
        self.params["b"] = np.zeros_like(self.params["b"])

    def forward(self, x, train, rng):
        if x.ndim != 5 or x.shape[1] != self.in_ch:
            raise ValidationError(f"CONV3D_TRANSPOSE expects (B, {self.in_ch}, ...), got {x.shape}")
        n = x.shape[2:]
        padded = tuple((a - 1) * s + k for a, s, k in zip(n, self.s, self.k))
        out = tuple(q - 2 * p for q, p in zip(padded, self.p))
        if min(out) < 1:
            raise ValidationError("CONV3D_TRANSPOSE: padding larger than output")
        b = x.shape[0]
        x2 = x.reshape(b, self.in_ch, -1)
        w2 = self.params["w"].reshape(self.in_ch, -1).astype(x.dtype, copy=False)
        cols = np.matmul(w2.T, x2)
        yp = _col2im(cols, self.out_ch, padded, self.k, self.s, n)
        px, py, pz = self.p
        y = yp[:, :, px:px + out[0], py:py + out[1], pz:pz + out[2]]
        y = y + self.params["b"].astype(x.dtype)[None, :, None, None, None]
        self._cache = (x2, n, padded)
        return np.ascontiguousarray(y)

    def backward(self, g):
        x2, n, padded = self._need_cache()
        gp = np.pad(g, ((0, 0), (0, 0)) + tuple((p, p) for p in self.p)) if any(self.p) else g
        gcols = _im2col(gp, self.k, self.s, n)
        self.grads["w"] = np.einsum("bin,bkn->ik", x2, gcols).reshape(self.params["w"].shape)
        self.grads["b"] = g.sum(axis=(0, 2, 3, 4))
        w2 = self.params["w"].reshape(self.in_ch, -1).astype(g.dtype, copy=False)
        dx = np.matmul(w2, gcols)
        return dx.reshape((g.shape[0], self.in_ch) + tuple(n))


class Dense(Layer):
    kind = "DENSE"

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.params = {"w": np.zeros((self.n_in, self.n_out), np.float32),
                       "b": np.zeros(self.n_out, np.float32)}

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out}

    def init(self, rng):
        w = rng.standard_normal((self.n_in, self.n_out)) * math.sqrt(2.0 / self.n_in)
        self.params["w"] = w.astype(self.params["w"].dtype)
        self.params["b"] = np.zeros_like(self.params["b"])

    def forward(self, x, train, rng):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValidationError(f"DENSE expects (B, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.params["w"].astype(x.dtype, copy=False) + self.params["b"].astype(x.dtype)

    def backward(self, g):
        x = self._need_cache()
        self.grads["w"] = x.T @ g
        self.grads["b"] = g.sum(axis=0)
        return g @ self.params["w"].astype(g.dtype, copy=False).T


class ReLU(Layer):
    kind = "RELU"

    def forward(self, x, train, rng):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._need_cache(), g, 0).astype(g.dtype, copy=False)


class Sigmoid(Layer):
    kind = "SIGMOID"

    def forward(self, x, train, rng):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        self._cache = y
        return y

    def backward(self, g):
        y = self._need_cache()
        return g * y * (1.0 - y)


class Softmax(Layer):
    """Softmax over axis 1 (channels)."""

    kind = "SOFTMAX"

    def forward(self, x, train, rng):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)
        self._cache = y
        return y

    def backward(self, g):
        y = self._need_cache()
        return y * (g - (g * y).sum(axis=1, keepdims=True))


class Flatten(Layer):
    kind = "FLATTEN"

    def forward(self, x, train, rng):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._need_cache())


class Reshape(Layer):
    kind = "RESHAPE"

    def __init__(self, shape: Sequence[int]):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def config(self):
        return {"shape": list(self.shape)}

    def forward(self, x, train, rng):
        if math.prod(x.shape[1:]) != math.prod(self.shape):
            raise ValidationError(f"RESHAPE: cannot map {x.shape[1:]} to {self.shape}")
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, g):
        return g.reshape(self._need_cache())


class Upsample(Layer):
    """Nearest-neighbour upsampling by an integer factor."""

    kind = "UPSAMPLE"

    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = int(factor)

    def config(self):
        return {"factor": self.factor}

    def forward(self, x, train, rng):
        f = self.factor
        self._cache = x.shape
        return x.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)

    def backward(self, g):
        b, c, nx, ny, nz = self._need_cache()
        f = self.factor
        return g.reshape(b, c, nx, f, ny, f, nz, f).sum(axis=(3, 5, 7))


class VoxelBias(Layer):
    """Learned additive map of shape ``(C, X, Y, Z)`` (a per-voxel bias)."""

    kind = "VOXEL_BIAS"

    def __init__(self, shape: Sequence[int]):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)
        self.params = {"b": np.zeros(self.shape, np.float32)}

    def config(self):
        return {"shape": list(self.shape)}

    def forward(self, x, train, rng):
        if x.shape[1:] != self.shape:
            raise ValidationError(f"VOXEL_BIAS expects (B, *{self.shape}), got {x.shape}")
        self._cache = True
        return x + self.params["b"].astype(x.dtype, copy=False)

    def backward(self, g):
        self._need_cache()
        self.grads["b"] = g.sum(axis=0)
        return g


def sample_gaussian(mu: np.ndarray, log_sigma: np.ndarray, seed) -> np.ndarray:
    """Reparameterised draw ``mu + exp(log_sigma) * eps`` with ``eps ~ N(0, 1)``."""
    mu = np.asarray(mu)
    log_sigma = np.asarray(log_sigma)
    if mu.shape != log_sigma.shape:
        raise ValidationError(f"mu {mu.shape} and log_sigma {log_sigma.shape} differ")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(mu.shape)
    return (mu + np.exp(log_sigma) * eps).astype(mu.dtype, copy=False)


def kl_divergence(mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    """Per-sample KL(N(mu, sigma) || N(0, 1)) summed over latent dims."""
    return -0.5 * np.sum(2.0 * log_sigma - np.exp(2.0 * log_sigma) - mu ** 2 + 1.0, axis=-1)


class SampleGaussian(Layer):
    """Splits ``(B, 2d)`` into (mu, log_sigma) and draws ``z``.

    In training the KL term (weight ``kl_weight``, batch-averaged) is added
    to the gradient on the way back and its value kept in ``last_kl``.
    Outside training the layer returns ``mu``.
    """

    kind = "SAMPLE_GAUSSIAN"

    def __init__(self, latent_dim: int, kl_weight: float = 1.0):
        super().__init__()
        self.latent_dim = int(latent_dim)
        self.kl_weight = float(kl_weight)
        self.last_kl = 0.0

    def config(self):
        return {"latent_dim": self.latent_dim, "kl_weight": self.kl_weight}

    def forward(self, x, train, rng):
        d = self.latent_dim
        if x.ndim != 2 or x.shape[1] != 2 * d:
            raise ValidationError(f"SAMPLE_GAUSSIAN expects (B, {2 * d}), got {x.shape}")
        mu, log_sigma = x[:, :d], x[:, d:]
        if not train:
            self._cache = None
            return mu.copy()
        if rng is None:
            raise ValidationError("SAMPLE_GAUSSIAN needs an explicit rng while training")
        eps = rng.standard_normal(mu.shape).astype(x.dtype)
        sigma = np.exp(log_sigma)
        self._cache = (mu, log_sigma, sigma, eps)
        self.last_kl = float(kl_divergence(mu.astype(np.float64), log_sigma.astype(np.float64)).mean())
        return mu + sigma * eps

    def backward(self, g):
        mu, log_sigma, sigma, eps = self._need_cache()
        b = g.shape[0]
        w = self.kl_weight / b
        g_mu = g + w * mu
        g_ls = g * sigma * eps + w * (sigma ** 2 - 1.0)
        return np.concatenate([g_mu, g_ls], axis=1)


LAYER_TYPES = {cls.kind: cls for cls in (Conv3D, ConvTranspose3D, Dense, ReLU, Sigmoid, Softmax,
                                         Flatten, Reshape, Upsample, VoxelBias, SampleGaussian)}


class Network:
    """Ordered stack of layers with explicit seeding."""

    def __init__(self, layers: Sequence[Layer], seed: int = 0, init: bool = True):
        self.layers = list(layers)
        self.seed = int(seed)
        self._forwarded = False
        if init:
            rng = np.random.default_rng(self.seed)
            for layer in self.layers:
                layer.init(rng)

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        self._forwarded = True
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if not self._forwarded:
            raise ValidationError("backward called before forward")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{k}", layer.params[k]) for i, layer in enumerate(self.layers)
                for k in sorted(layer.params)]

    def named_grads(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for k in sorted(layer.params):
                if k not in layer.grads:
                    raise ValidationError(f"no gradient for {i}.{k}; run backward first")
                out.append((f"{i}.{k}", layer.grads[k]))
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        i, k = name.split(".")
        self.layers[int(i)].params[k] = value

    @property
    def n_params(self) -> int:
        return int(sum(p.size for _, p in self.named_params()))

    def spec(self) -> list[dict]:
        return [{"kind": l.kind, **l.config()} for l in self.layers]

    def cast(self, dtype) -> "Network":
        """Copy with parameters in ``dtype`` (float64 for gradient checks)."""
        net = network_from_spec(self.spec(), self.seed)
        for name, p in self.named_params():
            net.set_param(name, p.astype(dtype, copy=True))
        return net

    def copy(self) -> "Network":
        return self.cast(np.float32)

    def summary(self) -> str:
        lines = [f"{i:2d} {l!r}" for i, l in enumerate(self.layers)]
        lines.append(f"parameters: {self.n_params}")
        return "\n".join(lines)


def network_from_spec(spec: Iterable[dict], seed: int = 0) -> Network:
    layers = []
    for entry in spec:
        entry = dict(entry)
        kind = entry.pop("kind")
        if kind not in LAYER_TYPES:
            raise FormatError(f"unknown layer kind {kind!r}")
        layers.append(LAYER_TYPES[kind](**entry))
    return Network(layers, seed=seed, init=False)


# --------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One Adam update over matching ``name -> array`` dicts; returns new params."""
    if set(params) != set(grads):
        raise ValidationError("params and grads have different keys")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValidationError(f"{k}: gradient shape {g.shape} != {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = {}
    for k in sorted(params):
        p = params[k]
        g = grads[k].astype(np.float64)
        m = state.m.get(k, np.zeros(p.shape)) * beta1 + (1.0 - beta1) * g
        v = state.v.get(k, np.zeros(p.shape)) * beta2 + (1.0 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out[k] = (p - step).astype(p.dtype)
    return out, state


class Adam:
    def __init__(self, net: Network, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self) -> None:
        params = dict(self.net.named_params())
        grads = dict(self.net.named_grads())
        new, self.state = adam_step(params, grads, self.state, self.lr, self.beta1,
                                    self.beta2, self.eps)
        for k, v in new.items():
            self.net.set_param(k, v)


# --------------------------------------------------------------------------
# losses

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    n = diff.size
    return float(np.sum(diff * diff) / n), (2.0 / n * diff).astype(pred.dtype)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``(B, K)`` logits against integer class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValidationError("expected (B, K) logits and (B,) targets")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -float(logp[np.arange(b), targets].mean())
    grad = np.exp(logp)
    grad[np.arange(b), targets] -= 1.0
    return loss, (grad / b).astype(logits.dtype)


# --------------------------------------------------------------------------
# checkpoints

def network_arrays(net: Network) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {"seed": net.seed, "layers": net.spec()}
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in net.named_params()}
    return meta, arrays


def network_from_arrays(meta: dict, arrays: dict[str, np.ndarray]) -> Network:
    net = network_from_spec(meta["layers"], meta.get("seed", 0))
    for name, p in net.named_params():
        if name not in arrays:
            raise FormatError(f"checkpoint is missing parameter {name}")
        a = arrays[name]
        if a.shape != p.shape:
            raise FormatError(f"{name}: shape {a.shape} != expected {p.shape}")
        net.set_param(name, np.array(a, dtype=np.float32))
    return net


def save_network(net: Network, path) -> Path:
    meta, arrays = network_arrays(net)
    return _container.save(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, arrays)


def load_network(path) -> Network:
    meta, arrays = _container.load(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    return network_from_arrays(meta, arrays)
