"""Branch/trunk operator network in plain numpy.

The branch net maps the three input channels (delay, state, delay line)
sampled on an ``m x m`` grid to ``p`` coefficients; the trunk net maps the
query point ``(s*, r*)`` to ``p`` basis values; the output is their inner
product.  Gradients are hand-written and checked against finite
differences in the test suite.
"""

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class ModelConfig:
    p: int = 64
    m: int = 21
    branch: str = "dense"  # "dense" or "conv"
    branch_widths: tuple = (512, 256)
    conv_channels: tuple = (64, 128)
    conv_kernel: int = 5
    conv_stride: int = 2
    trunk_widths: tuple = (64, 64)
    query: tuple = (0.0, 0.0)
    activation: str = "relu"
    output_bias: bool = False
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 250
    seed: int = 0
    beta: float = 1.0  # smooth-L1 transition point
    lr_decay: float = 0.98  # per-epoch multiplicative factor
    amplitude_scaling: bool = True  # U(tau, a x, a u) = a U(tau, x, u) for a > 0
    loss_units: str = "label"  # "label" or "normalized" (targets U / a)

    def __post_init__(self):
        if self.loss_units not in ("label", "normalized"):
            raise ValueError(f"loss_units must be 'label' or 'normalized', got {self.loss_units!r}")
        if self.loss_units == "normalized" and not self.amplitude_scaling:
            raise ValueError("normalized loss units need amplitude_scaling")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if not all(0.0 <= q <= 1.0 for q in self.query):
            raise ValueError("query point must lie in [0,1]^2")
        if self.branch not in ("dense", "conv"):
            raise ValueError(f"unknown branch type {self.branch!r}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        self.branch_widths = tuple(int(w) for w in self.branch_widths)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        self.query = tuple(float(q) for q in self.query)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def conv_sizes(self):
        sizes = [self.m]
        for _ in self.conv_channels:
            sizes.append((sizes[-1] - self.conv_kernel) // self.conv_stride + 1)
        return sizes


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return 1.0 - a * a


def _im2col(x, k, stride):
    """``(B, C, H, W)`` -> ``(B, Ho, Wo, C*k*k)``."""
    B, C, H, W = x.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(B, Ho, Wo, C, k, k), strides=(sb, sh * stride, sw * stride, sc, sh, sw), writeable=False
    )
    return view.reshape(B, Ho, Wo, C * k * k)


def _col2im(cols, shape, k, stride):
    """Adjoint of :func:`_im2col`."""
    B, C, H, W = shape
    Ho, Wo = cols.shape[1], cols.shape[2]
    cols = cols.reshape(B, Ho, Wo, C, k, k)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return out


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(config, rng=None):
    """Glorot-uniform weights and zero biases, keyed ``b0_W``, ``t1_b``..."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    P = {}
    cin = 3
    if config.branch == "conv":
        k = config.conv_kernel
        for i, cout in enumerate(config.conv_channels):
            P[f"c{i}_W"] = _glorot(rng, cin * k * k, cout * k * k, (cin * k * k, cout))
            P[f"c{i}_b"] = np.zeros(cout)
            cin = cout
        width = cin * config.conv_sizes()[-1] ** 2
    else:
        width = 3 * config.m * config.m
    widths = list(config.branch_widths) + [config.p]
    for i, w in enumerate(widths):
        P[f"b{i}_W"] = _glorot(rng, width, w, (width, w))
        P[f"b{i}_b"] = np.zeros(w)
        width = w
    width = 2
    widths = list(config.trunk_widths) + [config.p]
    for i, w in enumerate(widths):
        P[f"t{i}_W"] = _glorot(rng, width, w, (width, w))
        P[f"t{i}_b"] = np.zeros(w)
        width = w
    if config.output_bias:
        P["out_b"] = np.zeros(1)
    return P


class Network:
    """Forward and backward passes for one :class:`ModelConfig`."""

    def __init__(self, config):
        self.config = config
        self.nb = len(config.branch_widths) + 1
        self.nt = len(config.trunk_widths) + 1
        self.nc = len(config.conv_channels) if config.branch == "conv" else 0

    # trunk -------------------------------------------------------------
    def trunk(self, P, query=None):
        q = np.asarray(self.config.query if query is None else query, dtype=float).reshape(1, 2)
        a = q
        cache = []
        for i in range(self.nt):
            z = a @ P[f"t{i}_W"] + P[f"t{i}_b"]
            last = i == self.nt - 1
            out = z if last else _act(z, self.config.activation)
            cache.append((a, z, out))
            a = out
        return a[0], cache

    def _trunk_back(self, P, cache, g, grads):
        g = g.reshape(1, -1)
        for i in reversed(range(self.nt)):
            a, z, out = cache[i]
            if i != self.nt - 1:
                g = g * _act_grad(z, out, self.config.activation)
            grads[f"t{i}_W"] = a.T @ g
            grads[f"t{i}_b"] = g.sum(0)
            g = g @ P[f"t{i}_W"].T

    # branch ------------------------------------------------------------
    def branch(self, P, X):
        cfg = self.config
        B = X.shape[0]
        cache = {"conv": [], "dense": []}
        a = X
        if self.nc:
            k, st = cfg.conv_kernel, cfg.conv_stride
            for i in range(self.nc):
                cols = _im2col(np.ascontiguousarray(a), k, st)
                z = cols @ P[f"c{i}_W"] + P[f"c{i}_b"]  # (B, Ho, Wo, Cout)
                out = _act(z, cfg.activation)
                cache["conv"].append((a.shape, cols, z, out))
                a = out.transpose(0, 3, 1, 2)
        a = a.reshape(B, -1)
        for i in range(self.nb):
            z = a @ P[f"b{i}_W"] + P[f"b{i}_b"]
            last = i == self.nb - 1
            out = z if last else _act(z, cfg.activation)
            cache["dense"].append((a, z, out))
            a = out
        return a, cache

    def _branch_back(self, P, cache, g, grads):
        cfg = self.config
        for i in reversed(range(self.nb)):
            a, z, out = cache["dense"][i]
            if i != self.nb - 1:
                g = g * _act_grad(z, out, cfg.activation)
            grads[f"b{i}_W"] = a.T @ g
            grads[f"b{i}_b"] = g.sum(0)
            g = g @ P[f"b{i}_W"].T
        if self.nc:
            k, st = cfg.conv_kernel, cfg.conv_stride
            shape_last = cache["conv"][-1][3].shape  # (B, Ho, Wo, C)
            g = g.reshape(shape_last[0], shape_last[3], shape_last[1], shape_last[2]).transpose(0, 2, 3, 1)
            for i in reversed(range(self.nc)):
                in_shape, cols, z, out = cache["conv"][i]
                g = g * _act_grad(z, out, cfg.activation)
                Cin_k = cols.shape[-1]
                grads[f"c{i}_W"] = cols.reshape(-1, Cin_k).T @ g.reshape(-1, g.shape[-1])
                grads[f"c{i}_b"] = g.sum((0, 1, 2))
                if i > 0:
                    gcols = g @ P[f"c{i}_W"].T
                    g = _col2im(gcols, in_shape, k, st).transpose(0, 2, 3, 1)

    # full model --------------------------------------------------------
    def forward(self, P, X):
        b, bc = self.branch(P, X)
        t, tc = self.trunk(P)
        y = b @ t
        if "out_b" in P:
            y = y + P["out_b"][0]
        return y, (b, bc, t, tc)

    def backward(self, P, cache, gy):
        """Gradients of ``sum(gy * y)`` with respect to every parameter."""
        b, bc, t, tc = cache
        grads = {}
        self._trunk_back(P, tc, gy @ b, grads)
        self._branch_back(P, bc, np.outer(gy, t), grads)
        if "out_b" in P:
            grads["out_b"] = np.array([gy.sum()])
        return grads


def smooth_l1(pred, target, beta=1.0):
    """Mean smooth-L1 loss and its gradient with respect to ``pred``."""
    d = pred - target
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d)) / d.size
    return float(loss.mean()), grad


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, P, grads):
        self.step += 1
        b1t = 1.0 - self.beta1**self.step
        b2t = 1.0 - self.beta2**self.step
        for k in sorted(P):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            P[k] = P[k] - self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
