"""Minimal conv-net stack with explicit forward/backward passes.

Every layer is a pair of pure functions: forward(...) -> (out, cache) and
backward(dout, cache) -> gradients.  Nets compose them and keep their
parameters in ordered dicts so that initialization order, update order and
checkpoint layout are all deterministic.

Conventions:
* activations are NCHW, float32 or float64 (the caller picks);
* conv is 3x3, stride 1, pad 1; pooling is 2x2 max, stride 2, floor sizes,
  ties broken toward the first window position;
* batch norm normalizes with biased batch variance in train mode and with
  running statistics in eval mode; running stats update as
  running = (1 - momentum) * running + momentum * batch with momentum 0.1;
* initialization is He-style uniform over fan-in, drawn from a caller-owned
  seeded generator in declaration order.
"""

from __future__ import annotations

import json
from collections import OrderedDict

import numpy as np

from .errors import CheckpointVersionError, ConfigError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- layers


def conv3x3_forward(x, w, b):
    """x (N, C, H, W), w (F, C, 3, 3), b (F,) -> out (N, F, H, W)."""
    N, C, H, W = x.shape
    F = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, C * 9)
    wmat = w.reshape(F, C * 9).T
    out = (cols @ wmat + b).reshape(N, H, W, F).transpose(0, 3, 1, 2)
    cache = (cols, wmat, x.shape, w.shape)
    return np.ascontiguousarray(out), cache


def conv3x3_backward(dout, cache):
    cols, wmat, xshape, wshape = cache
    N, C, H, W = xshape
    F = wshape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(N * H * W, F)
    dw = (cols.T @ dmat).T.reshape(wshape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ wmat.T).reshape(N, H, W, C, 3, 3)
    dxp = np.zeros((N, C, H + 2, W + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + H, j : j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1 : 1 + H, 1 : 1 + W], dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool2x2_forward(x):
    N, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    if H2 < 1 or W2 < 1:
        raise ConfigError(f"spatial size {H}x{W} too small to pool")
    win = (
        x[:, :, : H2 * 2, : W2 * 2]
        .reshape(N, C, H2, 2, W2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(N, C, H2, W2, 4)
    )
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2x2_backward(dout, cache):
    idx, xshape = cache
    N, C, H, W = xshape
    H2, W2 = H // 2, W // 2
    dwin = np.zeros((N, C, H2, W2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(xshape, dtype=dout.dtype)
    dx[:, :, : H2 * 2, : W2 * 2] = (
        dwin.reshape(N, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H2 * 2, W2 * 2)
    )
    return dx


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel normalization over (N, H, W).

    In train mode the running buffers are updated IN PLACE; eval mode never
    touches them.
    """
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var
    else:
        mean = running_mean
        var = running_var
    ivar = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, ivar, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, ivar, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if train:
        # Batch statistics depend on x, so the backward couples the batch.
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        dx = (ivar[None, :, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    else:
        dx = dxhat * ivar[None, :, None, None]
    return dx, dgamma, dbeta


def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def gap_forward(x):
    """Global average pool (N, C, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dout, xshape):
    N, C, H, W = xshape
    return np.broadcast_to(dout[:, :, None, None] / (H * W), xshape).copy()


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dout, y):
    return dout * (1.0 - y * y)


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ------------------------------------------------------------------ nets


class ConvNet:
    """Shared skeleton: conv blocks -> head.  Subclasses define the head."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def zero_grads(self):
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items())

    def state_checksum(self) -> int:
        import zlib

        crc = 0
        for k, v in list(self.params.items()) + list(self.buffers.items()):
            crc = zlib.crc32(k.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(v).tobytes(), crc)
        return crc


class EmbeddingNet(ConvNet):
    """Conv embedding: B x (conv3x3 -> [batch norm] -> relu -> 2x2 max pool),
    flattened, projected to h_dim when the flat size differs."""

    def __init__(self, in_hw, blocks=4, filters=64, h_dim=128, use_bn=True, rng=None, dtype=np.float64):
        super().__init__(dtype)
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_hw = tuple(in_hw)
        self.blocks = blocks
        self.filters = filters
        self.h_dim = h_dim
        self.use_bn = use_bn

        h, w = self.in_hw
        c_in = 1
        for b in range(blocks):
            self.params[f"conv{b}.w"] = he_uniform(rng, (filters, c_in, 3, 3), c_in * 9, self.dtype)
            self.params[f"conv{b}.b"] = np.zeros(filters, dtype=self.dtype)
            if use_bn:
                self.params[f"bn{b}.gamma"] = np.ones(filters, dtype=self.dtype)
                self.params[f"bn{b}.beta"] = np.zeros(filters, dtype=self.dtype)
                self.buffers[f"bn{b}.running_mean"] = np.zeros(filters, dtype=self.dtype)
                self.buffers[f"bn{b}.running_var"] = np.ones(filters, dtype=self.dtype)
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigError(
                    f"input {self.in_hw} incompatible with {blocks} pooling stages"
                )
            c_in = filters
        self.flat_dim = filters * h * w
        self.out_hw = (h, w)
        if self.flat_dim != h_dim:
            self.params["proj.w"] = he_uniform(rng, (self.flat_dim, h_dim), self.flat_dim, self.dtype)
            self.params["proj.b"] = np.zeros(h_dim, dtype=self.dtype)

    def arch_descriptor(self):
        return {
            "kind": "embedding",
            "in_hw": list(self.in_hw),
            "blocks": self.blocks,
            "filters": self.filters,
            "h_dim": self.h_dim,
            "use_bn": self.use_bn,
        }

    @classmethod
    def from_descriptor(cls, desc, dtype=np.float64):
        return cls(
            in_hw=tuple(desc["in_hw"]),
            blocks=desc["blocks"],
            filters=desc["filters"],
            h_dim=desc["h_dim"],
            use_bn=desc["use_bn"],
            dtype=dtype,
        )

    def forward(self, x, train=False):
        """x (N, 1, H, W) -> embeddings (N, h_dim).  Eval mode is
        deterministic per sample; train mode uses batch statistics."""
        if x.shape[2:] != self.in_hw:
            raise ConfigError(f"expected {self.in_hw} images, got {x.shape[2:]}")
        x = x.astype(self.dtype, copy=False)
        caches = []
        for b in range(self.blocks):
            x, c_conv = conv3x3_forward(x, self.params[f"conv{b}.w"], self.params[f"conv{b}.b"])
            if self.use_bn:
                x, c_bn = batchnorm_forward(
                    x,
                    self.params[f"bn{b}.gamma"],
                    self.params[f"bn{b}.beta"],
                    self.buffers[f"bn{b}.running_mean"],
                    self.buffers[f"bn{b}.running_var"],
                    train,
                )
            else:
                c_bn = None
            x, c_relu = relu_forward(x)
            x, c_pool = maxpool2x2_forward(x)
            caches.append((c_conv, c_bn, c_relu, c_pool))
        n = x.shape[0]
        pooled_shape = x.shape
        emb = x.reshape(n, self.flat_dim)
        c_proj = None
        if "proj.w" in self.params:
            emb, c_proj = linear_forward(emb, self.params["proj.w"], self.params["proj.b"])
        return emb, (caches, pooled_shape, c_proj)

    def backward(self, demb, cache):
        """demb (N, h_dim) -> (dx, grads dict)."""
        caches, pooled_shape, c_proj = cache
        grads = OrderedDict()
        if c_proj is not None:
            demb, grads["proj.w"], grads["proj.b"] = linear_backward(demb, c_proj)
        dx = demb.reshape(pooled_shape)
        for b in reversed(range(self.blocks)):
            c_conv, c_bn, c_relu, c_pool = caches[b]
            dx = maxpool2x2_backward(dx, c_pool)
            dx = relu_backward(dx, c_relu)
            if self.use_bn:
                dx, grads[f"bn{b}.gamma"], grads[f"bn{b}.beta"] = batchnorm_backward(dx, c_bn)
            dx, grads[f"conv{b}.w"], grads[f"conv{b}.b"] = conv3x3_backward(dx, c_conv)
        return dx, grads


class AdversaryNet(ConvNet):
    """Warp-parameter predictor: 2 conv blocks (16 filters, relu, pool),
    global average pool, linear to the raw outputs."""

    def __init__(self, in_hw, filters=16, n_out=4, rng=None, dtype=np.float64):
        super().__init__(dtype)
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_hw = tuple(in_hw)
        self.filters = filters
        self.n_out = n_out
        h, w = self.in_hw
        c_in = 1
        for b in range(2):
            self.params[f"conv{b}.w"] = he_uniform(rng, (filters, c_in, 3, 3), c_in * 9, self.dtype)
            self.params[f"conv{b}.b"] = np.zeros(filters, dtype=self.dtype)
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigError(f"input {self.in_hw} too small for 2 pooling stages")
            c_in = filters
        self.params["fc.w"] = he_uniform(rng, (filters, n_out), filters, self.dtype)
        self.params["fc.b"] = np.zeros(n_out, dtype=self.dtype)

    def arch_descriptor(self):
        return {
            "kind": "adversary",
            "in_hw": list(self.in_hw),
            "filters": self.filters,
            "n_out": self.n_out,
        }

    @classmethod
    def from_descriptor(cls, desc, dtype=np.float64):
        return cls(
            in_hw=tuple(desc["in_hw"]),
            filters=desc["filters"],
            n_out=desc["n_out"],
            dtype=dtype,
        )

    def forward(self, x, train=False):
        """x (N, 1, H, W) -> raw outputs (N, n_out)."""
        if x.shape[2:] != self.in_hw:
            raise ConfigError(f"expected {self.in_hw} images, got {x.shape[2:]}")
        x = x.astype(self.dtype, copy=False)
        caches = []
        for b in range(2):
            x, c_conv = conv3x3_forward(x, self.params[f"conv{b}.w"], self.params[f"conv{b}.b"])
            x, c_relu = relu_forward(x)
            x, c_pool = maxpool2x2_forward(x)
            caches.append((c_conv, c_relu, c_pool))
        x, c_gap = gap_forward(x)
        raw, c_fc = linear_forward(x, self.params["fc.w"], self.params["fc.b"])
        return raw, (caches, c_gap, c_fc)

    def backward(self, draw, cache):
        caches, c_gap, c_fc = cache
        grads = OrderedDict()
        dx, grads["fc.w"], grads["fc.b"] = linear_backward(draw, c_fc)
        dx = gap_backward(dx, c_gap)
        for b in reversed(range(2)):
            c_conv, c_relu, c_pool = caches[b]
            dx = maxpool2x2_backward(dx, c_pool)
            dx = relu_backward(dx, c_relu)
            dx, grads[f"conv{b}.w"], grads[f"conv{b}.b"] = conv3x3_backward(dx, c_conv)
        return dx, grads


class Adam:
    """Adaptive-moment optimizer over a net's parameter dict, fixed key order."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
        self.v = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)


# ----------------------------------------------------------- checkpoints


def save_checkpoint(path, nets, extra=None):
    """Versioned container: JSON metadata + one array entry per tensor.

    `nets` maps a name (e.g. "classifier") to a net object; `extra` is an
    arbitrary JSON-serializable dict stored alongside.
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "nets": {name: net.arch_descriptor() for name, net in nets.items()},
        "dtypes": {name: net.dtype.name for name, net in nets.items()},
        "extra": extra or {},
    }
    arrays = {}
    for name, net in nets.items():
        for k, v in net.params.items():
            arrays[f"{name}/p/{k}"] = v
        for k, v in net.buffers.items():
            arrays[f"{name}/b/{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    """Load a container; returns (meta, nets dict name -> rebuilt net)."""
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise CheckpointVersionError(f"{path}: not a recognized checkpoint container")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint version {meta.get('version')} not supported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        nets = {}
        builders = {"embedding": EmbeddingNet, "adversary": AdversaryNet}
        for name, desc in meta["nets"].items():
            net = builders[desc["kind"]].from_descriptor(desc, dtype=np.dtype(meta["dtypes"][name]))
            for k in net.params:
                net.params[k] = data[f"{name}/p/{k}"].copy()
            for k in net.buffers:
                net.buffers[k] = data[f"{name}/b/{k}"].copy()
            nets[name] = net
    return meta, nets
