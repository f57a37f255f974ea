"""1-D U-net sequence labeler written directly on numpy.

Feature maps are 4-D arrays ``(batch, channels, leads, time)``.  The first
U-shaped path runs 1 x K kernels along time, sharing weights across the 12
leads; a 12 x 1 valid convolution then collapses the leads and a second,
shallower U-shaped path works on the joint feature vector.  The output is a
per-millisecond softmax over the six segment classes.

Backpropagation uses a small tape: every op records a closure mapping its
output gradient to its input gradients, and the tape is replayed in reverse.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FORMAT_NAME = "ecgai-unet"
FORMAT_VERSION = "1"


class ShapeError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


# -- primitives -----------------------------------------------------------------

def _as4d(x: np.ndarray) -> tuple[np.ndarray, int]:
    """View (C,L), (C,H,L) or (N,C,H,L) as 4-D; return the original rank."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, :, None, :], 2
    if x.ndim == 3:
        return x[None], 3
    if x.ndim == 4:
        return x, 4
    raise ShapeError(f"expected a 2-, 3- or 4-D feature map, got shape {x.shape}")


def _restore(y: np.ndarray, ndim: int) -> np.ndarray:
    if ndim == 2:
        return y[0, :, 0, :]
    if ndim == 3:
        return y[0]
    return y


def _conv_same(x, w, b=None):
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"kernel length must be odd for same padding, got {k}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (pad, pad))) if pad else x
    win = sliding_window_view(xp, k, axis=3)
    y = np.einsum("nchlk,ock->nohl", win, w, optimize=True)
    if b is not None:
        y += b[None, :, None, None]
    return y, win


def _conv_same_backward(g, win, w):
    # dW as one GEMM per kernel tap; cheaper than contracting the window view.
    n, cout, h, length = g.shape
    cin, k = w.shape[1], w.shape[2]
    gt = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    dw = np.empty_like(w)
    for j in range(k):
        xs = win[..., j].transpose(1, 0, 2, 3).reshape(cin, -1)
        dw[:, :, j] = gt @ xs.T
    db = g.sum(axis=(0, 2, 3))
    wt = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))
    dx, _ = _conv_same(g, wt)
    return dx, dw, db


def conv1d_same(x, kernels, bias=None) -> np.ndarray:
    """Zero-padded cross-correlation along time with output length equal to input length."""
    x4, nd = _as4d(x)
    w = np.asarray(kernels, dtype=np.float64)
    if w.ndim != 3:
        raise ShapeError(f"kernels must be C_out x C_in x K, got shape {w.shape}")
    b = None if bias is None else np.asarray(bias, dtype=np.float64)
    y, _ = _conv_same(x4, w, b)
    return _restore(y, nd)


def _collapse(x, w, b=None):
    if x.shape[2] != w.shape[2]:
        raise ShapeError(f"lead collapse expects {w.shape[2]} leads, got {x.shape[2]}")
    y = np.einsum("nchl,och->nol", x, w[..., 0], optimize=True)[:, :, None, :]
    if b is not None:
        y += b[None, :, None, None]
    return y


def lead_collapse(x, kernel, bias=None, n_leads: int = 12) -> np.ndarray:
    """Valid 12 x 1 convolution contracting channels and leads into one row."""
    x4, nd = _as4d(x)
    w = np.asarray(kernel, dtype=np.float64)
    if x4.shape[2] != n_leads:
        raise ShapeError(f"lead dimension must be {n_leads}, got {x4.shape[2]}")
    if w.ndim != 4 or w.shape[2:] != (n_leads, 1) or w.shape[1] != x4.shape[1]:
        raise ShapeError(f"kernel must be F' x {x4.shape[1]} x {n_leads} x 1, got {w.shape}")
    y = _collapse(x4, w, None if bias is None else np.asarray(bias, dtype=np.float64))
    return _restore(y, nd)


def _pool(x):
    n, c, h, l = x.shape
    if l % 2:
        raise ShapeError(f"max pool needs an even length, got {l}")
    pairs = x.reshape(n, c, h, l // 2, 2)
    arg = pairs.argmax(axis=4)
    y = np.take_along_axis(pairs, arg[..., None], axis=4)[..., 0]
    return y, arg


def _pool_backward(g, arg):
    n, c, h, half = g.shape
    dx = np.zeros((n, c, h, half, 2))
    np.put_along_axis(dx, arg[..., None], g[..., None], axis=4)
    return dx.reshape(n, c, h, 2 * half)


def maxpool2(x) -> tuple[np.ndarray, np.ndarray]:
    """Max pool by 2 along time; returns pooled values and flat argmax indices."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        y, arg = _pool(x[None, None, None, :])
        idx = 2 * np.arange(arg.shape[-1]) + arg[0, 0, 0]
        return y[0, 0, 0], idx
    x4, nd = _as4d(x)
    y, arg = _pool(x4)
    idx = 2 * np.arange(arg.shape[-1]) + arg
    return _restore(y, nd), _restore(idx, nd)


def _deconv(x, w, b=None):
    cin, cout, k = w.shape
    n, c, h, l = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, deconvolution kernel expects {cin}")
    y = np.einsum("nchl,cok->nohlk", x, w, optimize=True).reshape(n, cout, h, l * k)
    if b is not None:
        y += b[None, :, None, None]
    return y


def _deconv_backward(g, x, w):
    cin, cout, k = w.shape
    n, _, h, l = x.shape
    g5 = g.reshape(n, cout, h, l, k)
    dx = np.einsum("nohlk,cok->nchl", g5, w, optimize=True)
    dw = np.einsum("nohlk,nchl->cok", g5, x, optimize=True)
    return dx, dw, g.sum(axis=(0, 2, 3))


def upsample_deconv(x, kernel, stride: int, bias=None) -> np.ndarray:
    """Transposed convolution with kernel length equal to the stride.

    ``kernel`` is C_in x C_out x K; each input step paints K output steps, so
    the output is ``stride`` times longer than the input.
    """
    x4, nd = _as4d(x)
    w = np.asarray(kernel, dtype=np.float64)
    if w.ndim != 3:
        raise ShapeError(f"kernel must be C_in x C_out x K, got shape {w.shape}")
    if w.shape[2] != stride:
        raise ShapeError(f"kernel length {w.shape[2]} must equal stride {stride}")
    y = _deconv(x4, w, None if bias is None else np.asarray(bias, dtype=np.float64))
    return _restore(y, nd)


def concat_skip(skip, up) -> np.ndarray:
    """Stack channels, skip connection first."""
    skip = np.asarray(skip)
    up = np.asarray(up)
    if skip.ndim != up.ndim or skip.shape[-1] != up.shape[-1]:
        raise ShapeError(f"cannot concatenate shapes {skip.shape} and {up.shape}")
    axis = 1 if skip.ndim == 4 else 0
    return np.concatenate([skip, up], axis=axis)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- tape -------------------------------------------------------------------------

class _Tape:
    """Reverse-mode bookkeeping for one forward pass."""

    def __init__(self, params: dict[str, np.ndarray], record: bool):
        self.params = params
        self.record = record
        self.entries = []          # (output id, input ids, backward fn)
        self.values = {}
        self.next_id = 0

    def leaf(self, value):
        i = self.next_id
        self.next_id += 1
        self.values[i] = value
        return i

    def op(self, value, inputs, backward, param_names=()):
        i = self.leaf(value)
        if self.record:
            self.entries.append((i, tuple(inputs), tuple(param_names), backward))
        return i

    def backward(self, out_id, g_out):
        grads = {out_id: g_out}
        pgrads = {name: np.zeros_like(w) for name, w in self.params.items()}
        for out, inputs, names, fn in reversed(self.entries):
            g = grads.pop(out, None)
            if g is None:
                continue
            in_grads, p_grads = fn(g)
            for i, gi in zip(inputs, in_grads):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
            for name, gp in zip(names, p_grads):
                pgrads[name] += gp
        return pgrads


# -- model ------------------------------------------------------------------------

@dataclass(frozen=True)
class UNetConfig:
    input_len: int = 2000
    n_leads: int = 12
    n_classes: int = 6
    conv_block_depth: int = 3
    lead_kernels: tuple[int, ...] = (19, 15, 11, 11, 11)
    lead_up: tuple[tuple[int, int], ...] = ((8, 11), (2, 11))
    joint_kernels: tuple[int, ...] = (11, 11)
    joint_up: tuple[tuple[int, int], ...] = ((2, 9),)
    stage_filters: tuple[int, int] = (16, 32)
    dropout_p: float = 0.5
    activation: str = "elu"
    scale: str = "paper"

    def __post_init__(self):
        kernels = self.stage_kernels
        if any(k < 1 or k % 2 == 0 for k in kernels):
            raise ShapeError(f"all block kernels must be odd, got {kernels}")
        for name, downs, ups in (("lead", self.lead_kernels, self.lead_up),
                                 ("joint", self.joint_kernels, self.joint_up)):
            if not downs:
                raise ShapeError(f"{name} path needs at least one block")
            pools = len(downs) - 1
            if self.input_len % (2 ** pools):
                raise ShapeError(
                    f"input_len {self.input_len} not divisible by 2^{pools} for the {name} path")
            factor = math.prod(s for s, _ in ups)
            if factor != 2 ** pools:
                raise ShapeError(
                    f"{name} upsampling strides multiply to {factor}, need {2 ** pools}")
            # Power-of-two strides guarantee every upsampled length meets a stored skip.
            for s, _ in ups:
                if s & (s - 1):
                    raise ShapeError(f"upsampling stride {s} is not a power of two")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ShapeError("dropout_p must lie in [0, 1)")
        if self.activation not in ("elu", "relu"):
            raise ShapeError(f"unknown activation {self.activation!r}")
        if min(self.stage_filters) < 1:
            raise ShapeError("filter counts must be positive")

    @property
    def stage_kernels(self) -> tuple[int, ...]:
        return (tuple(self.lead_kernels) + tuple(k for _, k in self.lead_up)
                + tuple(self.joint_kernels) + tuple(k for _, k in self.joint_up))

    @property
    def n_pool_stages(self) -> int:
        return len(self.lead_kernels) - 1 + len(self.joint_kernels) - 1

    @property
    def n_conv_layers(self) -> int:
        blocks = len(self.stage_kernels)
        return blocks * self.conv_block_depth + 2   # plus lead collapse and 1x1 head

    @classmethod
    def paper(cls, input_len: int = 2000) -> "UNetConfig":
        return cls(input_len=input_len, scale="paper")

    @classmethod
    def desk(cls, input_len: int = 2000, filters: tuple[int, int] = (4, 8)) -> "UNetConfig":
        return cls(input_len=input_len, lead_kernels=(9, 9), lead_up=((2, 9),),
                   joint_kernels=(9, 9), joint_up=((2, 7),), stage_filters=tuple(filters),
                   scale="desk")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lead_up"] = [list(p) for p in self.lead_up]
        d["joint_up"] = [list(p) for p in self.joint_up]
        for key in ("lead_kernels", "joint_kernels", "stage_filters"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["lead_up"] = tuple(tuple(p) for p in d["lead_up"])
        d["joint_up"] = tuple(tuple(p) for p in d["joint_up"])
        for key in ("lead_kernels", "joint_kernels", "stage_filters"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 5
    weight_decay: float = 1e-7
    dropout_p: float = 0.5
    epochs: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    @classmethod
    def paper(cls, seed: int = 0) -> "TrainConfig":
        return cls(seed=seed)

    @classmethod
    def desk(cls, seed: int = 0, epochs: int = 12) -> "TrainConfig":
        return cls(learning_rate=3e-3, epochs=epochs, seed=seed)


def _block_specs(cfg: UNetConfig):
    """Yield (name, kind, shape) for every weight tensor, in a fixed order."""
    fl, fj = cfg.stage_filters
    specs = []

    def block(prefix, cin, cout, k):
        for i in range(cfg.conv_block_depth):
            specs.append((f"{prefix}.conv{i}.w", (cout, cin if i == 0 else cout, k)))
            specs.append((f"{prefix}.conv{i}.b", (cout,)))

    cin = 1
    for i, k in enumerate(cfg.lead_kernels):
        block(f"lead.down{i}", cin, fl, k)
        cin = fl
    for i, (s, k) in enumerate(cfg.lead_up):
        specs.append((f"lead.up{i}.deconv.w", (fl, fl, s)))
        specs.append((f"lead.up{i}.deconv.b", (fl,)))
        block(f"lead.up{i}", 2 * fl, fl, k)
    specs.append(("collapse.w", (fj, fl, cfg.n_leads, 1)))
    specs.append(("collapse.b", (fj,)))
    cin = fj
    for i, k in enumerate(cfg.joint_kernels):
        block(f"joint.down{i}", cin, fj, k)
    for i, (s, k) in enumerate(cfg.joint_up):
        specs.append((f"joint.up{i}.deconv.w", (fj, fj, s)))
        specs.append((f"joint.up{i}.deconv.b", (fj,)))
        block(f"joint.up{i}", 2 * fj, fj, k)
    specs.append(("head.w", (cfg.n_classes, fj, 1)))
    specs.append(("head.b", (cfg.n_classes,)))
    return specs


def _fan_in(shape) -> int:
    if len(shape) == 4:          # collapse: F' x F x leads x 1
        return shape[1] * shape[2]
    if len(shape) == 3:
        return shape[1] * shape[2]
    return 1


@dataclass(eq=False)
class UNetModel:
    config: UNetConfig
    weights: dict[str, np.ndarray]
    rng_seed: int = 0

    @classmethod
    def init(cls, config: UNetConfig, seed: int = 0) -> "UNetModel":
        """He-normal kernels from a seeded stream, zero biases."""
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in _block_specs(config):
            if name.endswith(".b"):
                weights[name] = np.zeros(shape)
            elif name.endswith("deconv.w"):
                # Transposed conv: each output sees C_in inputs.
                weights[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
            else:
                weights[name] = rng.normal(0.0, math.sqrt(2.0 / _fan_in(shape)), size=shape)
        return cls(config, weights, seed)

    def copy(self) -> "UNetModel":
        return UNetModel(self.config, {k: v.copy() for k, v in self.weights.items()}, self.rng_seed)

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())


def _forward_graph(model: UNetModel, x: np.ndarray, *, train_mode: bool, dropout_p: float,
                   rng: np.random.Generator | None, record: bool, probe: list | None = None):
    """Run the network on x (N, 12, L); return (tape, logits node id).

    When ``probe`` is a list, every max-pool's argmax array is appended to it.
    """
    cfg = model.config
    W = model.weights
    tape = _Tape(W, record)

    def conv(h, name):
        w, b = W[name + ".w"], W[name + ".b"]
        y, win = _conv_same(tape.values[h], w, b)

        def back(g):
            dx, dw, db = _conv_same_backward(g, win, w)
            return (dx,), (dw, db)
        return tape.op(y, (h,), back, (name + ".w", name + ".b"))

    def act(h):
        v = tape.values[h]
        if cfg.activation == "elu":
            neg = np.expm1(np.minimum(v, 0.0))
            out = np.maximum(v, 0.0) + neg
            slope = neg + 1.0
            return tape.op(out, (h,), lambda g: ((g * slope,), ()))
        mask = v > 0
        return tape.op(v * mask, (h,), lambda g: ((g * mask,), ()))

    def block(h, prefix):
        for i in range(cfg.conv_block_depth):
            h = act(conv(h, f"{prefix}.conv{i}"))
        return h

    def pool(h):
        y, arg = _pool(tape.values[h])
        if probe is not None:
            probe.append(arg)
        return tape.op(y, (h,), lambda g: ((_pool_backward(g, arg),), ()))

    def deconv(h, name):
        w, b = W[name + ".w"], W[name + ".b"]
        xv = tape.values[h]
        y = _deconv(xv, w, b)

        def back(g):
            dx, dw, db = _deconv_backward(g, xv, w)
            return (dx,), (dw, db)
        return tape.op(y, (h,), back, (name + ".w", name + ".b"))

    def concat(skip, up):
        a, b = tape.values[skip], tape.values[up]
        ca = a.shape[1]
        y = np.concatenate([a, b], axis=1)
        return tape.op(y, (skip, up), lambda g: ((g[:, :ca], g[:, ca:]), ()))

    def u_path(h, prefix, kernels, ups):
        skips = {}
        for i in range(len(kernels)):
            h = block(h, f"{prefix}.down{i}")
            skips[tape.values[h].shape[3]] = h
            if i < len(kernels) - 1:
                h = pool(h)
        for i, _ in enumerate(ups):
            h = deconv(h, f"{prefix}.up{i}.deconv")
            h = concat(skips[tape.values[h].shape[3]], h)
            h = block(h, f"{prefix}.up{i}")
        return h

    h = tape.leaf(x[:, None, :, :])
    h = u_path(h, "lead", cfg.lead_kernels, cfg.lead_up)

    wc, bc = W["collapse.w"], W["collapse.b"]
    xv = tape.values[h]
    y = _collapse(xv, wc, bc)

    def collapse_back(g):
        g3 = g[:, :, 0, :]
        dx = np.einsum("nol,och->nchl", g3, wc[..., 0], optimize=True)
        dw = np.einsum("nol,nchl->och", g3, xv, optimize=True)[..., None]
        return (dx,), (dw, g3.sum(axis=(0, 2)))
    h = act(tape.op(y, (h,), collapse_back, ("collapse.w", "collapse.b")))

    h = u_path(h, "joint", cfg.joint_kernels, cfg.joint_up)
    if train_mode and dropout_p > 0:
        v = tape.values[h]
        keep = (rng.random(v.shape) >= dropout_p) / (1.0 - dropout_p)
        h = tape.op(v * keep, (h,), lambda g: ((g * keep,), ()))
    logits = conv(h, "head")
    return tape, logits


def _check_windows(model, windows):
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    cfg = model.config
    if x.ndim != 3 or x.shape[1] != cfg.n_leads or x.shape[2] != cfg.input_len:
        raise ShapeError(
            f"expected windows of shape (n, {cfg.n_leads}, {cfg.input_len}), got {x.shape}")
    return x


def pool_switches(model: UNetModel, windows) -> list[np.ndarray]:
    """Argmax choices of every max-pool in an inference pass.

    Finite differences are only meaningful when these do not change between
    the perturbed evaluations.
    """
    x = _check_windows(model, windows)
    probe: list = []
    _forward_graph(model, x, train_mode=False, dropout_p=0.0, rng=None, record=False, probe=probe)
    return probe


def predict_proba(model: UNetModel, windows, *, train_mode: bool = False, seed: int = 0,
                  dropout_p: float | None = None) -> np.ndarray:
    """Batched class probabilities, shape (n, L, 6)."""
    x = _check_windows(model, windows)
    p = model.config.dropout_p if dropout_p is None else dropout_p
    rng = np.random.default_rng(seed) if train_mode else None
    tape, logits = _forward_graph(model, x, train_mode=train_mode, dropout_p=p, rng=rng,
                                  record=False)
    z = tape.values[logits][:, :, 0, :]
    return softmax(z, axis=1).transpose(0, 2, 1)


def forward(model: UNetModel, window, train_mode: bool = False, seed: int = 0) -> np.ndarray:
    """Per-step probabilities (L x 6) for a single 12 x L window."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ShapeError(f"expected a 12 x L window, got shape {window.shape}")
    return predict_proba(model, window[None], train_mode=train_mode, seed=seed)[0]


def _penalty(model, weight_decay):
    return weight_decay * sum(float(np.sum(w * w)) for name, w in model.weights.items()
                              if name.endswith(".w"))


def loss_and_grads(model: UNetModel, windows, labels, train_cfg: TrainConfig, *,
                   rng: np.random.Generator | None = None, train_mode: bool = True
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-step cross-entropy plus an L2 penalty on kernels, with gradients."""
    x = _check_windows(model, windows)
    y = np.asarray(labels)
    if y.ndim == 1:
        y = y[None]
    if y.shape != (x.shape[0], x.shape[2]):
        raise ShapeError(f"labels shape {y.shape} does not match windows {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("batch is empty")
    if rng is None:
        rng = np.random.default_rng(train_cfg.seed)
    tape, logits = _forward_graph(model, x, train_mode=train_mode,
                                  dropout_p=train_cfg.dropout_p, rng=rng, record=True)
    z = tape.values[logits][:, :, 0, :]                   # (n, classes, L)
    zmax = z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    logp = z - logsum
    n, _, length = z.shape
    picked = np.take_along_axis(logp, y[:, None, :].astype(np.int64), axis=1)
    data_loss = -float(picked.mean())
    loss = data_loss + _penalty(model, train_cfg.weight_decay)
    if not math.isfinite(loss):
        raise TrainingDiverged(-1, loss)
    g = np.exp(logp)
    np.put_along_axis(g, y[:, None, :].astype(np.int64),
                      np.take_along_axis(g, y[:, None, :].astype(np.int64), axis=1) - 1.0, axis=1)
    g /= n * length
    grads = tape.backward(logits, g[:, :, None, :])
    if train_cfg.weight_decay:
        for name, w in model.weights.items():
            if name.endswith(".w"):
                grads[name] += 2.0 * train_cfg.weight_decay * w
    return loss, grads


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(weights: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """In-place ADAM update with bias-corrected moment estimates."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(weights):
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        weights[name] -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def train(model: UNetModel, dataset, train_cfg: TrainConfig, *, log=None
          ) -> tuple[UNetModel, list[float]]:
    """Mini-batch ADAM over (windows, labels); returns a new model and per-epoch mean loss."""
    windows, labels = dataset
    x = _check_windows(model, windows)
    y = np.asarray(labels)
    if x.shape[0] == 0:
        raise ValueError("dataset is empty")
    if y.shape != (x.shape[0], x.shape[2]):
        raise ShapeError(f"labels shape {y.shape} does not match windows {x.shape}")
    model = model.copy()
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    dropout_rng = np.random.default_rng([train_cfg.seed, 2])
    state = AdamState()
    trace = []
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(x.shape[0])
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            try:
                loss, grads = loss_and_grads(model, x[idx], y[idx], train_cfg, rng=dropout_rng)
            except TrainingDiverged as exc:
                raise TrainingDiverged(epoch, exc.loss) from None
            if not all(np.all(np.isfinite(gv)) for gv in grads.values()):
                raise TrainingDiverged(epoch, loss)
            losses.append(loss)
            adam_step(model.weights, grads, state, train_cfg)
        epoch_loss = float(np.mean(losses))
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(epoch, epoch_loss)
        trace.append(epoch_loss)
        if log is not None:
            log(epoch, epoch_loss)
    return model, trace


# -- persistence ------------------------------------------------------------------

def model_to_dict(model: UNetModel) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "rng_seed": model.rng_seed,
        "weights": {name: {"shape": list(w.shape), "data": w.ravel().tolist()}
                    for name, w in sorted(model.weights.items())},
    }


def save_model(model: UNetModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True) + "\n")


def load_model(path) -> UNetModel:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: cannot parse model file ({exc.msg})") from exc
    if not isinstance(obj, dict) or obj.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path}: not a {FORMAT_NAME} model file")
    if obj.get("version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: model format version {obj.get('version')!r}, expected {FORMAT_VERSION!r}")
    try:
        config = UNetConfig.from_dict(obj["config"])
        weights = {name: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
                   for name, t in obj["weights"].items()}
        seed = int(obj["rng_seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed model file ({exc})") from exc
    expected = dict(_block_specs(config))
    if set(expected) != set(weights):
        raise ModelFormatError(f"{path}: weight names do not match the configuration")
    for name, shape in expected.items():
        if weights[name].shape != tuple(shape):
            raise ModelFormatError(f"{path}: weight {name} has shape {weights[name].shape}, "
                                   f"expected {tuple(shape)}")
    return UNetModel(config, weights, seed)
