"""Shared-weight convolutional pair-similarity network, on plain numpy.

Two identical encoder branches map grayscale patches to feature
vectors. The distance head takes the elementwise difference of the two
embeddings, squares, sums and square-roots it into a scalar Euclidean
distance, then applies a two-parameter affine map and a sigmoid to turn
the distance into a similarity probability. Training minimizes binary
cross-entropy over similar/dissimilar patch pairs with minibatch SGD
and an exponentially decaying learning rate.

Weights are stored as float32 (the serialized precision); all forward
and backward arithmetic runs in float64. The backward pass is verified
against central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence, Union

import numpy as np

from .errors import CountError, DivergenceError, FormatError, InputError, ParameterError

# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Dense:
    out_dim: int


LayerSpec = Union[Conv, Relu, MaxPool, Dense]

_SQRT_GUARD = 1e-12  # lower clamp on the squared distance in the backward pass


def chain_shapes(input_shape: tuple[int, int, int], layers: Sequence[LayerSpec]) -> list[tuple]:
    """Propagate (channels, height, width) through the layer stack.

    Returns the output shape after every layer; Dense output shapes are
    1-tuples. Raises ParameterError when shapes do not chain.
    """
    shapes: list[tuple] = []
    cur: tuple = input_shape
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            if len(cur) != 3:
                raise ParameterError(f"layer {i}: convolution after flattening")
            c, h, w = cur
            if layer.kernel < 1 or layer.stride < 1 or layer.out_channels < 1:
                raise ParameterError(f"layer {i}: bad convolution geometry {layer}")
            if h < layer.kernel or w < layer.kernel:
                raise ParameterError(f"layer {i}: kernel {layer.kernel} exceeds input {h}x{w}")
            cur = (
                layer.out_channels,
                (h - layer.kernel) // layer.stride + 1,
                (w - layer.kernel) // layer.stride + 1,
            )
        elif isinstance(layer, MaxPool):
            if len(cur) != 3:
                raise ParameterError(f"layer {i}: pooling after flattening")
            c, h, w = cur
            if h < layer.window or w < layer.window:
                raise ParameterError(f"layer {i}: pool window {layer.window} exceeds input")
            cur = (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
        elif isinstance(layer, Relu):
            pass
        elif isinstance(layer, Dense):
            if layer.out_dim < 1:
                raise ParameterError(f"layer {i}: bad dense width {layer.out_dim}")
            cur = (layer.out_dim,)
        else:
            raise ParameterError(f"layer {i}: unknown layer {layer!r}")
        shapes.append(cur)
    return shapes


def _flat_dim(shape: tuple) -> int:
    return int(np.prod(shape))


@dataclass
class SiameseModel:
    """Encoder layout, its float32 weights, and the scalar distance head."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    params: list[tuple[np.ndarray, ...]]  # (W, b) for Conv/Dense, () otherwise
    head_w: np.float32
    head_b: np.float32
    embed_dim: int

    @property
    def input_hw(self) -> tuple[int, int]:
        return self.input_shape[1], self.input_shape[2]

    def param_count(self) -> int:
        return sum(p.size for group in self.params for p in group) + 2


def default_encoder(embed_dim: int | None = 128) -> tuple[LayerSpec, ...]:
    """Two conv/pool stages and a dense embedding layer.

    ``embed_dim=None`` selects the unreduced mode: the flattened output
    of the last pooling stage is the embedding.
    """
    layers: list[LayerSpec] = [
        Conv(8, 3, 1),
        Relu(),
        MaxPool(2, 2),
        Conv(16, 3, 1),
        Relu(),
        MaxPool(2, 2),
    ]
    if embed_dim is not None:
        layers.append(Dense(embed_dim))
    return tuple(layers)


def init_model(
    layers: Sequence[LayerSpec] | None = None,
    input_shape: tuple[int, int, int] = (1, 32, 32),
    seed: int = 0,
) -> SiameseModel:
    """Build a model with seeded uniform(+-sqrt(6/(fan_in+fan_out))) weights."""
    if layers is None:
        layers = default_encoder()
    layers = tuple(layers)
    shapes = chain_shapes(input_shape, layers)
    embed_dim = _flat_dim(shapes[-1]) if shapes else _flat_dim(input_shape)

    rng = np.random.default_rng(seed)
    params: list[tuple[np.ndarray, ...]] = []
    cur = input_shape
    for layer, out_shape in zip(layers, shapes):
        if isinstance(layer, Conv):
            c_in = cur[0]
            fan_in = c_in * layer.kernel * layer.kernel
            fan_out = layer.out_channels * layer.kernel * layer.kernel
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, (layer.out_channels, c_in, layer.kernel, layer.kernel))
            params.append((w.astype(np.float32), np.zeros(layer.out_channels, np.float32)))
        elif isinstance(layer, Dense):
            d_in = _flat_dim(cur)
            lim = math.sqrt(6.0 / (d_in + layer.out_dim))
            w = rng.uniform(-lim, lim, (layer.out_dim, d_in))
            params.append((w.astype(np.float32), np.zeros(layer.out_dim, np.float32)))
        else:
            params.append(())
        cur = out_shape
    # distance-to-similarity slope starts negative: far pairs score low
    head_w = np.float32(-1.0)
    head_b = np.float32(0.5)
    return SiameseModel(input_shape, layers, params, head_w, head_b, embed_dim)


# ---------------------------------------------------------------------------
# forward / backward (float64)


def _patch_batch(model: SiameseModel, patches) -> np.ndarray:
    """Stack patches into a (N, C, H, W) float64 batch scaled to [0, 1]."""
    h, w = model.input_hw
    arrs = []
    for p in patches:
        a = np.asarray(p, dtype=np.float64)
        if a.shape != (h, w):
            raise InputError(f"patch shape {a.shape} does not match model input {h}x{w}")
        arrs.append(a)
    return np.stack(arrs).reshape(len(arrs), *model.input_shape) / 255.0


def _params64(model: SiameseModel) -> list[tuple[np.ndarray, ...]]:
    return [tuple(p.astype(np.float64) for p in group) for group in model.params]


def _conv_forward(x, w, b, stride):
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, k, k)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    out = cols @ w.reshape(co, -1).T + b
    out = out.transpose(0, 2, 1).reshape(n, co, ho, wo)
    return out, (x.shape, cols, w, stride, ho, wo)


def _conv_backward(dout, cache):
    x_shape, cols, w, stride, ho, wo = cache
    n, c, h, wd = x_shape
    co = w.shape[0]
    k = w.shape[2]
    dflat = dout.reshape(n, co, ho * wo).transpose(0, 2, 1)  # (n, p, co)
    dw = np.einsum("npi,npo->oi", cols, dflat).reshape(w.shape)
    db = dflat.sum(axis=(0, 1))
    dcols = dflat @ w.reshape(co, -1)  # (n, p, c*k*k)
    dwin = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dx = np.zeros(x_shape)
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += dwin[
                :, :, :, :, ki, kj
            ]
    return dx, dw, db


def _pool_forward(x, window, stride):
    n, c, h, w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    am = flat.argmax(axis=-1)  # first maximum wins: deterministic
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    return out, (x.shape, am, window, stride)


def _pool_backward(dout, cache):
    x_shape, am, window, stride = cache
    n, c, _, _ = x_shape
    ho, wo = am.shape[2], am.shape[3]
    ki, kj = np.divmod(am, window)
    rows = np.arange(ho)[None, None, :, None] * stride + ki
    cols = np.arange(wo)[None, None, None, :] * stride + kj
    dx = np.zeros(x_shape)
    n_idx = np.arange(n)[:, None, None, None]
    c_idx = np.arange(c)[None, :, None, None]
    np.add.at(dx, (n_idx, c_idx, rows, cols), dout)
    return dx


def _encode(model: SiameseModel, x: np.ndarray, params64) -> tuple[np.ndarray, list]:
    """Run the encoder; returns (N, embed_dim) embeddings and layer caches."""
    caches = []
    cur = x
    for layer, group in zip(model.layers, params64):
        if isinstance(layer, Conv):
            cur, cache = _conv_forward(cur, group[0], group[1], layer.stride)
            caches.append(("conv", cache))
        elif isinstance(layer, Relu):
            mask = cur > 0
            caches.append(("relu", mask))
            cur = cur * mask
        elif isinstance(layer, MaxPool):
            cur, cache = _pool_forward(cur, layer.window, layer.stride)
            caches.append(("pool", cache))
        else:  # Dense
            shape_in = cur.shape
            flat = cur.reshape(cur.shape[0], -1)
            caches.append(("dense", (flat, group[0], shape_in)))
            cur = flat @ group[0].T + group[1]
    return cur.reshape(cur.shape[0], -1), caches


def _encoder_backward(model: SiameseModel, caches, dout) -> list[tuple[np.ndarray, ...]]:
    """Backprop ``dout`` (N, embed_dim) through the encoder.

    Returns per-layer parameter gradients in the same layout as
    ``model.params``.
    """
    grads: list[tuple[np.ndarray, ...]] = [() for _ in model.layers]
    shapes = chain_shapes(model.input_shape, model.layers)
    cur = dout
    for i in range(len(model.layers) - 1, -1, -1):
        if len(shapes[i]) == 3 and cur.ndim == 2:
            cur = cur.reshape(cur.shape[0], *shapes[i])
        kind, cache = caches[i]
        if kind == "conv":
            cur, dw, db = _conv_backward(cur, cache)
            grads[i] = (dw, db)
        elif kind == "relu":
            cur = cur * cache
        elif kind == "pool":
            cur = _pool_backward(cur, cache)
        else:  # dense
            flat, w, shape_in = cache
            dw = cur.T @ flat
            db = cur.sum(axis=0)
            grads[i] = (dw, db)
            cur = (cur @ w).reshape(shape_in)
    return grads


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_from_logit(logit, y):
    # softplus(logit) - y*logit, numerically stable; ln 2 exactly at logit 0
    z = np.asarray(logit, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - y * z


# ---------------------------------------------------------------------------
# public data types


@dataclass(frozen=True)
class PairSample:
    """Two equally sized patches and a similar(1)/non-similar(0) label."""

    patch_a: np.ndarray
    patch_b: np.ndarray
    label: int


@dataclass(frozen=True)
class PairLossTerm:
    """Distance-head output for one pair.

    ``loss`` is the binary cross-entropy of ``prob`` against ``label``
    and is populated only when a label was supplied.
    """

    distance: float
    logit: float
    prob: float
    label: int | None = None
    loss: float | None = None


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    decay: float = 0.95
    epochs: int = 30
    batch: int = 16
    neg_ratio: float = 1.5
    split: float = 0.70
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ParameterError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 < self.decay <= 1.0:
            raise ParameterError(f"decay must be in (0, 1], got {self.decay}")
        if self.epochs < 0 or self.batch < 1:
            raise ParameterError("epochs must be >= 0 and batch >= 1")
        if self.neg_ratio <= 0:
            raise ParameterError(f"neg_ratio must be > 0, got {self.neg_ratio}")
        if not 0.0 < self.split < 1.0:
            raise ParameterError(f"split must be in (0, 1), got {self.split}")


# ---------------------------------------------------------------------------
# embedding and pair scoring


def embed_batch(model: SiameseModel, patches) -> np.ndarray:
    """Embed patches of the model's input size; returns (N, n) float32."""
    x = _patch_batch(model, patches)
    emb, _ = _encode(model, x, _params64(model))
    return emb.astype(np.float32)


def embed(model: SiameseModel, patch) -> np.ndarray:
    """Deterministic embedding of one patch (float32 vector of length n)."""
    return embed_batch(model, [patch])[0]


def pair_distance(model: SiameseModel, a, b, label: int | None = None) -> PairLossTerm:
    """Score one patch pair with the full two-branch network.

    ``distance`` is the Euclidean distance of the two embeddings; the
    head maps it to ``logit`` and ``prob``.
    """
    x = _patch_batch(model, [a, b])
    emb, _ = _encode(model, x, _params64(model))
    diff = emb[0] - emb[1]
    d = float(np.sqrt(np.sum(diff * diff)))
    logit = float(model.head_w) * d + float(model.head_b)
    prob = float(_sigmoid(logit))
    loss = None
    if label is not None:
        if label not in (0, 1):
            raise InputError(f"label must be 0 or 1, got {label}")
        loss = float(_bce_from_logit(logit, float(label)))
    return PairLossTerm(distance=d, logit=logit, prob=prob, label=label, loss=loss)


# ---------------------------------------------------------------------------
# flat parameter vector helpers (training and gradient checking)


def _flatten_params(params64, head_w: float, head_b: float) -> np.ndarray:
    chunks = [p.reshape(-1) for group in params64 for p in group]
    chunks.append(np.array([head_w, head_b], dtype=np.float64))
    return np.concatenate(chunks)


def _unflatten_params(model: SiameseModel, theta: np.ndarray):
    groups = []
    pos = 0
    for group in model.params:
        new_group = []
        for p in group:
            new_group.append(theta[pos : pos + p.size].reshape(p.shape))
            pos += p.size
        groups.append(tuple(new_group))
    head_w = float(theta[pos])
    head_b = float(theta[pos + 1])
    return groups, head_w, head_b


def _pair_loss_and_grads(model, params64, head_w, head_b, xa, xb, y):
    """Mean pair loss and gradients w.r.t. every parameter.

    Returns (loss, grad_groups, dhead_w, dhead_b, distances, relu_signature).
    """
    n = xa.shape[0]
    ea, ca = _encode(model, xa, params64)
    eb, cb = _encode(model, xb, params64)
    diff = ea - eb
    s = np.sum(diff * diff, axis=1)
    d = np.sqrt(s)
    logit = head_w * d + head_b
    loss = float(np.mean(_bce_from_logit(logit, y)))

    dlogit = (_sigmoid(logit) - y) / n
    dhead_w = float(np.sum(dlogit * d))
    dhead_b = float(np.sum(dlogit))
    dd = dlogit * head_w
    ds = dd / (2.0 * np.sqrt(np.maximum(s, _SQRT_GUARD)))
    ddiff = (2.0 * ds)[:, None] * diff
    grads_a = _encoder_backward(model, ca, ddiff)
    grads_b = _encoder_backward(model, cb, -ddiff)
    grad_groups = [
        tuple(ga + gb for ga, gb in zip(group_a, group_b))
        for group_a, group_b in zip(grads_a, grads_b)
    ]
    signature = tuple(
        cache.tobytes() for kind, cache in ca + cb if kind == "relu"
    )
    return loss, grad_groups, dhead_w, dhead_b, d, signature


def _pair_loss_only(model, params64, head_w, head_b, xa, xb, y):
    """Forward-only mean pair loss plus the rectifier activation pattern."""
    ea, ca = _encode(model, xa, params64)
    eb, cb = _encode(model, xb, params64)
    diff = ea - eb
    d = np.sqrt(np.sum(diff * diff, axis=1))
    loss = float(np.mean(_bce_from_logit(head_w * d + head_b, y)))
    signature = tuple(cache.tobytes() for kind, cache in ca + cb if kind == "relu")
    return loss, signature


@dataclass(frozen=True)
class GradCheckResult:
    """Outcome of a finite-difference sweep over the parameters."""

    max_rel_error: float
    checked: int
    kink_skipped: int = 0
    skipped: bool = False
    reason: str = ""


def grad_check(
    model: SiameseModel,
    sample: PairSample,
    eps: float = 1e-4,
    max_params: int = 200,
    seed: int = 0,
) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    Checks every parameter, or a seeded random subsample of
    ``max_params`` of them (head parameters always included). Parameters
    whose +-eps evaluations flip any rectifier activation are excluded:
    the loss is non-differentiable there and the difference quotient is
    not an estimate of the gradient. A pair at zero embedding distance
    sits on the square-root kink, so the whole check is skipped and
    reported as such.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-5, 1e-3], got {eps}")
    params64 = _params64(model)
    xa = _patch_batch(model, [sample.patch_a])
    xb = _patch_batch(model, [sample.patch_b])
    y = np.array([float(sample.label)])

    loss, grad_groups, dhw, dhb, d, _ = _pair_loss_and_grads(
        model, params64, float(model.head_w), float(model.head_b), xa, xb, y
    )
    if float(d[0]) < 1e-6:
        return GradCheckResult(
            max_rel_error=float("nan"),
            checked=0,
            skipped=True,
            reason="pair distance is 0: square-root kink, finite differences invalid",
        )

    analytic = _flatten_params(grad_groups, dhw, dhb)
    theta = _flatten_params(params64, float(model.head_w), float(model.head_b))

    n_params = theta.size
    if n_params <= max_params:
        idx = np.arange(n_params)
    else:
        rng = np.random.default_rng(seed)
        body = rng.choice(n_params - 2, size=max_params - 2, replace=False)
        idx = np.concatenate([np.sort(body), [n_params - 2, n_params - 1]])

    def eval_at(vec: np.ndarray) -> tuple[float, tuple]:
        groups, hw, hb = _unflatten_params(model, vec)
        return _pair_loss_only(model, groups, hw, hb, xa, xb, y)

    max_rel = 0.0
    kink_skipped = 0
    checked = 0
    for i in idx.tolist():
        theta[i] += eps
        f_plus, sig_plus = eval_at(theta)
        theta[i] -= 2.0 * eps
        f_minus, sig_minus = eval_at(theta)
        theta[i] += eps
        if sig_plus != sig_minus:
            kink_skipped += 1
            continue
        g_fd = (f_plus - f_minus) / (2.0 * eps)
        g_an = analytic[i]
        rel = abs(g_an - g_fd) / max(1e-8, abs(g_an) + abs(g_fd))
        max_rel = max(max_rel, rel)
        checked += 1
    return GradCheckResult(max_rel_error=max_rel, checked=checked, kink_skipped=kink_skipped)


# ---------------------------------------------------------------------------
# pair construction and training


def make_pairs(
    dataset: Sequence[tuple[np.ndarray, Hashable]], cfg: TrainConfig
) -> tuple[list[PairSample], list[PairSample]]:
    """Build similar/non-similar pairs and split them into train/test.

    Similar pairs are all same-class combinations; non-similar pairs are
    sampled without replacement from the cross-class combinations until
    round(neg_ratio * n_similar). The combined list is shuffled and cut
    at floor(split * N): first part trains, remainder tests. Fully
    deterministic for a given seed.
    """
    by_class: dict[Hashable, list[int]] = {}
    for i, (_, label) in enumerate(dataset):
        by_class.setdefault(label, []).append(i)
    if len(by_class) < 2:
        raise CountError(f"need at least 2 classes, got {len(by_class)}")
    for label, members in by_class.items():
        if len(members) < 2:
            raise CountError(f"class {label!r} has {len(members)} sample(s), need >= 2")

    classes = sorted(by_class, key=repr)
    positives: list[tuple[int, int]] = []
    for label in classes:
        members = by_class[label]
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                positives.append((members[i], members[j]))

    cross: list[tuple[int, int]] = []
    for ci in range(len(classes)):
        for cj in range(ci + 1, len(classes)):
            for i in by_class[classes[ci]]:
                for j in by_class[classes[cj]]:
                    cross.append((i, j))

    n_neg = int(round(cfg.neg_ratio * len(positives)))
    if n_neg > len(cross):
        raise CountError(
            f"requested {n_neg} non-similar pairs but only {len(cross)} cross-class pairs exist"
        )
    rng = np.random.default_rng(cfg.seed)
    chosen = np.sort(rng.choice(len(cross), size=n_neg, replace=False))
    negatives = [cross[k] for k in chosen.tolist()]

    labeled = [(i, j, 1) for i, j in positives] + [(i, j, 0) for i, j in negatives]
    order = rng.permutation(len(labeled))
    shuffled = [labeled[k] for k in order.tolist()]
    n_train = int(math.floor(cfg.split * len(shuffled)))

    def to_samples(rows):
        return [PairSample(dataset[i][0], dataset[j][0], y) for i, j, y in rows]

    return to_samples(shuffled[:n_train]), to_samples(shuffled[n_train:])


def train(
    model: SiameseModel, pairs: Sequence[PairSample], cfg: TrainConfig
) -> tuple[SiameseModel, list[float]]:
    """Minibatch SGD on the mean pair loss; lr = lr0 * decay**epoch.

    Returns a new model (the input is untouched) and the per-epoch mean
    training loss. Deterministic for a given seed. Raises
    DivergenceError naming the epoch if the loss turns non-finite.
    """
    if not pairs:
        raise CountError("no training pairs")
    if cfg.epochs == 0:
        return model, []

    xa = _patch_batch(model, [p.patch_a for p in pairs])
    xb = _patch_batch(model, [p.patch_b for p in pairs])
    y = np.array([float(p.label) for p in pairs])
    n = len(pairs)

    params64 = _params64(model)
    head_w = float(model.head_w)
    head_b = float(model.head_b)
    rng = np.random.default_rng(cfg.seed)
    trace: list[float] = []

    for epoch in range(cfg.epochs):
        lr = cfg.lr0 * cfg.decay**epoch
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch):
            sel = order[start : start + cfg.batch]
            loss, grad_groups, dhw, dhb, _, _ = _pair_loss_and_grads(
                model, params64, head_w, head_b, xa[sel], xb[sel], y[sel]
            )
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            epoch_loss += loss * len(sel)
            params64 = [
                tuple(p - lr * g for p, g in zip(group, grads))
                for group, grads in zip(params64, grad_groups)
            ]
            head_w -= lr * dhw
            head_b -= lr * dhb
        if not (
            math.isfinite(head_w)
            and math.isfinite(head_b)
            and all(np.isfinite(p).all() for group in params64 for p in group)
        ):
            raise DivergenceError(f"non-finite parameters at epoch {epoch}")
        trace.append(epoch_loss / n)

    new_params = [tuple(p.astype(np.float32) for p in group) for group in params64]
    trained = SiameseModel(
        input_shape=model.input_shape,
        layers=model.layers,
        params=new_params,
        head_w=np.float32(head_w),
        head_b=np.float32(head_b),
        embed_dim=model.embed_dim,
    )
    return trained, trace


# ---------------------------------------------------------------------------
# model serialization

_MAGIC = b"SIAM"
_VERSION = 1
_TAG_INPUT = 0
_TAG_CONV = 1
_TAG_RELU = 2
_TAG_POOL = 3
_TAG_DENSE = 4


def save_model(model: SiameseModel, path: str | os.PathLike) -> None:
    """Write the little-endian binary model file.

    Layout: magic "SIAM", version u16, layer count u16 (the first layer
    is the input descriptor), per layer a type tag u8 plus its shape
    u32s, embed_dim u32, all weights as f32 in declaration order, then
    head_w and head_b as f32.
    """
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<HH", _VERSION, len(model.layers) + 1)
    out += struct.pack("<BIII", _TAG_INPUT, *model.input_shape)
    for layer in model.layers:
        if isinstance(layer, Conv):
            out += struct.pack("<BIII", _TAG_CONV, layer.out_channels, layer.kernel, layer.stride)
        elif isinstance(layer, Relu):
            out += struct.pack("<B", _TAG_RELU)
        elif isinstance(layer, MaxPool):
            out += struct.pack("<BII", _TAG_POOL, layer.window, layer.stride)
        else:
            out += struct.pack("<BI", _TAG_DENSE, layer.out_dim)
    out += struct.pack("<I", model.embed_dim)
    for group in model.params:
        for p in group:
            out += np.ascontiguousarray(p, dtype="<f4").tobytes()
    out += struct.pack("<ff", float(model.head_w), float(model.head_b))
    Path(path).write_bytes(bytes(out))


def load_model(path: str | os.PathLike) -> SiameseModel:
    """Read a model file; validates magic, version, shape chain and size."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated model file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != _MAGIC:
        raise FormatError("bad model magic (expected 'SIAM')")
    version, n_layers = struct.unpack("<HH", take(4))
    if version != _VERSION:
        raise FormatError(f"unsupported model version {version}")
    if n_layers < 1:
        raise FormatError("model file declares no layers")

    (tag,) = struct.unpack("<B", take(1))
    if tag != _TAG_INPUT:
        raise FormatError("first layer descriptor must be the input shape")
    input_shape = struct.unpack("<III", take(12))
    layers: list[LayerSpec] = []
    for _ in range(n_layers - 1):
        (tag,) = struct.unpack("<B", take(1))
        if tag == _TAG_CONV:
            oc, k, s = struct.unpack("<III", take(12))
            layers.append(Conv(oc, k, s))
        elif tag == _TAG_RELU:
            layers.append(Relu())
        elif tag == _TAG_POOL:
            wdw, s = struct.unpack("<II", take(8))
            layers.append(MaxPool(wdw, s))
        elif tag == _TAG_DENSE:
            (od,) = struct.unpack("<I", take(4))
            layers.append(Dense(od))
        else:
            raise FormatError(f"unknown layer tag {tag}")
    (embed_dim,) = struct.unpack("<I", take(4))

    try:
        shapes = chain_shapes(input_shape, layers)
    except ParameterError as e:
        raise FormatError(f"layer shapes do not chain: {e}") from e
    declared = _flat_dim(shapes[-1]) if shapes else _flat_dim(input_shape)
    if declared != embed_dim:
        raise FormatError(f"declared embed_dim {embed_dim} but layers produce {declared}")

    params: list[tuple[np.ndarray, ...]] = []
    cur: tuple = input_shape
    for layer, out_shape in zip(layers, shapes):
        if isinstance(layer, Conv):
            w_shape = (layer.out_channels, cur[0], layer.kernel, layer.kernel)
            w = np.frombuffer(take(4 * _flat_dim(w_shape)), dtype="<f4").reshape(w_shape)
            b = np.frombuffer(take(4 * layer.out_channels), dtype="<f4")
            params.append((w.copy(), b.copy()))
        elif isinstance(layer, Dense):
            w_shape = (layer.out_dim, _flat_dim(cur))
            w = np.frombuffer(take(4 * _flat_dim(w_shape)), dtype="<f4").reshape(w_shape)
            b = np.frombuffer(take(4 * layer.out_dim), dtype="<f4")
            params.append((w.copy(), b.copy()))
        else:
            params.append(())
        cur = out_shape
    head_w, head_b = struct.unpack("<ff", take(8))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after model payload")
    return SiameseModel(
        input_shape=tuple(int(v) for v in input_shape),
        layers=tuple(layers),
        params=params,
        head_w=np.float32(head_w),
        head_b=np.float32(head_b),
        embed_dim=int(embed_dim),
    )


def models_equal(a: SiameseModel, b: SiameseModel) -> bool:
    """Bitwise equality of two models."""
    if (
        a.input_shape != b.input_shape
        or a.layers != b.layers
        or a.embed_dim != b.embed_dim
        or a.head_w.tobytes() != b.head_w.tobytes()
        or a.head_b.tobytes() != b.head_b.tobytes()
    ):
        return False
    for ga, gb in zip(a.params, b.params):
        if len(ga) != len(gb):
            return False
        for pa, pb in zip(ga, gb):
            if pa.shape != pb.shape or pa.tobytes() != pb.tobytes():
                return False
    return True


# ---------------------------------------------------------------------------
# pair list files


def save_pair_list(path: str | os.PathLike, rows: Sequence[tuple[str, str, int]]) -> None:
    """Write ``path_a<TAB>path_b<TAB>label`` lines."""
    Path(path).write_text(
        "".join(f"{a}\t{b}\t{label}\n" for a, b, label in rows), encoding="utf-8"
    )


def load_pair_list(path: str | os.PathLike) -> list[tuple[str, str, int]]:
    """Parse a pair list file of ``path_a<TAB>path_b<TAB>label`` lines."""
    rows = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise FormatError(f"line {ln}: expected 'path_a<TAB>path_b<TAB>0|1'")
        rows.append((parts[0], parts[1], int(parts[2])))
    return rows
