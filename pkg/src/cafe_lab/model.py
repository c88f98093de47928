"""Split neural network with hand-written forward and backward passes.

Architecture: per-worker feature extractors -> concatenation (the internal
representation ``h``, width ``d1``) -> fully connected layer ``u = W1^T h + b1``
(width ``d2``) -> head layers -> class logits -> softmax cross entropy.

Everything is float64 and functional: parameters are immutable inputs, every
pass returns fresh arrays.  Besides the ordinary backward pass the module
provides the pullback of a *gradient-matching* functional (the derivative of
``sum_params <gbar, dL/dparam>`` with respect to the network inputs and
labels), which data-reconstruction attacks need.  That second-order pass is
hand-derived per layer kind and is verified against finite differences in the
test suite.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ShapeError, ConfigError
from .partition import Partition

LAYER_KINDS = ("identity", "dense", "conv2d", "relu", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_dim: int = 0          # dense
    channels: int = 0         # conv2d
    kernel: int = 0           # conv2d (square)
    stride: int = 1           # conv2d


@dataclass
class Layer:
    kind: str
    weight: np.ndarray = None
    bias: np.ndarray = None
    stride: int = 1
    in_shape: tuple = ()
    out_shape: tuple = ()

    @property
    def has_params(self):
        return self.weight is not None


@dataclass
class ModelParams:
    partition: Partition
    extractors: list            # per worker: list[Layer]
    fc1_weight: np.ndarray      # (d1, d2)
    fc1_bias: np.ndarray        # (d2,)
    head: list                  # list[Layer], ends with a dense layer of width C
    d1: int
    d2: int
    n_classes: int

    def param_items(self):
        """(parameter id, array) pairs in a fixed, deterministic order."""
        items = []
        for m, layers in enumerate(self.extractors):
            for i, lay in enumerate(layers):
                if lay.has_params:
                    items.append((f"extractor{m}.{i}.weight", lay.weight))
                    items.append((f"extractor{m}.{i}.bias", lay.bias))
        items.append(("fc1.weight", self.fc1_weight))
        items.append(("fc1.bias", self.fc1_bias))
        for i, lay in enumerate(self.head):
            if lay.has_params:
                items.append((f"head.{i}.weight", lay.weight))
                items.append((f"head.{i}.bias", lay.bias))
        return items

    def copy(self):
        ext = [[replace(l, weight=None if l.weight is None else l.weight.copy(),
                        bias=None if l.bias is None else l.bias.copy())
                for l in layers] for layers in self.extractors]
        head = [replace(l, weight=None if l.weight is None else l.weight.copy(),
                        bias=None if l.bias is None else l.bias.copy())
                for l in self.head]
        return ModelParams(self.partition, ext, self.fc1_weight.copy(),
                           self.fc1_bias.copy(), head, self.d1, self.d2,
                           self.n_classes)

    def apply_gradients(self, grads, lr):
        """One SGD step; returns a new ModelParams, inputs untouched."""
        new = self.copy()
        for key, arr in new.param_items():
            arr -= lr * grads[key]
        return new


@dataclass
class GradientReport:
    """Named per-parameter gradients from one aggregation round.

    ``du`` and ``dx`` are per-sample oracle fields for tests and ground-truth
    construction; they are not part of what a curious server observes and are
    stripped by defenses.
    """

    params: dict
    loss: float
    du: np.ndarray = None      # (K, d2) rows: (1/K) dL_n/du_n
    dx: np.ndarray = None      # (K, *sample shape)
    round_index: int = -1

    def grad_norm(self):
        return float(np.sqrt(sum(float((g ** 2).sum()) for g in self.params.values())))


@dataclass
class LabeledBatch:
    inputs: np.ndarray          # (K, *sample shape)
    labels: np.ndarray          # (K,) int class ids, or (K, C) soft labels

    def __post_init__(self):
        if self.inputs.shape[0] < 1:
            raise ShapeError("batch must contain at least one sample")


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(z):
    shift = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shift)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    shift = z - z.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def softmax_vjp(p, ybar):
    """Pullback of softmax: rows ``p (.) ybar - p <p, ybar>``."""
    inner = (p * ybar).sum(axis=-1, keepdims=True)
    return p * (ybar - inner)


def one_hot(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return np.asarray(labels, dtype=float)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ShapeError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# model construction

def init_model(partition, extractor_specs, d2, n_classes, seed,
               init_scale=1.0, head_specs=None):
    """Build a model from per-worker layer specs.

    Every worker gets the same extractor architecture with independently
    initialized weights.  The default head is sigmoid -> dense(C).
    """
    rng = np.random.default_rng(seed)
    extractors = []
    widths = []
    for blk in partition.blocks:
        layers, out_shape = _build_sequence(extractor_specs, blk.shape, rng, init_scale)
        extractors.append(layers)
        widths.append(int(np.prod(out_shape)))
    d1 = int(sum(widths))
    fc1_weight = rng.normal(0.0, init_scale / np.sqrt(d1), size=(d1, d2))
    fc1_bias = np.zeros(d2)
    if head_specs is None:
        head_specs = [LayerSpec("sigmoid"), LayerSpec("dense", out_dim=n_classes)]
    head, head_out = _build_sequence(head_specs, (d2,), rng, init_scale)
    if head_out != (n_classes,):
        raise ConfigError(f"head must end with width {n_classes}, got {head_out}")
    return ModelParams(partition, extractors, fc1_weight, fc1_bias, head,
                       d1, d2, n_classes)


def _build_sequence(specs, in_shape, rng, init_scale):
    layers = []
    shape = tuple(in_shape)
    for spec in specs:
        if spec.kind == "identity":
            layers.append(Layer("identity", in_shape=shape, out_shape=shape))
        elif spec.kind in ("relu", "sigmoid"):
            layers.append(Layer(spec.kind, in_shape=shape, out_shape=shape))
        elif spec.kind == "dense":
            din = int(np.prod(shape))
            w = rng.normal(0.0, init_scale / np.sqrt(din), size=(din, spec.out_dim))
            layers.append(Layer("dense", weight=w, bias=np.zeros(spec.out_dim),
                                in_shape=shape, out_shape=(spec.out_dim,)))
            shape = (spec.out_dim,)
        elif spec.kind == "conv2d":
            if len(shape) != 2:
                raise ConfigError("conv2d needs a 2-D input slice")
            k, s = spec.kernel, spec.stride
            if shape[0] < k or shape[1] < k:
                raise ConfigError(f"kernel {k} larger than input {shape}")
            ho = (shape[0] - k) // s + 1
            wo = (shape[1] - k) // s + 1
            w = rng.normal(0.0, init_scale / k, size=(spec.channels, k, k))
            layers.append(Layer("conv2d", weight=w, bias=np.zeros(spec.channels),
                                stride=s, in_shape=shape,
                                out_shape=(spec.channels, ho, wo)))
            shape = (spec.channels, ho, wo)
        else:
            raise ConfigError(f"unknown layer kind {spec.kind!r}")
    return layers, shape


# ---------------------------------------------------------------------------
# forward

def _layer_forward(lay, x):
    b = x.shape[0]
    if lay.kind == "identity":
        return x
    if lay.kind == "relu":
        return np.maximum(x, 0.0)
    if lay.kind == "sigmoid":
        return sigmoid(x)
    if lay.kind == "dense":
        return x.reshape(b, -1) @ lay.weight + lay.bias
    if lay.kind == "conv2d":
        return kernels.conv2d_fwd_batch(x, lay.weight, lay.stride) \
            + lay.bias[None, :, None, None]
    raise ConfigError(f"unknown layer kind {lay.kind!r}")


def _seq_forward(layers, x):
    caches = []
    for lay in layers:
        out = _layer_forward(lay, x)
        caches.append((x, out))
        x = out
    return x, caches


@dataclass
class ForwardCache:
    slices: list                # per-worker input batches
    ext_caches: list            # per worker: per layer (x_in, x_out)
    h: np.ndarray               # (B, d1)
    u: np.ndarray               # (B, d2)
    head_caches: list
    z: np.ndarray               # (B, C) logits
    widths: list = field(default_factory=list)


def forward_all(params, x_batch):
    slices = params.partition.split(np.asarray(x_batch, dtype=float))
    ext_caches = []
    h_parts = []
    widths = []
    b = x_batch.shape[0]
    for layers, xs in zip(params.extractors, slices):
        out, caches = _seq_forward(layers, xs)
        ext_caches.append(caches)
        h_parts.append(out.reshape(b, -1))
        widths.append(h_parts[-1].shape[1])
    h = np.concatenate(h_parts, axis=1)
    if h.shape[1] != params.d1:
        raise ShapeError(f"representation width {h.shape[1]} != d1 {params.d1}")
    u = h @ params.fc1_weight + params.fc1_bias
    z, head_caches = _seq_forward(params.head, u)
    return ForwardCache(slices, ext_caches, h, u, head_caches, z, widths)


def forward_representation(params, x):
    """Concatenated extractor outputs ``h`` for a batch of full samples."""
    single = x.ndim == len(params.partition.full_shape)
    xb = x[None] if single else x
    fc = forward_all(params, xb)
    return fc.h[0] if single else fc.h


def forward_first_fc(params, h):
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != params.d1:
        raise ShapeError(f"expected width {params.d1}, got {h.shape[-1]}")
    return h @ params.fc1_weight + params.fc1_bias


def loss_batch(params, batch):
    """Mean softmax cross entropy over the batch samples."""
    fc = forward_all(params, batch.inputs)
    y = one_hot(batch.labels, params.n_classes)
    lse = np.log(np.exp(fc.z - fc.z.max(axis=1, keepdims=True)).sum(axis=1)) \
        + fc.z.max(axis=1)
    return float(np.mean(lse - (y * fc.z).sum(axis=1)))


# ---------------------------------------------------------------------------
# backward

def _layer_backward(lay, cache, dy):
    """Returns (dx, grad_weight, grad_bias)."""
    x_in, x_out = cache
    b = dy.shape[0]
    if lay.kind == "identity":
        return dy, None, None
    if lay.kind == "relu":
        return dy * (x_in > 0), None, None
    if lay.kind == "sigmoid":
        return dy * x_out * (1.0 - x_out), None, None
    if lay.kind == "dense":
        xf = x_in.reshape(b, -1)
        gw = xf.T @ dy
        gb = dy.sum(axis=0)
        return (dy @ lay.weight.T).reshape(x_in.shape), gw, gb
    if lay.kind == "conv2d":
        h, w = lay.in_shape
        gw = kernels.conv2d_wgrad_batch(x_in, dy, lay.stride,
                                        lay.weight.shape[1], lay.weight.shape[2])
        gb = dy.sum(axis=(0, 2, 3))
        dx = kernels.conv2d_igrad_batch(dy, lay.weight, lay.stride, h, w)
        return dx, gw, gb
    raise ConfigError(f"unknown layer kind {lay.kind!r}")


def _seq_backward(layers, caches, dy):
    """Returns (dx, per-layer grads, per-layer deltas at layer output)."""
    grads = [None] * len(layers)
    deltas = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        deltas[i] = dy
        dy, gw, gb = _layer_backward(layers[i], caches[i], dy)
        grads[i] = (gw, gb)
    return dy, grads, deltas


@dataclass
class BackwardCache:
    fc: ForwardCache
    p: np.ndarray               # softmax probabilities
    dz: np.ndarray
    du: np.ndarray
    head_deltas: list
    ext_deltas: list            # per worker


def backward_full(params, batch, k_scale=None):
    """Gradients of the mean batch loss for every parameter tensor.

    ``k_scale`` overrides the 1/K normalization (defaults to the batch size).
    Returns a :class:`GradientReport` whose ``du`` rows are the per-sample
    gradients of the batch loss w.r.t. the first FC outputs.
    """
    report, _ = _backward_with_cache(params, batch, k_scale)
    return report


def _backward_with_cache(params, batch, k_scale=None):
    fc = forward_all(params, batch.inputs)
    k = batch.inputs.shape[0] if k_scale is None else k_scale
    y = one_hot(batch.labels, params.n_classes)
    p = softmax(fc.z)
    dz = (p - y) / k
    du, head_grads, head_deltas = _seq_backward(params.head, fc.head_caches, dz)
    g_fc1_w = fc.h.T @ du
    g_fc1_b = du.sum(axis=0)
    dh = du @ params.fc1_weight.T
    b = batch.inputs.shape[0]
    grads = {}
    ext_deltas = []
    dx_slices = []
    offset = 0
    for m, (layers, caches) in enumerate(zip(params.extractors, fc.ext_caches)):
        width = fc.widths[m]
        top_shape = caches[-1][1].shape if caches else fc.slices[m].shape
        dh_m = dh[:, offset:offset + width].reshape(top_shape)
        offset += width
        dxm, egrads, edeltas = _seq_backward(layers, caches, dh_m)
        ext_deltas.append(edeltas)
        dx_slices.append(dxm)
        for i, (gw, gb) in enumerate(egrads):
            if gw is not None:
                grads[f"extractor{m}.{i}.weight"] = gw
                grads[f"extractor{m}.{i}.bias"] = gb
    grads["fc1.weight"] = g_fc1_w
    grads["fc1.bias"] = g_fc1_b
    for i, (gw, gb) in enumerate(head_grads):
        if gw is not None:
            grads[f"head.{i}.weight"] = gw
            grads[f"head.{i}.bias"] = gb
    dx = params.partition.reassemble(dx_slices)
    lse = np.log(np.exp(fc.z - fc.z.max(axis=1, keepdims=True)).sum(axis=1)) \
        + fc.z.max(axis=1)
    loss = float(np.mean(lse - (y * fc.z).sum(axis=1)))
    # reorder to the canonical parameter order
    ordered = {key: grads[key] for key, _ in params.param_items()}
    report = GradientReport(params=ordered, loss=loss, du=du, dx=dx)
    cache = BackwardCache(fc, p, dz, du, head_deltas, ext_deltas)
    return report, cache


# ---------------------------------------------------------------------------
# pullback of a gradient-matching functional (second-order pass)
#
# Given cotangents gbar[key] for every parameter gradient, compute the
# derivative of  psi = sum_key <gbar[key], dL/dparam[key]>  with respect to
# the batch inputs and the soft labels.  Phase A walks the network upward
# accumulating lambda = d psi / d delta (delta being the backward-pass
# signals); phase B walks downward accumulating activation adjoints.

def _seq_lambda_up(layers, caches, deltas, lam, gbar_list):
    lam_ins = [None] * len(layers)
    for i, lay in enumerate(layers):
        lam_ins[i] = lam
        x_in, x_out = caches[i]
        b = x_in.shape[0]
        gbar = gbar_list[i]
        if lay.kind == "identity":
            pass
        elif lay.kind == "relu":
            lam = lam * (x_in > 0)
        elif lay.kind == "sigmoid":
            lam = lam * x_out * (1.0 - x_out)
        elif lay.kind == "dense":
            gw, gb = gbar
            lam = lam.reshape(b, -1) @ lay.weight + x_in.reshape(b, -1) @ gw + gb
        elif lay.kind == "conv2d":
            gw, gb = gbar
            lam = kernels.conv2d_fwd_batch(lam, lay.weight, lay.stride) \
                + kernels.conv2d_fwd_batch(x_in, gw, lay.stride) \
                + gb[None, :, None, None]
        else:
            raise ConfigError(f"unknown layer kind {lay.kind!r}")
    return lam, lam_ins


def _seq_adjoint_down(layers, caches, deltas, lam_ins, abar, gbar_list):
    for i in range(len(layers) - 1, -1, -1):
        lay = layers[i]
        x_in, x_out = caches[i]
        b = x_in.shape[0]
        gbar = gbar_list[i]
        if lay.kind == "identity":
            pass
        elif lay.kind == "relu":
            abar = abar * (x_in > 0)
        elif lay.kind == "sigmoid":
            # the backward multiplier sigma' depends on x_out
            abar = abar + lam_ins[i] * deltas[i] * (1.0 - 2.0 * x_out)
            abar = abar * x_out * (1.0 - x_out)
        elif lay.kind == "dense":
            gw, _ = gbar
            abar = (abar @ lay.weight.T + deltas[i] @ gw.T).reshape(x_in.shape)
        elif lay.kind == "conv2d":
            h, w = lay.in_shape
            abar = kernels.conv2d_igrad_batch(abar, lay.weight, lay.stride, h, w) \
                + kernels.conv2d_igrad_batch(deltas[i], gbar[0], lay.stride, h, w)
        else:
            raise ConfigError(f"unknown layer kind {lay.kind!r}")
    return abar


def _gbar_list(layers, prefix, gbar):
    out = []
    for i, lay in enumerate(layers):
        if lay.has_params:
            out.append((gbar[f"{prefix}.{i}.weight"], gbar[f"{prefix}.{i}.bias"]))
        else:
            out.append(None)
    return out


def gradmatch_input_grads(params, batch, gbar, k_scale=None):
    """d/d(inputs), d/d(soft labels) of sum_params <gbar, batch-loss gradient>.

    ``batch.labels`` must be soft label rows.  ``gbar`` is either a dict of
    cotangents keyed like the parameter gradients, or a callable mapping the
    batch's :class:`GradientReport` to such a dict (so matching objectives can
    derive the cotangents from the very gradients being differentiated).
    Returns ``(dx, dy, report)``.
    """
    report, bc = _backward_with_cache(params, batch, k_scale)
    if callable(gbar):
        gbar = gbar(report)
    k = batch.inputs.shape[0] if k_scale is None else k_scale
    b = batch.inputs.shape[0]
    fc = bc.fc

    # phase A: lambda flows from the inputs up to the logits
    lam_parts = []
    ext_lam_ins = []
    for m, layers in enumerate(params.extractors):
        gl = _gbar_list(layers, f"extractor{m}", gbar)
        lam0 = np.zeros_like(fc.slices[m])
        lam_top, lam_ins = _seq_lambda_up(layers, fc.ext_caches[m],
                                          bc.ext_deltas[m], lam0, gl)
        ext_lam_ins.append(lam_ins)
        lam_parts.append(lam_top.reshape(b, -1))
    lam_h = np.concatenate(lam_parts, axis=1)
    lam_u = lam_h @ params.fc1_weight + fc.h @ gbar["fc1.weight"] + gbar["fc1.bias"]
    head_gl = _gbar_list(params.head, "head", gbar)
    lam_z, head_lam_ins = _seq_lambda_up(params.head, fc.head_caches,
                                         bc.head_deltas, lam_u, head_gl)

    # phase B: activation adjoints flow from the logits back to the inputs
    zbar = softmax_vjp(bc.p, lam_z) / k
    ybar = -lam_z / k
    ubar = _seq_adjoint_down(params.head, fc.head_caches, bc.head_deltas,
                             head_lam_ins, zbar, head_gl)
    hbar = ubar @ params.fc1_weight.T + bc.du @ gbar["fc1.weight"].T
    dx_slices = []
    offset = 0
    for m, layers in enumerate(params.extractors):
        width = fc.widths[m]
        caches = fc.ext_caches[m]
        top_shape = caches[-1][1].shape if caches else fc.slices[m].shape
        abar = hbar[:, offset:offset + width].reshape(top_shape)
        offset += width
        gl = _gbar_list(layers, f"extractor{m}", gbar)
        dx_slices.append(_seq_adjoint_down(layers, caches, bc.ext_deltas[m],
                                           ext_lam_ins[m], abar, gl))
    dx = params.partition.reassemble(dx_slices)
    return dx, ybar, report


def representation_input_grads(params, x_batch, hbar):
    """Pullback of the representation map: d<hbar, h(x)>/dx."""
    fc = forward_all(params, x_batch)
    dx_slices = []
    offset = 0
    for m, layers in enumerate(params.extractors):
        width = fc.widths[m]
        caches = fc.ext_caches[m]
        top_shape = caches[-1][1].shape if caches else fc.slices[m].shape
        dh_m = hbar[:, offset:offset + width].reshape(top_shape)
        offset += width
        dxm, _, _ = _seq_backward(layers, caches, dh_m)
        dx_slices.append(dxm)
    return params.partition.reassemble(dx_slices)
