"""Layer graphs: definition, forward/backward, FLOPs accounting, descriptors.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec`. Each layer
consumes the output of the layer before it; a ``residual-add`` layer also adds
the output of its ``source`` layer (``"input"`` names the graph input).
Shortcuts that change shape use the parameter-free CIFAR-ResNet form: spatial
subsampling plus zero-filled channels.
"""

import copy
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError, StateError

CONV = "conv"
DENSE = "dense"
RELU = "relu"
AVGPOOL = "avgpool"
IDENTITY = "identity"
ADD = "residual-add"
FLATTEN = "flatten"
KINDS = (CONV, DENSE, RELU, AVGPOOL, IDENTITY, ADD, FLATTEN)

INPUT = "input"

# Channel-propagation conventions for FLOPs accounting.
RESIDUAL_RESTORES = "residual-restores"
OUTPUT_ONLY = "output-only"
SCOPES = (RESIDUAL_RESTORES, OUTPUT_ONLY)


@dataclass
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    pool: int | None = None
    # residual-add only: the layer whose output is added to the branch, and
    # (after compaction) which trunk channels the branch channels land on.
    source: str | None = None
    branch_channels: tuple | None = None
    prunable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown layer kind {self.kind!r}")
        if self.branch_channels is not None:
            self.branch_channels = tuple(int(i) for i in self.branch_channels)

    @property
    def has_params(self):
        return self.kind in (CONV, DENSE)

    def to_dict(self):
        out = {"kind": self.kind, "name": self.name}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in out or v == f.default:
                continue
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def conv(name, m, n, s=3, stride=1, padding=None, prunable=True):
    if padding is None:
        padding = s // 2
    return LayerSpec(CONV, name, in_channels=m, out_channels=n, kernel_size=s,
                     stride=stride, padding=padding, prunable=prunable)


def dense(name, fin, fout):
    return LayerSpec(DENSE, name, in_features=fin, out_features=fout)


@dataclass
class ActivationCache:
    inputs: dict
    outputs: dict
    version: int


@dataclass
class FlopsReport:
    per_layer: dict = field(default_factory=dict)
    total: int = 0
    params_total: int = 0


class ModelGraph:
    """Ordered layers plus a parameter registry ``{layer: {"weight", "bias"}}``.

    Conv layers carry no bias. Any in-place mutation of parameters must be
    followed by :meth:`touch` so that stale activation caches are detected.
    """

    def __init__(self, layers, input_shape, params=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.version = 0
        self._index = {}
        for i, layer in enumerate(self.layers):
            if layer.name in self._index or layer.name == INPUT:
                raise InputError(f"duplicate or reserved layer name {layer.name!r}")
            self._index[layer.name] = i
        self.shapes = self._infer_shapes()
        if params is None:
            params = {l.name: self._zero_params(l) for l in self.layers if l.has_params}
        self.params = params
        self._check_params()

    # -- structure -------------------------------------------------------

    def layer(self, name):
        try:
            return self.layers[self._index[name]]
        except KeyError:
            raise InputError(f"no layer named {name!r}") from None

    def __contains__(self, name):
        return name in self._index

    @property
    def residual_links(self):
        return [(l.source, l.name) for l in self.layers if l.kind == ADD]

    @property
    def conv_layers(self):
        return [l for l in self.layers if l.kind == CONV]

    @property
    def classifier(self):
        dense_layers = [l for l in self.layers if l.kind == DENSE]
        return dense_layers[-1].name if dense_layers else None

    def input_of(self, name):
        """Shape of the tensor fed into layer ``name``."""
        i = self._index[name]
        return self.input_shape if i == 0 else self.shapes[self.layers[i - 1].name]

    def _infer_shapes(self):
        shapes = {}
        cur = self.input_shape
        for layer in self.layers:
            cur = self._out_shape(layer, cur, shapes)
            shapes[layer.name] = cur
        return shapes

    def _out_shape(self, layer, shape, shapes):
        k = layer.kind
        if k == CONV:
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise DimensionError(
                    f"layer {layer.name!r}: expects {layer.in_channels} input channels, got shape {shape}")
            ho = T.conv_output_size(shape[1], layer.kernel_size, layer.stride, layer.padding)
            wo = T.conv_output_size(shape[2], layer.kernel_size, layer.stride, layer.padding)
            return (layer.out_channels, ho, wo)
        if k == DENSE:
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise DimensionError(
                    f"layer {layer.name!r}: expects {layer.in_features} features, got shape {shape}")
            return (layer.out_features,)
        if k in (RELU, IDENTITY):
            return shape
        if k == FLATTEN:
            return (math.prod(shape),)
        if k == AVGPOOL:
            if len(shape) != 3:
                raise DimensionError(f"layer {layer.name!r}: avgpool needs (c, h, w), got {shape}")
            if layer.pool is None:
                return (shape[0], 1, 1)
            if shape[1] % layer.pool or shape[2] % layer.pool:
                raise DimensionError(f"layer {layer.name!r}: pool {layer.pool} does not divide {shape}")
            return (shape[0], shape[1] // layer.pool, shape[2] // layer.pool)
        # residual add
        if layer.source == INPUT:
            src = self.input_shape
        elif layer.source in shapes:
            src = shapes[layer.source]
        else:
            raise InputError(f"layer {layer.name!r}: residual source {layer.source!r} must precede it")
        width = layer.out_channels or shape[0]
        idx = layer.branch_channels if layer.branch_channels is not None else range(shape[0])
        if len(shape) != 3 or len(src) != 3 or len(idx) != shape[0] or (len(idx) and max(idx) >= width):
            raise DimensionError(f"layer {layer.name!r}: branch {shape} does not fit trunk width {width}")
        if src[0] > width or src[1] % shape[1] or src[2] % shape[2] or src[1] // shape[1] != src[2] // shape[2]:
            raise DimensionError(f"layer {layer.name!r}: shortcut {src} incompatible with branch {shape}")
        return (width, shape[1], shape[2])

    def _param_shapes(self, layer):
        if layer.kind == CONV:
            s = layer.kernel_size
            return {"weight": (layer.out_channels, layer.in_channels, s, s)}
        return {"weight": (layer.out_features, layer.in_features), "bias": (layer.out_features,)}

    def _zero_params(self, layer):
        return {k: np.zeros(v) for k, v in self._param_shapes(layer).items()}

    def _check_params(self):
        for layer in self.layers:
            if not layer.has_params:
                continue
            p = self.params.get(layer.name)
            if p is None:
                raise StateError(f"missing parameters for layer {layer.name!r}")
            for key, shape in self._param_shapes(layer).items():
                if key not in p or tuple(p[key].shape) != shape:
                    got = None if key not in p else p[key].shape
                    raise DimensionError(f"{layer.name}.{key}: expected shape {shape}, got {got}")
                p[key] = np.asarray(p[key], dtype=T.DTYPE)

    # -- parameters ------------------------------------------------------

    def touch(self):
        self.version += 1

    def copy(self):
        return ModelGraph(copy.deepcopy(self.layers), self.input_shape,
                          {k: {n: a.copy() for n, a in v.items()} for k, v in self.params.items()})

    def init_params(self, seed=0):
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if layer.kind == CONV:
                fan_in = layer.in_channels * layer.kernel_size ** 2
                shape = self._param_shapes(layer)["weight"]
                self.params[layer.name]["weight"] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
            elif layer.kind == DENSE:
                self.params[layer.name]["weight"] = (
                    rng.standard_normal((layer.out_features, layer.in_features)) / math.sqrt(layer.in_features))
                self.params[layer.name]["bias"] = np.zeros(layer.out_features)
        self.touch()
        return self

    def named_arrays(self):
        """``(layer, key, array)`` in declaration order."""
        for layer in self.layers:
            if layer.has_params:
                for key in ("weight", "bias"):
                    if key in self.params[layer.name]:
                        yield layer.name, key, self.params[layer.name][key]

    def num_params(self):
        return sum(a.size for _, _, a in self.named_arrays())


# -- forward / backward ---------------------------------------------------


def _shortcut(src, out_shape):
    """Subsample and zero-pad ``src`` (N, c, H, W) to ``out_shape`` (c', h, w)."""
    c, h, w = out_shape
    step = src.shape[2] // h
    if step > 1:
        src = src[:, :, ::step, ::step]
    if src.shape[1] == c:
        return src
    out = np.zeros((src.shape[0], c, h, w), dtype=T.DTYPE)
    off = (c - src.shape[1]) // 2
    out[:, off : off + src.shape[1]] = src
    return out


def _shortcut_backward(grad, src_shape):
    c = src_shape[1]
    off = (grad.shape[1] - c) // 2
    g = grad[:, off : off + c]
    step = src_shape[2] // grad.shape[2]
    if step == 1:
        return g
    out = np.zeros(src_shape, dtype=T.DTYPE)
    out[:, :, ::step, ::step] = g
    return out


def forward(model, x):
    """Run the graph on a sample ``(c, h, w)`` or a batch; returns ``(logits, cache)``."""
    x = T.as_tensor(x)
    single = x.shape == model.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise DimensionError(
            f"layer {model.layers[0].name!r}: input shape {x.shape[1:]} does not match model input {model.input_shape}")
    inputs, outputs = {}, {INPUT: x}
    cur = x
    for layer in model.layers:
        inputs[layer.name] = cur
        p = model.params.get(layer.name)
        k = layer.kind
        if k == CONV:
            cur = T.conv2d_forward(cur, p["weight"], layer.stride, layer.padding)
        elif k == DENSE:
            cur = T.dense_forward(cur, p["weight"], p["bias"])
        elif k == RELU:
            cur = T.relu_forward(cur)
        elif k == AVGPOOL:
            cur = T.avgpool_forward(cur, layer.pool)
        elif k == FLATTEN:
            cur = cur.reshape(cur.shape[0], -1)
        elif k == ADD:
            out = _shortcut(outputs[layer.source], model.shapes[layer.name]).copy()
            if layer.branch_channels is None:
                out += cur
            else:
                out[:, list(layer.branch_channels)] += cur
            cur = out
        outputs[layer.name] = cur
    logits = cur[0] if single else cur
    return logits, ActivationCache(inputs, outputs, model.version)


def backward(model, cache, grad_logits):
    """Gradients ``{layer: {"weight": ..., "bias": ...}}`` for every parametrized layer."""
    if cache.version != model.version:
        raise StateError("activation cache is stale: parameters changed after forward")
    last = model.layers[-1].name
    g = T.as_tensor(grad_logits)
    if g.ndim == cache.outputs[last].ndim - 1:
        g = g[None]
    if g.shape != cache.outputs[last].shape:
        raise DimensionError(f"grad_logits shape {g.shape} != logits shape {cache.outputs[last].shape}")
    pending = {last: g}
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        g = pending.pop(layer.name, None)
        prev = model.layers[i - 1].name if i else INPUT
        if g is None:
            # output does not reach the logits
            g = np.zeros_like(cache.outputs[layer.name])
        x = cache.inputs[layer.name]
        p = model.params.get(layer.name)
        k = layer.kind
        if k == CONV:
            gx, gw = T.conv2d_backward(x, p["weight"], g, layer.stride, layer.padding)
            grads[layer.name] = {"weight": gw}
        elif k == DENSE:
            gx, gw, gb = T.dense_backward(x, p["weight"], g)
            grads[layer.name] = {"weight": gw, "bias": gb}
        elif k == RELU:
            gx = T.relu_backward(x, g)
        elif k == AVGPOOL:
            gx = T.avgpool_backward(x, g, layer.pool)
        elif k == FLATTEN:
            gx = g.reshape(x.shape)
        elif k == IDENTITY:
            gx = g
        else:
            gx = g if layer.branch_channels is None else g[:, list(layer.branch_channels)]
            src = cache.outputs[layer.source]
            gs = _shortcut_backward(g, src.shape)
            pending[layer.source] = pending[layer.source] + gs if layer.source in pending else gs
        if prev != INPUT:
            pending[prev] = pending[prev] + gx if prev in pending else gx
    return grads


def loss_and_grads(model, images, labels):
    logits, cache = forward(model, images)
    loss, gl = T.softmax_cross_entropy(logits, labels)
    return loss, backward(model, cache, gl)


def predict(model, images, batch_size=500):
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward(model, images[i : i + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


# -- FLOPs ----------------------------------------------------------------


def kept_width(n, rate, widths="nominal"):
    """Channels left after pruning ``rate`` of ``n``.

    ``"floor"`` is the integer count a mask actually keeps (n - floor(n*rate));
    ``"nominal"`` is the fractional width n*(1-rate) used for reporting.
    """
    if widths == "floor":
        return n - math.floor(n * rate)
    if widths == "nominal":
        return n * (1.0 - rate)
    raise InputError(f"unknown width mode {widths!r}")


def count_flops(model, prune_rate=0.0, convention=RESIDUAL_RESTORES, widths="nominal", scope=None):
    """Multiply-accumulate count of one forward pass (one FLOP per MAC).

    Every prunable conv in ``scope`` (default: all prunable convs) keeps
    ``kept_width(n, prune_rate)`` output channels. Under ``residual-restores``
    a conv's input width follows its predecessor while residual additions
    restore full trunk width; under ``output-only`` input widths never shrink.
    """
    if not 0.0 <= prune_rate <= 1.0:
        raise InputError(f"prune_rate must lie in [0, 1], got {prune_rate}")
    if convention not in SCOPES:
        raise InputError(f"unknown channel convention {convention!r}")
    restores = convention == RESIDUAL_RESTORES
    live = model.input_shape[0]
    report = FlopsReport()
    flops_total = 0
    params_total = 0
    for layer in model.layers:
        k = layer.kind
        if k == CONV:
            m_eff = live if restores else layer.in_channels
            pruned = layer.prunable and prune_rate > 0 and (scope is None or layer.name in scope)
            n_eff = kept_width(layer.out_channels, prune_rate, widths) if pruned else layer.out_channels
            _, ho, wo = model.shapes[layer.name]
            s2 = layer.kernel_size ** 2
            f = n_eff * ho * wo * m_eff * s2
            params_total += n_eff * m_eff * s2
            live = n_eff
        elif k == DENSE:
            fin = live if restores else layer.in_features
            f = layer.out_features * fin
            params_total += f + layer.out_features
            live = layer.out_features
        else:
            if k == FLATTEN:
                shape = model.input_of(layer.name)
                live = live * math.prod(shape[1:])
            elif k == ADD:
                live = model.shapes[layer.name][0]
            continue
        f = int(round(f))
        report.per_layer[layer.name] = f
        flops_total += f
    report.total = flops_total
    report.params_total = int(round(params_total))
    return report


# -- descriptors ----------------------------------------------------------


def make_resnet_cifar(depth, classes=10, input_shape=(3, 32, 32)):
    """CIFAR ResNet: stem + 3 stages of (depth-2)/6 basic blocks, widths 16/32/64.

    Normalization layers are identity. Shortcuts are parameter-free. The stem
    conv is marked non-prunable.
    """
    if depth not in (20, 56, 110):
        raise InputError(f"unsupported ResNet depth {depth}; choose 20, 56 or 110")
    blocks = (depth - 2) // 6
    layers = [conv("conv1", input_shape[0], 16, prunable=False), LayerSpec(IDENTITY, "bn1"),
              LayerSpec(RELU, "relu1")]
    trunk, width = "relu1", 16
    for stage, w in enumerate((16, 32, 64), start=1):
        for b in range(blocks):
            stride = 2 if (stage > 1 and b == 0) else 1
            pre = f"layer{stage}.{b}"
            layers += [
                conv(f"{pre}.conv1", width, w, stride=stride),
                LayerSpec(IDENTITY, f"{pre}.bn1"),
                LayerSpec(RELU, f"{pre}.relu1"),
                conv(f"{pre}.conv2", w, w),
                LayerSpec(IDENTITY, f"{pre}.bn2"),
                LayerSpec(ADD, f"{pre}.add", source=trunk, out_channels=w),
                LayerSpec(RELU, f"{pre}.relu2"),
            ]
            trunk, width = f"{pre}.relu2", w
    layers += [LayerSpec(AVGPOOL, "avgpool"), LayerSpec(FLATTEN, "flatten"), dense("fc", width, classes)]
    return ModelGraph(layers, input_shape)


def make_toy_cnn(channels=(8, 16), classes=10, input_shape=(3, 8, 8), pool=2):
    """Stack of 3x3 conv+ReLU layers, average pool, dense classifier.

    ``pool=None`` pools globally; otherwise the pooled map is flattened into
    the classifier, which keeps the spatial layout visible to it.
    """
    layers = []
    m = input_shape[0]
    for i, n in enumerate(channels, start=1):
        layers += [conv(f"conv{i}", m, n), LayerSpec(RELU, f"relu{i}")]
        m = n
    spatial = 1 if pool is None else (input_shape[1] // pool) * (input_shape[2] // pool)
    layers += [LayerSpec(AVGPOOL, "pool", pool=pool), LayerSpec(FLATTEN, "flatten"),
               dense("fc", m * spatial, classes)]
    return ModelGraph(layers, input_shape)


ARCHITECTURES = {
    "resnet20": lambda classes=10, input_shape=(3, 32, 32): make_resnet_cifar(20, classes, input_shape),
    "resnet56": lambda classes=10, input_shape=(3, 32, 32): make_resnet_cifar(56, classes, input_shape),
    "resnet110": lambda classes=10, input_shape=(3, 32, 32): make_resnet_cifar(110, classes, input_shape),
    "toy": lambda classes=10, input_shape=(3, 8, 8): make_toy_cnn((8, 16), classes, input_shape),
}


def make_arch(name, classes=10, input_shape=None):
    try:
        factory = ARCHITECTURES[name]
    except KeyError:
        raise InputError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    return factory(classes) if input_shape is None else factory(classes, tuple(input_shape))
