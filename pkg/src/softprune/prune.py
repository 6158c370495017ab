"""Filter ranking, mask selection, soft masking and physical compaction."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from .errors import ConfigError, DimensionError, InputError, ParseError, StateError, UnsupportedError

FILTER = "filter"
WEIGHT = "weight"
GRANULARITIES = (FILTER, WEIGHT)
NORMS = ("l2", "l1")

# guards floor(n*P) against products like 100*0.29 = 28.999999999999996
_FLOOR_SLACK = 1e-9


def num_pruned(count, rate):
    return math.floor(count * rate + _FLOOR_SLACK)


@dataclass(frozen=True)
class PruneConfig:
    target_rate: float = 0.0
    granularity: str = FILTER
    norm: str = "l2"
    scope: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.target_rate < 1.0:
            raise ConfigError(f"target_rate must lie in [0, 1), got {self.target_rate}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}")


@dataclass
class FilterMask:
    """Per-layer keep flags (True = kept).

    Filter granularity stores one flag per output filter; weight granularity
    stores an array shaped like the layer's weight.
    """

    per_layer: dict = field(default_factory=dict)
    granularity: str = FILTER

    def pruned_indices(self, name):
        return np.flatnonzero(~self.per_layer[name].ravel())

    def num_pruned(self, name=None):
        names = [name] if name is not None else list(self.per_layer)
        return sum(int((~self.per_layer[n]).sum()) for n in names)

    def __eq__(self, other):
        return (isinstance(other, FilterMask) and self.granularity == other.granularity
                and self.per_layer.keys() == other.per_layer.keys()
                and all(np.array_equal(v, other.per_layer[k]) for k, v in self.per_layer.items()))


def _scoped_layers(model, scope):
    if scope is None:
        return [l for l in model.conv_layers if l.prunable]
    layers = []
    for name in scope:
        layer = model.layer(name)
        if layer.kind != G.CONV:
            raise InputError(f"layer {name!r} is not a conv layer and cannot be pruned")
        layers.append(layer)
    return layers


def filter_norms(weight, norm="l2"):
    flat = weight.reshape(weight.shape[0], -1)
    if norm == "l1":
        return np.abs(flat).sum(axis=1)
    return np.sqrt((flat * flat).sum(axis=1))


def rank_filters(model, layer, norm="l2"):
    """``[(filter index, norm), ...]`` sorted by norm ascending, ties by index."""
    spec = model.layer(layer)
    if spec.kind != G.CONV:
        raise InputError(f"layer {layer!r} is {spec.kind}, not conv")
    norms = filter_norms(model.params[layer]["weight"], norm)
    order = np.argsort(norms, kind="stable")
    return [(int(i), float(norms[i])) for i in order]


def select_mask(model, config, rate=None):
    """Mark the floor(count*rate) lowest-importance filters (or weights) per layer."""
    rate = config.target_rate if rate is None else rate
    if not 0.0 <= rate <= 1.0:
        raise InputError(f"rate must lie in [0, 1], got {rate}")
    mask = FilterMask(granularity=config.granularity)
    for layer in _scoped_layers(model, config.scope):
        w = model.params[layer.name]["weight"]
        if config.granularity == FILTER:
            scores = filter_norms(w, config.norm)
        else:
            scores = np.abs(w).ravel()
        k = num_pruned(scores.size, rate)
        if config.granularity == FILTER and k >= scores.size:
            raise ConfigError(f"rate {rate} would prune all {scores.size} filters of {layer.name!r}")
        keep = np.ones(scores.size, dtype=bool)
        keep[np.argsort(scores, kind="stable")[:k]] = False
        mask.per_layer[layer.name] = keep if config.granularity == FILTER else keep.reshape(w.shape)
    return mask


def _pruned_selector(model, mask, name):
    if name not in model or model.layer(name).kind != G.CONV:
        raise StateError(f"mask refers to {name!r}, which is not a conv layer of this model")
    keep = mask.per_layer[name]
    w = model.params[name]["weight"]
    expected = (w.shape[0],) if mask.granularity == FILTER else w.shape
    if keep.shape != expected:
        raise StateError(f"mask for {name!r} has shape {keep.shape}, layer needs {expected}")
    return ~keep


def apply_mask(model, mask, alpha, buffers=None):
    """Scale pruned filters (or weights) by ``alpha`` in place; kept ones are untouched.

    ``buffers`` is an optional ``{layer: array}`` map shaped like the weights
    (e.g. momentum) that receives the same scaling.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    for name in mask.per_layer:
        sel = _pruned_selector(model, mask, name)
        w = model.params[name]["weight"]
        # alpha == 0 writes +0.0 so zeroed filters carry no negative zeros
        w[sel] = w[sel] * alpha if alpha else 0.0
        if buffers is not None and name in buffers:
            b = buffers[name]
            b[sel] = b[sel] * alpha if alpha else 0.0
    model.touch()
    return model


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    c = 134217729.0 * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def decay_step_as_regularization(wp, alpha, alpha0=1.0):
    """Evaluate ``alpha0*wp - lam*wp`` with ``lam = alpha0 - alpha``.

    This is one gradient step of ``lam/2 * ||wp||^2`` started from
    ``alpha0*wp``. All intermediate products and the difference ``lam`` are
    carried exactly (two-term expansions) and summed with correct rounding, so
    the result equals ``alpha*wp`` bit for bit.
    """
    if not 0.0 <= alpha <= alpha0 <= 1.0:
        raise InputError(f"need 0 <= alpha <= alpha0 <= 1, got alpha={alpha}, alpha0={alpha0}")
    wp = np.asarray(wp, dtype=np.float64)
    lam_hi, lam_lo = _two_sum(alpha0, -alpha)
    flat = wp.ravel()
    terms = []
    for coef, sign in ((alpha0, 1.0), (lam_hi, -1.0), (lam_lo, -1.0)):
        p, e = _two_prod(np.full_like(flat, coef), flat)
        terms += [sign * p, sign * e]
    stacked = np.stack(terms, axis=1)
    out = np.fromiter((math.fsum(row) for row in stacked), dtype=np.float64, count=flat.size)
    # fsum yields +0.0 on exact cancellation; a product's zero carries the product's sign
    zero = out == 0.0
    out[zero] = np.copysign(0.0, math.copysign(1.0, alpha) * flat[zero])
    return out.reshape(wp.shape)


def compact(model, mask):
    """Physically drop pruned (already zero) filters and the inputs that consumed them.

    Residual additions scatter a shrunken branch back onto the full-width trunk,
    so removed channels re-enter as zeros.
    """
    if mask.granularity != FILTER:
        raise UnsupportedError("only filter-granularity masks can be compacted")
    for name in mask.per_layer:
        sel = _pruned_selector(model, mask, name)
        if np.any(model.params[name]["weight"][sel] != 0.0):
            raise StateError(f"model not fully decayed: pruned filters of {name!r} are nonzero")

    layers, params = [], {}
    live = {G.INPUT: None}
    cur = None
    for layer in model.layers:
        spec = G.LayerSpec(**{k: getattr(layer, k) for k in layer.__dataclass_fields__})
        k = layer.kind
        if k == G.CONV:
            w = model.params[layer.name]["weight"]
            if cur is not None:
                w = w[:, cur]
            out = None
            if layer.name in mask.per_layer:
                keep = np.flatnonzero(mask.per_layer[layer.name])
                if keep.size < w.shape[0]:
                    w = w[keep]
                    out = keep
            spec.in_channels, spec.out_channels = w.shape[1], w.shape[0]
            params[layer.name] = {"weight": w.copy()}
            cur = out
        elif k == G.DENSE:
            w = model.params[layer.name]["weight"]
            if cur is not None:
                w = w[:, cur]
            spec.in_features = w.shape[1]
            params[layer.name] = {"weight": w.copy(), "bias": model.params[layer.name]["bias"].copy()}
            cur = None
        elif k == G.FLATTEN:
            if cur is not None:
                c, h, w_ = model.input_of(layer.name)
                cur = (cur[:, None] * (h * w_) + np.arange(h * w_)).ravel()
        elif k == G.ADD:
            if live[layer.source] is not None:
                raise UnsupportedError(f"residual source {layer.source!r} of {layer.name!r} is itself pruned")
            if cur is not None:
                base = np.arange(model.input_of(layer.name)[0]) if layer.branch_channels is None \
                    else np.asarray(layer.branch_channels)
                spec.branch_channels = tuple(int(i) for i in base[cur])
            spec.out_channels = model.shapes[layer.name][0]
            cur = None
        live[layer.name] = cur
        layers.append(spec)
    return G.ModelGraph(layers, model.input_shape, params)


# -- mask files -----------------------------------------------------------


def write_mask(path, mask):
    with open(path, "w") as fh:
        fh.write(f"# softprune mask v1 granularity={mask.granularity}\n")
        for name, keep in mask.per_layer.items():
            idx = " ".join(str(i) for i in np.flatnonzero(~keep.ravel()))
            fh.write(f"{name}: {idx}\n" if idx else f"{name}:\n")


def read_mask(path, model):
    """Parse a mask file against ``model`` (needed for layer sizes)."""
    granularity = FILTER
    mask = FilterMask()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "granularity=" in line:
                    granularity = line.split("granularity=", 1)[1].split()[0]
                    if granularity not in GRANULARITIES:
                        raise ParseError(f"{path}:{lineno}: unknown granularity {granularity!r}")
                continue
            if ":" not in line:
                raise ParseError(f"{path}:{lineno}: expected 'layer: indices'")
            name, rest = line.split(":", 1)
            name = name.strip()
            if name not in model or model.layer(name).kind != G.CONV:
                raise StateError(f"{path}:{lineno}: mask layer {name!r} is not a conv layer of the model")
            w = model.params[name]["weight"]
            size = w.shape[0] if granularity == FILTER else w.size
            try:
                idx = [int(t) for t in rest.split()]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: indices must be integers") from None
            if any(i < 0 or i >= size for i in idx):
                raise DimensionError(f"{path}:{lineno}: index out of range for {name!r} (size {size})")
            keep = np.ones(size, dtype=bool)
            keep[idx] = False
            mask.per_layer[name] = keep if granularity == FILTER else keep.reshape(w.shape)
    mask.granularity = granularity
    return mask
