"""Layer zoo and model graph.

Valid (unpadded) cross-correlation, subspace pooling over groups of k
sibling channels, spatial max pooling, and a softmax output layer, wired
into a forward/backward pair that records every stochastic or argmax
choice in a SelectionTrace. Freezing the trace makes the whole model a
piecewise-linear function of its parameters, which is what lets the
analytic backward pass match finite differences exactly.

All layer ops accept a single example ([c, h, w]) or a batch
([n, c, h, w]); internals are batched. Sampling draws one uniform per
pooled unit per spatial position from per-example streams, so results
do not depend on how examples are grouped into batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ModeError, ShapeError
from .numerics import RngStream, affine, categorical_from_uniform, default_dtype
from .units import (
    DROPPED,
    MODE_INFER_MAX,
    MODE_INFER_PROB_WEIGHT,
    MODE_INFER_SAMPLE,
    MODE_TRAIN_SAMPLE,
    MODE_TRAIN_SAMPLE_DROPOUT,
    MODES,
)

KIND_CONV = "conv-subspace"
KIND_FC = "fc-subspace"
KIND_SOFTMAX = "softmax"

UNIT_MAXOUT = "maxout"
UNIT_PROBOUT = "probout"

#: Trace value for positions pooled by probability weighting (no gradient path).
PROB_WEIGHTED = -2


@dataclass
class LayerSpec:
    """Topology of one layer.

    conv-subspace and fc-subspace layers hold `units` pooled units of
    `k` linear sub-responses each; the softmax layer reuses `units` for
    the class count and ignores the subspace fields.
    """

    kind: str
    units: int
    k: int = 1
    receptive_field: int | None = None
    spatial_pool: tuple[int, int] | None = None  # (size, stride)
    unit_type: str = UNIT_PROBOUT
    lambda_: float | None = None

    def validate(self) -> None:
        if self.kind not in (KIND_CONV, KIND_FC, KIND_SOFTMAX):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.units < 1:
            raise ValueError("units must be >= 1")
        if self.kind == KIND_SOFTMAX:
            return
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.unit_type not in (UNIT_MAXOUT, UNIT_PROBOUT):
            raise ValueError(f"unknown unit type {self.unit_type!r}")
        if self.lambda_ is not None and not self.lambda_ > 0:
            raise ValueError("lambda must be positive when set")
        if self.kind == KIND_CONV:
            if self.receptive_field is None or self.receptive_field < 1:
                raise ValueError("conv-subspace needs receptive_field >= 1")
            if self.spatial_pool is not None:
                size, stride = self.spatial_pool
                if size < 1 or stride < 1:
                    raise ValueError("spatial pool size and stride must be >= 1")
        else:
            if self.receptive_field is not None or self.spatial_pool is not None:
                raise ValueError("fc-subspace takes no receptive field or spatial pool")


@dataclass
class ModelConfig:
    """Input shape plus the layer chain; the last layer must be softmax."""

    input_shape: tuple[int, int, int]  # (channels, height, width)
    layers: list[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def validate(self) -> None:
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ShapeError(f"bad input shape {self.input_shape}")
        if not self.layers or self.layers[-1].kind != KIND_SOFTMAX:
            raise ValueError("layer chain must end with a softmax layer")
        if sum(1 for l in self.layers if l.kind == KIND_SOFTMAX) != 1:
            raise ValueError("exactly one softmax layer allowed")
        seen_fc = False
        for spec in self.layers:
            spec.validate()
            if spec.kind == KIND_FC:
                seen_fc = True
            if spec.kind == KIND_CONV and seen_fc:
                raise ValueError("conv layer cannot follow an fc layer")
        self.geometry()  # raises on inconsistent spatial arithmetic

    @property
    def classes(self) -> int:
        return self.layers[-1].units

    def subspace_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind != KIND_SOFTMAX]

    def layer_names(self) -> list[str]:
        names, conv_n, fc_n = [], 0, 0
        for spec in self.layers:
            if spec.kind == KIND_CONV:
                conv_n += 1
                names.append(f"conv{conv_n}")
            elif spec.kind == KIND_FC:
                fc_n += 1
                names.append("fc" if fc_n == 1 else f"fc{fc_n}")
            else:
                names.append("softmax")
        return names

    def geometry(self) -> list[dict]:
        """Per-layer output geometry; raises ShapeError on any mismatch.

        Each entry reports the layer's input flat dimension and output
        (channels, height, width) after subspace and spatial pooling.
        """
        c, h, w = self.input_shape
        out = []
        for spec in self.layers:
            if spec.kind == KIND_CONV:
                rf = spec.receptive_field
                if h < rf or w < rf:
                    raise ShapeError(f"input {h}x{w} smaller than receptive field {rf}")
                ch, cw = h - rf + 1, w - rf + 1
                entry = {"in_dim": c * rf * rf, "conv_extent": (ch, cw)}
                if spec.spatial_pool is not None:
                    size, stride = spec.spatial_pool
                    if ch < size or cw < size:
                        raise ShapeError(f"pool window {size} larger than map {ch}x{cw}")
                    ch = (ch - size) // stride + 1
                    cw = (cw - size) // stride + 1
                c, h, w = spec.units, ch, cw
            elif spec.kind == KIND_FC:
                entry = {"in_dim": c * h * w}
                c, h, w = spec.units, 1, 1
            else:
                entry = {"in_dim": c * h * w}
                c, h, w = spec.units, 1, 1
            entry["out_shape"] = (c, h, w)
            out.append(entry)
        return out


@dataclass
class LayerParams:
    """Weight and bias tensors of one layer."""

    W: np.ndarray
    b: np.ndarray

    def copy(self) -> "LayerParams":
        return LayerParams(self.W.copy(), self.b.copy())


def init_parameters(config: ModelConfig, rng: RngStream, dtype=None) -> list[LayerParams]:
    """Zero-mean uniform weights with half-width sqrt(6/(fan_in+fan_out)); zero biases."""
    dtype = dtype or default_dtype()
    geo = config.geometry()
    params = []
    for spec, g in zip(config.layers, geo):
        if spec.kind == KIND_CONV:
            rf = spec.receptive_field
            cin = g["in_dim"] // (rf * rf)
            shape = (spec.units * spec.k, cin, rf, rf)
            fan_in, fan_out = cin * rf * rf, spec.units * spec.k * rf * rf
            rows = spec.units * spec.k
        elif spec.kind == KIND_FC:
            shape = (spec.units * spec.k, g["in_dim"])
            fan_in, fan_out = g["in_dim"], spec.units * spec.k
            rows = spec.units * spec.k
        else:
            shape = (spec.units, g["in_dim"])
            fan_in, fan_out = g["in_dim"], spec.units
            rows = spec.units
        half = np.sqrt(6.0 / (fan_in + fan_out))
        W = ((rng.uniform(shape) * 2.0 - 1.0) * half).astype(dtype)
        params.append(LayerParams(W, np.zeros(rows, dtype=dtype)))
    return params


@dataclass
class SelectionTrace:
    """Frozen record of every stochastic/argmax choice of one forward pass.

    ``subspace[i]`` holds the selected sub-response index per unit and
    position for the i-th subspace layer (DROPPED for dropped units,
    PROB_WEIGHTED when the layer emitted expected values).
    ``pool_argmax[i]`` holds the flat within-window argmax of that
    layer's spatial pool, or None when the layer has no pool.
    """

    subspace: list[np.ndarray] = field(default_factory=list)
    pool_argmax: list[np.ndarray | None] = field(default_factory=list)


# ---------------------------------------------------------------------------
# individual layer operations


def _batched(x, ndim: int):
    x = np.asarray(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-d or {ndim}-d input, got {x.ndim}-d")
    return x, False


def conv_forward(x, filters, bias) -> np.ndarray:
    """Valid cross-correlation; each output channel is one linear sub-response map."""
    xb, single = _batched(x, 4)
    filters = np.asarray(filters)
    bias = np.asarray(bias)
    if filters.ndim != 4 or bias.ndim != 1 or bias.shape[0] != filters.shape[0]:
        raise ShapeError("filters must be [out, in, rf, rf] with matching bias")
    n, cin, h, w = xb.shape
    oc, fc, rf, rf2 = filters.shape
    if fc != cin or rf != rf2:
        raise ShapeError(f"filters {filters.shape} do not match input channels {cin}")
    if h < rf or w < rf:
        raise ShapeError(f"input {h}x{w} smaller than receptive field {rf}")
    windows = sliding_window_view(xb, (rf, rf), axis=(2, 3))
    out = np.einsum("nihwab,oiab->nohw", windows, filters, optimize=True)
    out += bias[None, :, None, None]
    out = out.astype(xb.dtype, copy=False)
    return out[0] if single else out


def _conv_backward(dout, x, filters):
    """Gradients of conv_forward w.r.t. filters, bias, and input."""
    rf = filters.shape[2]
    windows = sliding_window_view(x, (rf, rf), axis=(2, 3))
    dW = np.einsum("nihwab,nohw->oiab", windows, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    pad = rf - 1
    dpad = np.pad(dout, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dwin = sliding_window_view(dpad, (rf, rf), axis=(2, 3))
    rot = filters[:, :, ::-1, ::-1]
    dx = np.einsum("nohwab,oiab->nihw", dwin, rot, optimize=True)
    return (
        dW.astype(filters.dtype, copy=False),
        db.astype(filters.dtype, copy=False),
        dx.astype(x.dtype, copy=False),
    )


def spatial_maxpool(x, size: int, stride: int):
    """Max over each window; returns (pooled, flat argmax per window).

    Ties break to the first position in row-major scan order within the
    window, so a constant input records the window origin.
    """
    xb, single = _batched(x, 4)
    n, c, h, w = xb.shape
    if h < size or w < size:
        raise ShapeError(f"pool window {size} larger than input {h}x{w}")
    windows = sliding_window_view(xb, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(*windows.shape[:4], size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    if single:
        return out[0], arg[0]
    return out, arg


def _maxpool_backward(dout, arg, in_shape, size: int, stride: int):
    n, c, oh, ow = dout.shape
    dx = np.zeros(in_shape, dtype=dout.dtype)
    ni, ci, oy, ox = np.indices((n, c, oh, ow), sparse=False)
    iy = oy * stride + arg // size
    ix = ox * stride + arg % size
    np.add.at(dx, (ni, ci, iy, ix), dout)
    return dx


def _stable_softmax64(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_output(h, W, b) -> np.ndarray:
    """Class probabilities softmax(W h + b), float64, overflow-safe."""
    h = np.asarray(h)
    if h.ndim == 1:
        return _stable_softmax64(affine(W, h, b))
    if h.ndim != 2:
        raise ShapeError(f"softmax input must be 1-d or 2-d, got {h.ndim}-d")
    if h.shape[1] != W.shape[1]:
        raise ShapeError(f"softmax: weights {W.shape} do not match input dim {h.shape[1]}")
    return _stable_softmax64(h @ W.T + b)


# ---------------------------------------------------------------------------
# subspace pooling over sibling channels


def _subspace_pool_batch(z5, unit_type, mode, lambda_, u=None, replay=None):
    """Pool z5 [n, units, k, H, W] down to [n, units, H, W].

    Returns (pooled, idx) where idx stores the selected sub-response per
    position (DROPPED / PROB_WEIGHTED sentinels for those outcomes).
    ``u`` is a matching array of uniforms for sampling modes; ``replay``
    pins the indices of a previous pass instead.
    """
    n, units, k, h, w = z5.shape
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}")

    if replay is not None:
        idx = replay
    elif unit_type == UNIT_MAXOUT:
        if mode == MODE_TRAIN_SAMPLE_DROPOUT:
            if u is None:
                raise ValueError("sampling mode requires uniforms")
            idx = np.where(u < 0.5, DROPPED, z5.argmax(axis=2))
        else:
            idx = z5.argmax(axis=2)
    elif mode in (MODE_INFER_MAX,):
        idx = z5.argmax(axis=2)
    elif mode == MODE_INFER_PROB_WEIGHT:
        if lambda_ is None:
            raise ValueError("probability weighting requires lambda")
        p = _stable_softmax64(lambda_ * z5.astype(np.float64), axis=2)
        pooled = np.einsum("nukhw,nukhw->nuhw", p, z5.astype(np.float64))
        pooled = pooled.astype(z5.dtype, copy=False)
        idx = np.full((n, units, h, w), PROB_WEIGHTED, dtype=np.int64)
        return pooled, idx
    else:  # probout sampling modes
        if lambda_ is None:
            raise ValueError("probout sampling requires lambda")
        if u is None:
            raise ValueError("sampling mode requires uniforms")
        # probabilities along k, float64 for exactness of the CDF
        zz = np.moveaxis(z5, 2, -1).astype(np.float64)  # [n, units, H, W, k]
        p = _stable_softmax64(lambda_ * zz, axis=-1)
        if mode == MODE_TRAIN_SAMPLE_DROPOUT:
            # (k+1)-way draw: index 0 is the 0.5-mass dropout outcome
            p_hat = np.concatenate([np.full(p.shape[:-1] + (1,), 0.5), 0.5 * p], axis=-1)
            outcome = categorical_from_uniform(p_hat, u)
            idx = np.where(outcome == 0, DROPPED, outcome - 1)
        else:  # train-sample / infer-sample: plain Boltzmann selection
            idx = categorical_from_uniform(p, u)

    if np.any(idx == PROB_WEIGHTED):
        raise ModeError("cannot replay a probability-weighted trace")
    take = np.clip(idx, 0, k - 1)[:, :, None]
    pooled = np.take_along_axis(z5, take, axis=2)[:, :, 0]
    pooled = np.where(idx == DROPPED, z5.dtype.type(0), pooled)
    return pooled, idx


def _subspace_pool_backward(dpooled, idx, k):
    """Scatter unit gradients back to the selected sub-responses."""
    n, units, h, w = dpooled.shape
    if np.any(idx == PROB_WEIGHTED):
        raise ModeError("no gradient path through probability-weighted pooling")
    dz5 = np.zeros((n, units, k, h, w), dtype=dpooled.dtype)
    keep = (idx != DROPPED).astype(dpooled.dtype)
    take = np.clip(idx, 0, k - 1)[:, :, None]
    np.put_along_axis(dz5, take, (dpooled * keep)[:, :, None], axis=2)
    return dz5


def subspace_pool_spatialwise(linmaps, k: int, unit_type: str, mode: str,
                              lambda_: float | None = None,
                              rng: RngStream | None = None,
                              replay: np.ndarray | None = None):
    """Pool groups of k sibling channels at every spatial position.

    linmaps is [units*k, H, W] (or batched with a leading n); returns
    (pooled maps with one channel per unit, selection index array).
    """
    lm, single = _batched(linmaps, 4)
    n, ck, h, w = lm.shape
    if ck % k != 0:
        raise ShapeError(f"channel count {ck} not divisible by k={k}")
    units = ck // k
    z5 = lm.reshape(n, units, k, h, w)
    u = None
    needs_u = replay is None and (
        mode == MODE_TRAIN_SAMPLE_DROPOUT
        or (unit_type == UNIT_PROBOUT and mode in (MODE_TRAIN_SAMPLE, MODE_INFER_SAMPLE))
    )
    if needs_u:
        if rng is None:
            raise ValueError(f"mode {mode!r} requires an rng stream")
        if isinstance(rng, RngStream):
            u = rng.uniform((n, units, h, w))
        else:
            u = _draw_layer_uniforms(list(rng), (units, h, w))
    if replay is not None and replay.shape != (n, units, h, w):
        replay = replay.reshape(n, units, h, w)
    pooled, idx = _subspace_pool_batch(z5, unit_type, mode, lambda_, u=u, replay=replay)
    if single:
        return pooled[0], idx[0]
    return pooled, idx


def _draw_layer_uniforms(streams, shape_per_example):
    """One uniform block per example, drawn from that example's stream."""
    u = np.empty((len(streams),) + shape_per_example, dtype=np.float64)
    for i, s in enumerate(streams):
        u[i] = s.uniform(shape_per_example)
    return u


# ---------------------------------------------------------------------------
# whole-model forward/backward


@dataclass
class _LayerCache:
    x_in: np.ndarray | None = None       # layer input as used (conv: maps, fc/softmax: flat)
    in_spatial: tuple | None = None      # conv input spatial shape for backward
    prepool_shape: tuple | None = None   # conv map shape before spatial pooling


@dataclass
class ForwardResult:
    """Outputs of one model_forward call."""

    probs: np.ndarray                    # [n, C] or [C]; float64
    logits: np.ndarray
    trace: SelectionTrace
    features: dict[str, np.ndarray] | None = None
    cache: list[_LayerCache] | None = None
    single: bool = False


def _normalize_streams(rng, n: int):
    if rng is None:
        return None
    if isinstance(rng, RngStream):
        return [rng] if n == 1 else [rng.fork(i) for i in range(n)]
    streams = list(rng)
    if len(streams) != n:
        raise ShapeError(f"{len(streams)} rng streams for {n} examples")
    return streams


def _mode_needs_rng(config: ModelConfig, mode: str) -> bool:
    if mode == MODE_TRAIN_SAMPLE_DROPOUT:
        return True
    if mode in (MODE_TRAIN_SAMPLE, MODE_INFER_SAMPLE):
        return any(l.unit_type == UNIT_PROBOUT for l in config.subspace_layers())
    return False


def _layer_lambda(spec: LayerSpec, override: float | None) -> float | None:
    if override is not None:
        return override
    return spec.lambda_


def model_forward(x, params, config: ModelConfig, mode: str,
                  rng=None, *, lambdas=None, want_features: bool = False,
                  keep_cache: bool = False,
                  replay: SelectionTrace | None = None) -> ForwardResult:
    """Run the model. ``rng`` is a single stream or one stream per example.

    ``lambdas`` overrides the per-subspace-layer selection temperature
    (annealing hands the current values in here). ``replay`` pins every
    selection and pool argmax to a previous pass's trace, which freezes
    the piecewise-linear region for gradient verification.
    """
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}")
    xb, single = _batched(x, 4)
    if xb.shape[1:] != config.input_shape:
        raise ShapeError(f"input {xb.shape[1:]} does not match configured {config.input_shape}")
    if len(params) != len(config.layers):
        raise ShapeError(f"{len(params)} parameter sets for {len(config.layers)} layers")
    n = xb.shape[0]
    streams = None
    if replay is None and _mode_needs_rng(config, mode):
        streams = _normalize_streams(rng, n)
        if streams is None:
            raise ValueError(f"mode {mode!r} requires an rng stream")
    sub_specs = config.subspace_layers()
    if lambdas is not None and len(lambdas) != len(sub_specs):
        raise ShapeError(f"{len(lambdas)} lambda values for {len(sub_specs)} subspace layers")

    names = config.layer_names()
    trace = SelectionTrace()
    features: dict[str, np.ndarray] = {}
    caches: list[_LayerCache] = []
    h = xb
    si = 0  # subspace layer counter
    logits = None
    for li, spec in enumerate(config.layers):
        lp = params[li]
        if spec.kind == KIND_CONV:
            lin = conv_forward(h, lp.W, lp.b)
            hc, wc = lin.shape[2], lin.shape[3]
            lam = _layer_lambda(spec, lambdas[si] if lambdas is not None else None)
            u = None
            if streams is not None and _layer_samples(spec, mode):
                u = _draw_layer_uniforms(streams, (spec.units, hc, wc))
            rep = replay.subspace[si] if replay is not None else None
            z5 = lin.reshape(n, spec.units, spec.k, hc, wc)
            pooled, idx = _subspace_pool_batch(z5, spec.unit_type, mode, lam, u=u, replay=rep)
            cache = _LayerCache(x_in=h if keep_cache else None,
                                prepool_shape=pooled.shape)
            if spec.spatial_pool is not None:
                size, stride = spec.spatial_pool
                if replay is not None:
                    arg = replay.pool_argmax[si]
                    windows = sliding_window_view(pooled, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
                    flat = windows.reshape(*windows.shape[:4], size * size)
                    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
                    out = np.ascontiguousarray(out)
                else:
                    out, arg = spatial_maxpool(pooled, size, stride)
            else:
                out, arg = pooled, None
            trace.subspace.append(idx)
            trace.pool_argmax.append(arg)
            caches.append(cache)
            h = out
            if want_features:
                features[names[li]] = out[0] if single else out
            si += 1
        elif spec.kind == KIND_FC:
            flat = h.reshape(n, -1)
            if flat.shape[1] != lp.W.shape[1]:
                raise ShapeError(f"fc input dim {flat.shape[1]} != weights {lp.W.shape}")
            lin = flat @ lp.W.T + lp.b
            lam = _layer_lambda(spec, lambdas[si] if lambdas is not None else None)
            u = None
            if streams is not None and _layer_samples(spec, mode):
                u = _draw_layer_uniforms(streams, (spec.units, 1, 1))
            rep = replay.subspace[si] if replay is not None else None
            z5 = lin.reshape(n, spec.units, spec.k, 1, 1)
            pooled, idx = _subspace_pool_batch(z5, spec.unit_type, mode, lam, u=u, replay=rep)
            trace.subspace.append(idx)
            trace.pool_argmax.append(None)
            caches.append(_LayerCache(x_in=flat if keep_cache else None))
            h = pooled[:, :, 0, 0]
            if want_features:
                features[names[li]] = h[0] if single else h
            si += 1
        else:  # softmax
            flat = h.reshape(n, -1)
            if flat.shape[1] != lp.W.shape[1]:
                raise ShapeError(f"softmax input dim {flat.shape[1]} != weights {lp.W.shape}")
            logits = flat @ lp.W.T + lp.b
            caches.append(_LayerCache(x_in=flat if keep_cache else None))
    probs = _stable_softmax64(logits)
    return ForwardResult(
        probs=probs[0] if single else probs,
        logits=logits[0] if single else logits,
        trace=trace,
        features=features if want_features else None,
        cache=caches if keep_cache else None,
        single=single,
    )


def _layer_samples(spec: LayerSpec, mode: str) -> bool:
    """Whether this layer consumes uniforms under the given mode."""
    if mode == MODE_TRAIN_SAMPLE_DROPOUT:
        return True
    if spec.unit_type == UNIT_PROBOUT and mode in (MODE_TRAIN_SAMPLE, MODE_INFER_SAMPLE):
        return True
    return False


def model_backward(result: ForwardResult, params, config: ModelConfig,
                   grad_logits) -> list[LayerParams]:
    """Exact parameter gradients with every selection held fixed.

    ``grad_logits`` is the loss gradient at the softmax pre-activations;
    the trace and cached activations must come from the matching forward
    pass (mismatched shapes raise ShapeError).
    """
    if result.cache is None:
        raise ValueError("forward pass must be run with keep_cache=True for backward")
    dlog = np.asarray(grad_logits)
    if result.single and dlog.ndim == 1:
        dlog = dlog[None]
    dlog = dlog.astype(params[-1].W.dtype, copy=False)
    grads: list[LayerParams | None] = [None] * len(config.layers)

    # softmax layer
    cache = result.cache[-1]
    flat_in = cache.x_in
    if flat_in is None or dlog.shape != (flat_in.shape[0], params[-1].W.shape[0]):
        raise ShapeError("grad_logits does not match the cached forward pass")
    grads[-1] = LayerParams(dlog.T @ flat_in, dlog.sum(axis=0))
    dh = dlog @ params[-1].W  # gradient on flattened softmax input

    si = len(config.subspace_layers()) - 1
    for li in range(len(config.layers) - 2, -1, -1):
        spec = config.layers[li]
        lp = params[li]
        cache = result.cache[li]
        idx = result.trace.subspace[si]
        if spec.kind == KIND_FC:
            dpooled = dh.reshape(idx.shape[0], spec.units, 1, 1)
            dz5 = _subspace_pool_backward(dpooled, idx, spec.k)
            dlin = dz5.reshape(-1, spec.units * spec.k)
            flat = cache.x_in
            grads[li] = LayerParams(dlin.T @ flat, dlin.sum(axis=0))
            dh = dlin @ lp.W
        else:  # conv
            if spec.spatial_pool is not None:
                size, stride = spec.spatial_pool
                arg = result.trace.pool_argmax[si]
                dpost = dh.reshape(arg.shape)
                dpre = _maxpool_backward(dpost, arg, cache.prepool_shape, size, stride)
            else:
                dpre = dh.reshape(cache.prepool_shape)
            dz5 = _subspace_pool_backward(dpre, idx, spec.k)
            hc, wc = dpre.shape[2], dpre.shape[3]
            dlin = dz5.reshape(-1, spec.units * spec.k, hc, wc)
            dW, db, dx = _conv_backward(dlin, cache.x_in, lp.W)
            grads[li] = LayerParams(dW, db)
            dh = dx.reshape(dx.shape[0], -1)
        si -= 1
    return grads  # type: ignore[return-value]


def halve_weights(params, config: ModelConfig) -> list[LayerParams]:
    """Test-time dropout compensation: new parameters with the weights of
    every layer that consumes a dropout-sampled activation multiplied by
    0.5. The first layer reads raw input and is left unchanged; biases
    are never scaled."""
    out = []
    for li, lp in enumerate(params):
        new = lp.copy()
        if li > 0 and config.layers[li - 1].kind in (KIND_CONV, KIND_FC):
            new.W = new.W * 0.5
        out.append(new)
    return out
