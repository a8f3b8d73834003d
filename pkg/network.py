"""
Model graph construction, parameter storage and the graph executor.

The executor walks a `ModelGraph` (topology only) against a `ParameterSet`
(numeric tensors by name). Forward records per-layer caches; backward replays
them in reverse and returns gradients of the mean BCE loss for every
trainable tensor.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import layers as L
from errors import GraphError, NonFiniteError, ShapeError
from models import NUM_CLASSES, LayerKind, LayerSpec, ModelGraph

logger = logging.getLogger(__name__)

# (expansion t, output channels c, repeats n, first stride s)
MICRO_SETTINGS: List[Tuple[int, int, int, int]] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 2, 2),
    (6, 64, 1, 2),
]
FULL_SETTINGS: List[Tuple[int, int, int, int]] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]

PARAM_SUFFIXES = {
    LayerKind.CONV2D: ("weight", "bias"),
    LayerKind.DEPTHWISE: ("weight", "bias"),
    LayerKind.DENSE: ("weight", "bias"),
    LayerKind.BATCHNORM: ("gamma", "beta", "running_mean", "running_var"),
}
NON_TRAINABLE_SUFFIXES = ("running_mean", "running_var")


# ============================================================================
# PARAMETERS
# ============================================================================

@dataclass
class ParameterSet:
    """Named parameter tensors; `trainable` lists the names the optimizer updates."""
    tensors: Dict[str, np.ndarray]
    trainable: FrozenSet[str] = field(default_factory=frozenset)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    @property
    def names(self) -> List[str]:
        return sorted(self.tensors)

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.tensors.items()}, self.trainable)

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: v.astype(dtype) for k, v in self.tensors.items()}, self.trainable)

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def trainable_count(self) -> int:
        return int(sum(self.tensors[k].size for k in self.trainable))

    @property
    def nbytes(self) -> int:
        """Deployment size: 4 bytes per parameter."""
        return 4 * self.count()

    def frozen(self) -> "ParameterSet":
        """Read-only copy for sharing across inference threads."""
        tensors = {}
        for k, v in self.tensors.items():
            arr = np.array(v, dtype=np.float32, copy=True)
            arr.setflags(write=False)
            tensors[k] = arr
        return ParameterSet(tensors, frozenset())


def make_divisible(value: float, divisor: int = 8, min_value: Optional[int] = None) -> int:
    """Round channel counts to a multiple of `divisor`, never losing more than 10%."""
    min_value = min_value or divisor
    new_value = max(min_value, int(value + divisor / 2) // divisor * divisor)
    if new_value < 0.9 * value:
        new_value += divisor
    return new_value


def dense_init_limit(fan_in: int, fan_out: int) -> float:
    """Half-width of the uniform initializer of the Dense head."""
    return math.sqrt(6.0 / (fan_in + fan_out))


# ============================================================================
# GRAPH CONSTRUCTION
# ============================================================================

def _conv(name: str, filters: int, kernel: int = 1, stride: int = 1) -> List[LayerSpec]:
    return [
        LayerSpec(kind=LayerKind.CONV2D, name=name, filters=filters, kernel=kernel, stride=stride, use_bias=False),
        LayerSpec(kind=LayerKind.BATCHNORM, name=f"{name}_bn"),
    ]


def _inverted_residual(name: str, in_c: int, out_c: int, stride: int, expansion: int) -> LayerSpec:
    body: List[LayerSpec] = []
    hidden = in_c * expansion
    if expansion != 1:
        body += _conv(f"{name}.expand", hidden)
        body.append(LayerSpec(kind=LayerKind.RELU6, name=f"{name}.expand_relu"))
    body += [
        LayerSpec(kind=LayerKind.DEPTHWISE, name=f"{name}.dw", kernel=3, stride=stride, use_bias=False),
        LayerSpec(kind=LayerKind.BATCHNORM, name=f"{name}.dw_bn"),
        LayerSpec(kind=LayerKind.RELU6, name=f"{name}.dw_relu"),
    ]
    body += _conv(f"{name}.project", out_c)
    return LayerSpec(
        kind=LayerKind.INVERTED_RESIDUAL, name=name, stride=stride, expansion=expansion,
        out_channels=out_c, residual=(stride == 1 and in_c == out_c), body=body,
    )


def build_graph(
    width_mult: float = 0.25,
    num_classes: int = NUM_CLASSES,
    input_shape: Tuple[int, int, int] = (3, 224, 384),
    settings: Optional[Sequence[Tuple[int, int, int, int]]] = None,
    last_channels: Optional[int] = None,
) -> ModelGraph:
    """
    Stem conv, inverted residual blocks, 1x1 head conv, then GAP -> Dense -> Sigmoid.

    Channel counts scale with `width_mult`; `settings` defaults to the micro
    block table.
    """
    if not 0.0 < width_mult <= 2.0:
        raise GraphError(f"width_mult must be in (0, 2], got {width_mult}")
    if len(input_shape) != 3 or input_shape[0] != 3 or min(input_shape[1:]) < 16:
        raise GraphError(f"input shape {tuple(input_shape)} incompatible: need (3, H, W) with H, W >= 16")
    settings = list(settings) if settings is not None else MICRO_SETTINGS
    full = settings == FULL_SETTINGS
    if last_channels is None:
        last_channels = make_divisible(1280 * max(1.0, width_mult)) if full else make_divisible(320 * width_mult)

    in_c = make_divisible(32 * width_mult)
    layers = _conv("stem", in_c, kernel=3, stride=2)
    layers.append(LayerSpec(kind=LayerKind.RELU6, name="stem_relu"))
    index = 0
    for t, c, n, s in settings:
        out_c = make_divisible(c * width_mult)
        for r in range(n):
            layers.append(_inverted_residual(f"block{index}", in_c, out_c, s if r == 0 else 1, t))
            in_c = out_c
            index += 1
    layers += _conv("head", last_channels)
    layers += [
        LayerSpec(kind=LayerKind.RELU6, name="head_relu"),
        LayerSpec(kind=LayerKind.GAP, name="gap"),
        LayerSpec(kind=LayerKind.DENSE, name="classifier", units=num_classes),
        LayerSpec(kind=LayerKind.SIGMOID, name="sigmoid"),
    ]
    graph = ModelGraph(input_shape=tuple(input_shape), num_classes=num_classes, width_mult=width_mult, layers=layers)
    param_shapes(graph)
    return graph


# ============================================================================
# SHAPE INFERENCE
# ============================================================================

@dataclass
class LayerTrace:
    layer: LayerSpec
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    in_residual: bool = False


def _trace(layer_list: Sequence[LayerSpec], shape: Tuple[int, ...], out: List[LayerTrace],
           shapes: Dict[str, Tuple[int, ...]], in_residual: bool = False) -> Tuple[int, ...]:
    for layer in layer_list:
        k = layer.kind
        new: Tuple[int, ...]
        if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE):
            if len(shape) != 3:
                raise ShapeError(f"expects a C x H x W feature map, got {shape}", layer=layer.name)
            c, h, w = shape
            try:
                ho, wo, _ = L.conv_geometry(h, w, layer.kernel, layer.stride, layer.padding)
            except ShapeError as e:
                raise ShapeError(str(e), layer=layer.name) from e
            if k == LayerKind.CONV2D:
                shapes[f"{layer.name}.weight"] = (layer.filters, c, layer.kernel, layer.kernel)
                new = (layer.filters, ho, wo)
            else:
                shapes[f"{layer.name}.weight"] = (c, 1, layer.kernel, layer.kernel)
                new = (c, ho, wo)
            if layer.use_bias:
                shapes[f"{layer.name}.bias"] = (new[0],)
        elif k == LayerKind.BATCHNORM:
            for suffix in PARAM_SUFFIXES[k]:
                shapes[f"{layer.name}.{suffix}"] = (shape[0],)
            new = shape
        elif k in (LayerKind.RELU6, LayerKind.SIGMOID):
            new = shape
        elif k == LayerKind.INVERTED_RESIDUAL:
            start = len(out)
            out.append(LayerTrace(layer, shape, shape))
            new = _trace(layer.body or [], shape, out, shapes, in_residual=layer.residual)
            if layer.residual and new != shape:
                raise ShapeError(f"residual needs matching shapes, got {shape} -> {new}", layer=layer.name)
            out[start].out_shape = new
            shape = new
            continue
        elif k == LayerKind.GAP:
            if len(shape) != 3:
                raise ShapeError(f"expects a C x H x W feature map, got {shape}", layer=layer.name)
            new = (shape[0],)
        elif k == LayerKind.DENSE:
            if len(shape) != 1:
                raise ShapeError(f"expects a flat feature vector, got {shape}", layer=layer.name)
            shapes[f"{layer.name}.weight"] = (shape[0], layer.units)
            if layer.use_bias:
                shapes[f"{layer.name}.bias"] = (layer.units,)
            new = (layer.units,)
        else:
            raise GraphError(f"unsupported layer kind {k}", layer=layer.name)
        out.append(LayerTrace(layer, shape, new, in_residual))
        shape = new
    return shape


def trace_graph(graph: ModelGraph) -> List[LayerTrace]:
    """Per-layer input/output shapes (without batch), depth first."""
    out: List[LayerTrace] = []
    _trace(graph.layers, tuple(graph.input_shape), out, {})
    return out


def param_shapes(graph: ModelGraph) -> Dict[str, Tuple[int, ...]]:
    """Expected shape of every named parameter tensor of the graph."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    final = _trace(graph.layers, tuple(graph.input_shape), [], shapes)
    if final != (graph.num_classes,):
        raise ShapeError(f"graph output {final} does not match {graph.num_classes} classes")
    return shapes


def init_parameters(graph: ModelGraph, seed: int = 0, dtype=np.float32) -> ParameterSet:
    """He-normal conv weights, uniform Dense head, identity batch norm."""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, np.ndarray] = {}
    trainable = set()
    for name, shape in param_shapes(graph).items():
        suffix = name.rsplit(".", 1)[1]
        if suffix == "weight" and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif suffix == "weight":
            limit = dense_init_limit(shape[0], shape[1])
            arr = rng.uniform(-limit, limit, size=shape)
        elif suffix in ("gamma", "running_var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = arr.astype(dtype)
        if suffix not in NON_TRAINABLE_SUFFIXES:
            trainable.add(name)
    return ParameterSet(tensors, frozenset(trainable))


def build_micro_mobilenet(
    width_mult: float = 0.25,
    num_classes: int = NUM_CLASSES,
    input_shape: Tuple[int, int, int] = (3, 224, 384),
    seed: int = 0,
    full: bool = False,
) -> Tuple[ModelGraph, ParameterSet]:
    """
    Build the classifier graph and its seeded initial parameters.

    Args:
        width_mult: channel multiplier in (0, 2]
        input_shape: (C, H, W); any H, W of at least 16 works
        full: use the full-depth block table instead of the micro one

    Returns:
        (graph, params) with BN running statistics as non-trainable tensors.
    """
    graph = build_graph(width_mult, num_classes, input_shape, FULL_SETTINGS if full else None)
    params = init_parameters(graph, seed)
    logger.info(
        f"✅ Built {'full' if full else 'micro'} MobileNetV2 x{width_mult}: "
        f"{params.count()} parameters ({params.trainable_count()} trainable)"
    )
    logger.info("⚠️ Weights are He-initialised from scratch; no ImageNet pretraining")
    return graph, params


def validate_parameters(graph: ModelGraph, params: ParameterSet) -> None:
    """Names and shapes must match the graph; BN running variance non-negative."""
    expected = param_shapes(graph)
    if set(expected) != set(params.tensors):
        missing = sorted(set(expected) - set(params.tensors))
        extra = sorted(set(params.tensors) - set(expected))
        raise GraphError(f"parameter names disagree with graph (missing {missing[:3]}, extra {extra[:3]})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"tensor '{name}' has shape {params[name].shape}, expected {shape}")
        if name.endswith("running_var") and (params[name] < 0).any():
            raise GraphError(f"tensor '{name}' has negative running variance")


# ============================================================================
# EXECUTOR
# ============================================================================

@dataclass
class ForwardCache:
    """Everything backward and the running-stat update need from a forward pass."""
    entries: list
    bn_stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    relu_inputs: List[np.ndarray] = field(default_factory=list)
    probs: Optional[np.ndarray] = None

    def activation_pattern(self) -> bytes:
        """Which linear piece every ReLU6 input sits on."""
        return b"".join(L.relu6_regions(x).tobytes() for x in self.relu_inputs)


def _bias(params: ParameterSet, layer: LayerSpec) -> Optional[np.ndarray]:
    return params[f"{layer.name}.bias"] if layer.use_bias else None


def _forward_one(layer: LayerSpec, params: ParameterSet, x: np.ndarray, train: bool,
                 checked: bool, cache: ForwardCache):
    k = layer.kind
    n = layer.name
    if k == LayerKind.CONV2D:
        return L.conv2d_forward(x, params[f"{n}.weight"], _bias(params, layer), layer.stride, layer.padding)
    if k == LayerKind.DEPTHWISE:
        return L.depthwise_forward(x, params[f"{n}.weight"], _bias(params, layer), layer.stride, layer.padding)
    if k == LayerKind.BATCHNORM:
        out, c, stats = L.batchnorm_forward(
            x, params[f"{n}.gamma"], params[f"{n}.beta"],
            params[f"{n}.running_mean"], params[f"{n}.running_var"], layer.eps, train,
        )
        if stats is not None:
            cache.bn_stats[n] = stats
        return out, c
    if k == LayerKind.RELU6:
        out, c = L.relu6_forward(x)
        cache.relu_inputs.append(c)
        return out, c
    if k == LayerKind.INVERTED_RESIDUAL:
        out, sub = _run(layer.body or [], params, x, train, checked, cache)
        if layer.residual:
            if out.shape != x.shape:
                raise ShapeError(f"residual needs matching shapes, got {x.shape} -> {out.shape}")
            out = out + x
        return out, sub
    if k == LayerKind.GAP:
        return L.gap_forward(x)
    if k == LayerKind.DENSE:
        return L.dense_forward(x, params[f"{n}.weight"], _bias(params, layer))
    if k == LayerKind.SIGMOID:
        return L.sigmoid_forward(x)
    raise GraphError(f"unsupported layer kind {k}", layer=n)


def _run(layer_list: Sequence[LayerSpec], params: ParameterSet, x: np.ndarray, train: bool,
         checked: bool, cache: ForwardCache):
    entries = []
    for layer in layer_list:
        try:
            x, c = _forward_one(layer, params, x, train, checked, cache)
        except ShapeError as e:
            if e.layer is None:
                raise ShapeError(str(e), layer=layer.name) from e
            raise
        if checked and not np.isfinite(x).all():
            raise NonFiniteError(f"output of layer '{layer.name}'")
        entries.append((layer, c))
    return x, entries


def forward(
    graph: ModelGraph,
    params: ParameterSet,
    batch: np.ndarray,
    mode: str = "infer",
    checked: bool = False,
    return_cache: bool = False,
):
    """
    Run the graph on an NCHW batch.

    Args:
        mode: 'train' uses batch statistics in batch norm, 'infer' running ones
        checked: reject NaN/Inf at every layer boundary

    Returns:
        N x num_classes probabilities, plus the ForwardCache when requested.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got '{mode}'")
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(graph.input_shape):
        raise ShapeError(
            f"batch shape {batch.shape} does not match graph input {tuple(graph.input_shape)}",
            layer=graph.layers[0].name,
        )
    if checked and not np.isfinite(batch).all():
        raise NonFiniteError("input batch")
    cache = ForwardCache(entries=[])
    probs, cache.entries = _run(graph.layers, params, batch, mode == "train", checked, cache)
    cache.probs = probs
    if return_cache:
        return probs, cache
    return probs


def _backward_one(layer: LayerSpec, c, dout: np.ndarray, grads: Dict[str, np.ndarray]) -> np.ndarray:
    k = layer.kind
    n = layer.name
    if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE):
        fn = L.conv2d_backward if k == LayerKind.CONV2D else L.depthwise_backward
        dx, dw, db = fn(dout, c)
        grads[f"{n}.weight"] = dw
        if db is not None:
            grads[f"{n}.bias"] = db
        return dx
    if k == LayerKind.BATCHNORM:
        dx, dgamma, dbeta = L.batchnorm_backward(dout, c)
        grads[f"{n}.gamma"] = dgamma
        grads[f"{n}.beta"] = dbeta
        return dx
    if k == LayerKind.RELU6:
        return L.relu6_backward(dout, c)
    if k == LayerKind.INVERTED_RESIDUAL:
        dx = _run_backward(c, dout, grads)
        return dx + dout if layer.residual else dx
    if k == LayerKind.GAP:
        return L.gap_backward(dout, c)
    if k == LayerKind.DENSE:
        dx, dw, db = L.dense_backward(dout, c)
        grads[f"{n}.weight"] = dw
        if db is not None:
            grads[f"{n}.bias"] = db
        return dx
    if k == LayerKind.SIGMOID:
        return L.sigmoid_backward(dout, c)
    raise GraphError(f"unsupported layer kind {k}", layer=n)


def _run_backward(entries, dout: np.ndarray, grads: Dict[str, np.ndarray]) -> np.ndarray:
    for layer, c in reversed(entries):
        dout = _backward_one(layer, c, dout, grads)
    return dout


def backward(
    graph: ModelGraph,
    params: ParameterSet,
    batch: np.ndarray,
    targets: np.ndarray,
    cache: Optional[ForwardCache] = None,
) -> Dict[str, np.ndarray]:
    """
    Gradients of the mean BCE loss over all N x 16 outputs.

    The sigmoid and the loss are differentiated together, giving
    (p - t) / (N * 16) at the logits.

    Args:
        targets: N x num_classes one-hot rows
        cache: a train-mode ForwardCache of the same batch; recomputed when None

    Returns:
        Gradient per trainable tensor name, shaped like the tensor.
    """
    if cache is None:
        _, cache = forward(graph, params, batch, mode="train", return_cache=True)
    probs = cache.probs
    if targets.shape != probs.shape:
        raise ShapeError(f"targets shape {targets.shape} does not match outputs {probs.shape}")
    d_logits = (probs - targets.astype(probs.dtype)) / probs.size
    grads: Dict[str, np.ndarray] = {}
    _run_backward(cache.entries[:-1], d_logits, grads)
    return {k: v for k, v in grads.items() if k in params.trainable}


def update_running_stats(params: ParameterSet, cache: ForwardCache, momentum: float = 0.9) -> None:
    """Fold the batch statistics of a train-mode pass into the running ones."""
    for name, (mean, var) in cache.bn_stats.items():
        rm = params.tensors[f"{name}.running_mean"]
        rv = params.tensors[f"{name}.running_var"]
        params.tensors[f"{name}.running_mean"] = (momentum * rm + (1.0 - momentum) * mean).astype(rm.dtype)
        params.tensors[f"{name}.running_var"] = (momentum * rv + (1.0 - momentum) * var).astype(rv.dtype)


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def numerical_gradient(
    fn: Callable[[], float],
    array: np.ndarray,
    coords: Iterable[Tuple[int, ...]],
    eps: float = 1e-4,
) -> Dict[Tuple[int, ...], float]:
    """Central differences of `fn()` with respect to entries of `array` (perturbed in place)."""
    result = {}
    for idx in coords:
        orig = array[idx]
        array[idx] = orig + eps
        plus = fn()
        array[idx] = orig - eps
        minus = fn()
        array[idx] = orig
        result[idx] = (plus - minus) / (2.0 * eps)
    return result


def _mean_bce(probs: np.ndarray, targets: np.ndarray) -> float:
    return float(-np.mean(targets * np.log(probs) + (1.0 - targets) * np.log(1.0 - probs)))


def gradient_check(
    graph: ModelGraph,
    params: ParameterSet,
    batch: np.ndarray,
    targets: np.ndarray,
    eps: float = 1e-4,
    max_per_tensor: Optional[int] = 16,
    seed: int = 0,
) -> Dict[str, float]:
    """
    Compare analytic and central-difference gradients in float64.

    Coordinates whose perturbation moves any ReLU6 input across a kink are
    skipped. Returns, per trainable tensor, max |numeric - analytic| divided
    by the largest gradient magnitude of that tensor.
    """
    p64 = params.astype(np.float64)
    x64 = batch.astype(np.float64)
    t64 = targets.astype(np.float64)
    analytic = backward(graph, p64, x64, t64)
    _, base = forward(graph, p64, x64, mode="train", return_cache=True)
    base_pattern = base.activation_pattern()
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}

    for name in sorted(p64.trainable):
        tensor = p64.tensors[name]
        flat = np.arange(tensor.size)
        if max_per_tensor is not None and tensor.size > max_per_tensor:
            flat = np.sort(rng.choice(tensor.size, size=max_per_tensor, replace=False))
        worst = 0.0
        scale = 0.0
        for f in flat:
            idx = np.unravel_index(int(f), tensor.shape)
            orig = tensor[idx]
            values = []
            stable = True
            for delta in (eps, -eps):
                tensor[idx] = orig + delta
                probs, cache = forward(graph, p64, x64, mode="train", return_cache=True)
                stable = stable and cache.activation_pattern() == base_pattern
                values.append(_mean_bce(probs, t64))
            tensor[idx] = orig
            if not stable:
                continue
            numeric = (values[0] - values[1]) / (2.0 * eps)
            ana = float(analytic[name][idx])
            worst = max(worst, abs(numeric - ana))
            scale = max(scale, abs(numeric), abs(ana))
        errors[name] = worst / max(scale, 1e-7)
    return errors


# ============================================================================
# COST ESTIMATES
# ============================================================================

def estimate_flops(graph: ModelGraph, batch_size: int = 1) -> Dict[str, int]:
    """Floating-point operations per layer (multiply-add counted as 2)."""
    flops: Dict[str, int] = {}
    for t in trace_graph(graph):
        k = t.layer.kind
        out_elems = int(np.prod(t.out_shape))
        in_elems = int(np.prod(t.in_shape))
        if k == LayerKind.CONV2D:
            macs = out_elems * t.in_shape[0] * t.layer.kernel ** 2
            cost = 2 * macs + (out_elems if t.layer.use_bias else 0)
        elif k == LayerKind.DEPTHWISE:
            cost = 2 * out_elems * t.layer.kernel ** 2 + (out_elems if t.layer.use_bias else 0)
        elif k == LayerKind.BATCHNORM:
            cost = 2 * out_elems
        elif k in (LayerKind.RELU6, LayerKind.SIGMOID):
            cost = out_elems
        elif k == LayerKind.INVERTED_RESIDUAL:
            cost = out_elems if t.layer.residual else 0
        elif k == LayerKind.GAP:
            cost = in_elems
        elif k == LayerKind.DENSE:
            cost = 2 * in_elems * out_elems + (out_elems if t.layer.use_bias else 0)
        else:
            cost = 0
        flops[t.layer.name] = cost * batch_size
    return flops


def flops_by_kind(graph: ModelGraph, batch_size: int = 1) -> Dict[str, int]:
    per_layer = estimate_flops(graph, batch_size)
    totals: Dict[str, int] = {}
    for layer in graph.iter_layers():
        totals[layer.kind.value] = totals.get(layer.kind.value, 0) + per_layer[layer.name]
    return totals


def peak_working_set(graph: ModelGraph, params: ParameterSet, batch_size: int = 1) -> int:
    """
    Bytes live at the busiest layer: its input and output activations, the
    held residual input when inside a residual block, plus all parameters.
    """
    peak = 0
    held = 0
    for t in trace_graph(graph):
        if t.layer.kind == LayerKind.INVERTED_RESIDUAL:
            held = int(np.prod(t.in_shape)) if t.layer.residual else 0
            continue
        live = int(np.prod(t.in_shape)) + int(np.prod(t.out_shape)) + (held if t.in_residual else 0)
        peak = max(peak, live)
    return 4 * peak * batch_size + params.nbytes
