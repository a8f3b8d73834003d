"""
Inference-side model handling: freezing, batch-norm folding and the
single-frame runners used by the pipeline, the benchmark and the simulator.
"""

import logging
import time
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from checkpoint import Checkpoint
from errors import GraphError, UnfoldableError
from imageops import resize, to_model_input
from models import LINEAR_KINDS, ClassPrediction, ClassTaxonomy, LayerKind, LayerSpec, ModelGraph
from network import ParameterSet, forward, param_shapes, peak_working_set

logger = logging.getLogger(__name__)


# ============================================================================
# FREEZE / FOLD
# ============================================================================

def freeze(ckpt: Checkpoint) -> Checkpoint:
    """Inference-only copy: float32 tensors, training metadata reduced to provenance."""
    meta = {"frozen": True}
    for key in ("epoch", "val_loss", "seed"):
        if key in ckpt.meta:
            meta[key] = ckpt.meta[key]
    tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in ckpt.params.tensors.items()}
    return Checkpoint(ckpt.graph.model_copy(deep=True), ParameterSet(tensors, frozenset()), meta)


def _fold_pair(linear: LayerSpec, bn: LayerSpec, params: ParameterSet,
               out: Dict[str, np.ndarray]) -> LayerSpec:
    gamma = params[f"{bn.name}.gamma"].astype(np.float64)
    beta = params[f"{bn.name}.beta"].astype(np.float64)
    mean = params[f"{bn.name}.running_mean"].astype(np.float64)
    var = params[f"{bn.name}.running_var"].astype(np.float64)
    scale = gamma / np.sqrt(var + bn.eps)

    w = params[f"{linear.name}.weight"].astype(np.float64)
    if linear.kind == LayerKind.DENSE:
        w_folded = w * scale[None, :]
    else:
        w_folded = w * scale[:, None, None, None]
    b = params[f"{linear.name}.bias"].astype(np.float64) if linear.use_bias else np.zeros_like(scale)
    out[f"{linear.name}.weight"] = w_folded.astype(np.float32)
    out[f"{linear.name}.bias"] = ((b - mean) * scale + beta).astype(np.float32)
    return linear.model_copy(update={"use_bias": True})


def _fold_list(layer_list: List[LayerSpec], params: ParameterSet, out: Dict[str, np.ndarray]) -> List[LayerSpec]:
    folded: List[LayerSpec] = []
    for layer in layer_list:
        if layer.kind == LayerKind.BATCHNORM:
            prev = folded[-1] if folded else None
            if prev is None or prev.kind not in LINEAR_KINDS:
                raise UnfoldableError("batch norm is not directly preceded by a conv/depthwise/dense layer",
                                      layer=layer.name)
            folded[-1] = _fold_pair(prev, layer, params, out)
        elif layer.kind == LayerKind.INVERTED_RESIDUAL:
            body = _fold_list(layer.body or [], params, out)
            folded.append(layer.model_copy(update={"body": body}))
        else:
            folded.append(layer)
    return folded


def fold_batchnorm(graph: ModelGraph, params: ParameterSet) -> Tuple[ModelGraph, ParameterSet]:
    """
    Replace every (linear, BN) pair by one linear layer with
    w' = w * g / sqrt(var + eps) and b' = (b - mean) * g / sqrt(var + eps) + beta.

    Args:
        graph: graph whose every batch norm directly follows a conv, depthwise or dense layer
        params: trained parameters including the running statistics

    Returns:
        The folded graph (no batch norm, `folded=True`) and its parameters,
        with a bias on every layer that absorbed a batch norm.

    Raises:
        UnfoldableError: a batch norm is not preceded by a linear layer
    """
    folded_tensors: Dict[str, np.ndarray] = {}
    layers = _fold_list(list(graph.layers), params, folded_tensors)
    new_graph = ModelGraph(
        input_shape=graph.input_shape, num_classes=graph.num_classes,
        width_mult=graph.width_mult, layers=layers, folded=True,
    )
    tensors: Dict[str, np.ndarray] = {}
    for name in param_shapes(new_graph):
        tensors[name] = folded_tensors[name] if name in folded_tensors else params[name].astype(np.float32)
    new_params = ParameterSet(tensors, frozenset(tensors))
    logger.info(f"✅ Folded batch norm: {params.count()} -> {new_params.count()} parameters")
    return new_graph, new_params


# ============================================================================
# RUNNERS
# ============================================================================

class FrozenModel:
    """Unfolded model in infer mode (batch norm kept); the benchmark baseline."""

    def __init__(self, graph: ModelGraph, params: ParameterSet, taxonomy: ClassTaxonomy,
                 name: str = "unfolded", checked: bool = False):
        self.graph = graph.model_copy(deep=True)
        self.params = params.frozen()
        self.taxonomy = taxonomy
        self.name = name
        self.checked = checked

    @property
    def input_hw(self) -> Tuple[int, int]:
        return self.graph.input_shape[1], self.graph.input_shape[2]

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        return forward(self.graph, self.params, x, mode="infer", checked=self.checked)

    def predict(self, frame: np.ndarray) -> ClassPrediction:
        return infer_frame(self, frame)

    def parameter_count(self) -> int:
        return self.params.count()

    def working_set_bytes(self, batch_size: int = 1) -> int:
        return peak_working_set(self.graph, self.params, batch_size)


class InferenceEngine(FrozenModel):
    """Folded, immutable engine: no batch norm, read-only tensors."""

    def __init__(self, graph: ModelGraph, params: ParameterSet, taxonomy: ClassTaxonomy,
                 name: str = "folded", checked: bool = False):
        if any(layer.kind == LayerKind.BATCHNORM for layer in graph.iter_layers()):
            raise GraphError("inference engine graph still contains batch norm; fold it first")
        super().__init__(graph, params, taxonomy, name, checked)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, taxonomy: ClassTaxonomy, checked: bool = False) -> "InferenceEngine":
        if ckpt.graph.folded:
            return cls(ckpt.graph, ckpt.params, taxonomy, checked=checked)
        graph, params = fold_batchnorm(ckpt.graph, ckpt.params)
        return cls(graph, params, taxonomy, checked=checked)


def prediction_from_probs(probs: np.ndarray, taxonomy: ClassTaxonomy, latency_ms: float = 0.0) -> ClassPrediction:
    """Arg-max decision; np.argmax returns the first maximum, i.e. the lowest id."""
    class_id = int(np.argmax(probs))
    return ClassPrediction(
        class_id=class_id,
        class_name=taxonomy.name(class_id),
        probabilities=[float(p) for p in probs],
        probability=float(probs[class_id]),
        latency_ms=latency_ms,
    )


def infer_frame(engine: FrozenModel, frame: np.ndarray) -> ClassPrediction:
    """Resize if needed, normalise, run, pick the arg-max class."""
    start = time.perf_counter()
    h, w = engine.input_hw
    if frame.shape[:2] != (h, w):
        frame = resize(frame, target_w=w, target_h=h)
    probs = engine.predict_batch(to_model_input([frame]))[0]
    latency_ms = (time.perf_counter() - start) * 1000.0
    return prediction_from_probs(probs, engine.taxonomy, latency_ms)
