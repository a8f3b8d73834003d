import numpy as np
import pytest

from errors import GraphError, NonFiniteError, ShapeError
from models import LayerKind
from network import (
    backward,
    build_graph,
    build_micro_mobilenet,
    estimate_flops,
    flops_by_kind,
    forward,
    gradient_check,
    init_parameters,
    make_divisible,
    param_shapes,
    peak_working_set,
    trace_graph,
    update_running_stats,
    validate_parameters,
)


@pytest.fixture
def batch():
    return np.random.default_rng(4).uniform(0.0, 1.0, size=(4, 3, 32, 48)).astype(np.float32)


@pytest.fixture
def targets():
    t = np.zeros((4, 16), dtype=np.float32)
    t[np.arange(4), [0, 5, 8, 13]] = 1.0
    return t


# ============================================================================
# GRAPH
# ============================================================================

def test_graph_ends_with_sigmoid_head(tiny_graph):
    kinds = [layer.kind for layer in tiny_graph.layers[-3:]]
    assert kinds == [LayerKind.GAP, LayerKind.DENSE, LayerKind.SIGMOID]
    assert tiny_graph.layers[-2].units == 16


@pytest.mark.parametrize("width", [0.0, -0.5, 2.5])
def test_graph_rejects_bad_width(width):
    with pytest.raises(GraphError):
        build_graph(width_mult=width)


def test_graph_rejects_tiny_input():
    with pytest.raises(GraphError):
        build_graph(input_shape=(3, 8, 8))


def test_trace_reaches_class_vector(tiny_graph):
    trace = trace_graph(tiny_graph)
    assert trace[-1].out_shape == (16,)
    stem = next(t for t in trace if t.layer.name == "stem")
    assert stem.out_shape == (8, 16, 24)


def test_residual_only_where_shapes_match(tiny_graph):
    blocks = [layer for layer in tiny_graph.layers if layer.kind == LayerKind.INVERTED_RESIDUAL]
    assert [b.residual for b in blocks] == [True, False, True, False, True, False]


def test_make_divisible():
    assert make_divisible(8.0) == 8
    assert make_divisible(32 * 0.25) == 8
    assert make_divisible(24 * 0.35) == 8
    assert make_divisible(100.0) == 104


def test_full_variant_is_larger():
    _, micro = build_micro_mobilenet(0.25, input_shape=(3, 32, 32))
    _, full = build_micro_mobilenet(0.25, input_shape=(3, 32, 32), full=True)
    assert full.count() > micro.count()


# ============================================================================
# PARAMETERS
# ============================================================================

def test_init_is_seeded(tiny_graph):
    a = init_parameters(tiny_graph, seed=9)
    b = init_parameters(tiny_graph, seed=9)
    assert all(np.array_equal(a[n], b[n]) for n in a.names)


def test_running_stats_are_not_trainable(tiny_params):
    running = [n for n in tiny_params.names if n.endswith(("running_mean", "running_var"))]
    assert running
    assert not set(running) & tiny_params.trainable
    assert tiny_params.count() > tiny_params.trainable_count()
    assert tiny_params.nbytes == 4 * tiny_params.count()


def test_validate_parameters_catches_shape_drift(tiny_graph, tiny_params):
    validate_parameters(tiny_graph, tiny_params)
    broken = tiny_params.copy()
    broken.tensors["classifier.weight"] = np.zeros((3, 16), dtype=np.float32)
    with pytest.raises(ShapeError):
        validate_parameters(tiny_graph, broken)
    del broken.tensors["classifier.bias"]
    with pytest.raises(GraphError):
        validate_parameters(tiny_graph, broken)


def test_param_shapes_cover_every_tensor(tiny_graph, tiny_params):
    shapes = param_shapes(tiny_graph)
    assert set(shapes) == set(tiny_params.names)
    assert shapes["stem.weight"] == (8, 3, 3, 3)


# ============================================================================
# EXECUTOR
# ============================================================================

def test_forward_outputs_probabilities(tiny_graph, tiny_params, batch):
    probs = forward(tiny_graph, tiny_params, batch)
    assert probs.shape == (4, 16)
    assert np.all((probs > 0.0) & (probs < 1.0))


def test_forward_rejects_wrong_input_shape(tiny_graph, tiny_params):
    with pytest.raises(ShapeError) as err:
        forward(tiny_graph, tiny_params, np.zeros((1, 3, 30, 48), dtype=np.float32))
    assert err.value.layer == "stem"


def test_checked_forward_rejects_nan(tiny_graph, tiny_params, batch):
    batch[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        forward(tiny_graph, tiny_params, batch, checked=True)


def test_forward_is_deterministic(tiny_graph, tiny_params, batch):
    a = forward(tiny_graph, tiny_params, batch)
    b = forward(tiny_graph, tiny_params, batch)
    assert np.array_equal(a, b)


def test_backward_returns_only_trainable(tiny_graph, tiny_params, batch, targets):
    grads = backward(tiny_graph, tiny_params, batch, targets)
    assert set(grads) == set(tiny_params.trainable)
    assert all(grads[n].shape == tiny_params[n].shape for n in grads)


def test_backward_rejects_mismatched_targets(tiny_graph, tiny_params, batch):
    with pytest.raises(ShapeError):
        backward(tiny_graph, tiny_params, batch, np.zeros((4, 15), dtype=np.float32))


def test_running_stats_move_towards_batch(tiny_graph, tiny_params, batch):
    _, cache = forward(tiny_graph, tiny_params, batch, mode="train", return_cache=True)
    before = tiny_params["stem_bn.running_mean"].copy()
    update_running_stats(tiny_params, cache, momentum=0.9)
    batch_mean = cache.bn_stats["stem_bn"][0]
    assert np.allclose(tiny_params["stem_bn.running_mean"], 0.9 * before + 0.1 * batch_mean, atol=1e-6)


def test_gradient_check_small(tiny_graph, tiny_params, batch, targets):
    errors = gradient_check(tiny_graph, tiny_params, batch, targets, max_per_tensor=3, seed=1)
    assert set(errors) == set(tiny_params.trainable)
    assert max(errors.values()) < 1e-4


@pytest.mark.slow
def test_gradient_check_full(tiny_graph, tiny_params, batch, targets):
    errors = gradient_check(tiny_graph, tiny_params, batch, targets, max_per_tensor=16)
    assert max(errors.values()) < 1e-5


# ============================================================================
# COST ESTIMATES
# ============================================================================

def test_flops_scale_linearly_with_batch(tiny_graph):
    one = sum(estimate_flops(tiny_graph, 1).values())
    eight = sum(estimate_flops(tiny_graph, 8).values())
    assert one > 0
    assert eight == 8 * one


def test_flops_by_kind_sums_to_total(tiny_graph):
    by_kind = flops_by_kind(tiny_graph)
    assert sum(by_kind.values()) == sum(estimate_flops(tiny_graph).values())
    assert by_kind["conv2d"] > by_kind["relu6"]


def test_peak_working_set_includes_parameters(tiny_graph, tiny_params):
    peak = peak_working_set(tiny_graph, tiny_params)
    assert peak > tiny_params.nbytes
    assert peak_working_set(tiny_graph, tiny_params, batch_size=2) > peak
