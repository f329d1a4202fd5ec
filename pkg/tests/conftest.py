import json
from pathlib import Path

import numpy as np
import pytest

from tinydeploy import model as M
from tinydeploy import quantize as Q
from tinydeploy.interpreter import Tensor

REPO = Path(__file__).resolve().parent.parent
MODELS = REPO / "models"


@pytest.fixture(scope="session")
def lenet5_text() -> str:
    return (MODELS / "lenet5.json").read_text()


@pytest.fixture(scope="session")
def testnet_text() -> str:
    return (MODELS / "testnet.json").read_text()


@pytest.fixture(scope="session")
def lenet5(lenet5_text) -> M.ModelGraph:
    return M.parse_model(lenet5_text)


@pytest.fixture(scope="session")
def testnet(testnet_text) -> M.ModelGraph:
    return M.parse_model(testnet_text)


def random_store(graph: M.ModelGraph, rng: np.random.Generator,
                 scale: float = 0.5) -> M.WeightStore:
    """FP32 weights drawn uniformly from [-scale, scale]."""
    layers = {}
    for idx, (wshape, bshape) in M.weight_layout(graph).items():
        weight = rng.uniform(-scale, scale, size=wshape).astype(np.float32)
        bias = (rng.uniform(-scale, scale, size=bshape).astype(np.float32)
                if bshape is not None else None)
        layers[idx] = M.LayerWeights(weight=weight, bias=bias)
    return M.WeightStore(element_type=M.ElementType.FP32, layers=layers)


def random_input(graph: M.ModelGraph, rng: np.random.Generator) -> Tensor:
    shape = graph.input_shape
    if isinstance(shape, M.Spatial):
        data = rng.uniform(0.0, 1.0, size=shape.dims).astype(np.float32)
    else:
        data = rng.uniform(0.0, 1.0, size=shape.length).astype(np.float32)
    return Tensor.from_array(data, M.ElementType.FP32)


def int8_fixture(graph: M.ModelGraph, rng: np.random.Generator):
    """(int8 store, params, int8 input tensor) for an FP32-described graph."""
    fp_graph = M.ModelGraph(graph.input_shape, M.ElementType.FP32, graph.layers)
    store = random_store(fp_graph, rng)
    sample = random_input(fp_graph, rng)
    params = Q.calibrate_activations(fp_graph, store, [sample])
    qstore, params = Q.quantize_weights(store, params)
    q_in = Q.quantize_input(sample.data, params.layer_output_scales[0])
    tensor = Tensor.from_array(q_in, M.ElementType.INT8,
                               params.layer_output_scales[0])
    int8_graph = M.ModelGraph(graph.input_shape, M.ElementType.INT8, graph.layers)
    return int8_graph, qstore, params, tensor


def make_blob(graph: M.ModelGraph, store: M.WeightStore):
    entries, blob = M.serialize_weights(graph, store)
    return json.dumps(entries), blob
