import base64

import numpy as np
import pytest

from errors import ModelFormatError
from model_io import (load_model, load_model_json, model_from_bytes, model_from_json, model_to_bytes, model_to_json,
                      save_model, save_model_json)
from tensor_core import forward_batch, linear_classifier
from trainer import build_classifier


@pytest.fixture(params=["linear", "mlp", "lenet"])
def model(request):
    return build_classifier(request.param, (1, 10, 10), 4, seed=9, hidden=6, channels=(2, 3))


def same_outputs(a, b, rng):
    batch = rng.uniform(size=(3,) + a.input_shape)
    return forward_batch(a, batch).tobytes() == forward_batch(b, batch).tobytes()


def test_binary_round_trip(model, rng):
    restored = model_from_bytes(model_to_bytes(model))
    assert restored.input_shape == model.input_shape
    assert restored.num_classes == model.num_classes
    assert [layer.kind for layer in restored.layers] == [layer.kind for layer in model.layers]
    assert same_outputs(model, restored, rng)


def test_json_round_trip(model, rng):
    assert same_outputs(model, model_from_json(model_to_json(model)), rng)


def test_file_round_trip(model, rng, tmp_path):
    assert same_outputs(model, load_model(save_model(model, tmp_path / "m.advb")), rng)
    assert same_outputs(model, load_model_json(save_model_json(model, tmp_path / "m.json")), rng)


def test_bad_magic(model):
    data = model_to_bytes(model)
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"XXXX" + data[4:])


def test_truncated(model):
    with pytest.raises(ModelFormatError):
        model_from_bytes(model_to_bytes(model)[:-5])


def test_trailing_bytes(model):
    with pytest.raises(ModelFormatError):
        model_from_bytes(model_to_bytes(model) + b"\x00")


def test_unknown_layer_tag(model):
    data = bytearray(model_to_bytes(model))
    # first layer tag follows magic, version and the layer count
    data[12] = 77
    with pytest.raises(ModelFormatError):
        model_from_bytes(bytes(data))


def test_json_with_unknown_kind(model):
    data = model_to_json(model)
    data["layers"][0]["kind"] = "attention"
    with pytest.raises(ModelFormatError):
        model_from_json(data)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "absent.advb")


def test_binary_layout():
    model = linear_classifier(np.eye(2), np.zeros(2))
    data = model_to_bytes(model)
    assert data[:4] == b"ADVB"
    assert np.frombuffer(data[4:12], dtype="<u4").tolist() == [1, 2]
    assert data[12] == 4
    assert data[13] == 1
    assert np.frombuffer(data[14:22], dtype="<u4").tolist() == [2, 2]
    weights = np.frombuffer(data[22:22 + 6 * 8], dtype="<f8")
    assert weights.tolist() == [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
    assert np.frombuffer(data[70:], dtype="<u4").tolist() == [2, 1, 2]


def test_conv_layer_stores_full_kernel_shape():
    model = build_classifier("lenet", (1, 10, 10), 4, seed=9, hidden=6, channels=(2, 3))
    data = model_to_bytes(model)
    assert data[12] == 2
    assert np.frombuffer(data[13:29], dtype="<u4").tolist() == [2, 1, 3, 3]


def test_bad_kernel_shape_is_format_error():
    model = build_classifier("lenet", (1, 10, 10), 4, seed=9, hidden=6, channels=(2, 3))
    data = bytearray(model_to_bytes(model))
    # declare 2x2 kernels for the first conv layer
    data[21:29] = np.asarray([2, 2], dtype="<u4").tobytes()
    with pytest.raises(ModelFormatError):
        model_from_bytes(bytes(data))


def test_json_shape_mismatch_is_format_error(model):
    data = model_to_json(model)
    dense = next(entry for entry in data["layers"] if entry["kind"] == "dense")
    dense["bias"]["shape"] = [1]
    dense["bias"]["data"] = base64.b64encode(np.zeros(1, dtype="<f8").tobytes()).decode("ascii")
    with pytest.raises(ModelFormatError):
        model_from_json(data)
