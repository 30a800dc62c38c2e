"""Checkpoint round-trips and failure modes."""
import json
import os

import numpy as np
import pytest

from odenet.checkpoint import load_checkpoint, save_checkpoint
from odenet.errors import DataError
from odenet.lesion import remove_block
from odenet.model import ResNetSpec, build_model, forward


def spec_small(**kw):
    base = dict(blocks_per_stage=(2, 1, 1), base_filters=(4, 4, 4),
                input_channels=3, input_hw=8)
    base.update(kw)
    return ResNetSpec(**base)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_bit_exact(tmp_path, dtype):
    model = build_model(spec_small(), seed=7, dtype=dtype)
    # perturb running stats so non-trainables carry real state
    forward(model, np.random.default_rng(0).normal(size=(4, 3, 8, 8)).astype(dtype),
            mode="train")
    save_checkpoint(model, str(tmp_path))
    loaded = load_checkpoint(str(tmp_path))
    assert loaded.spec == model.spec
    assert loaded.dtype == model.dtype
    a = {p.name: p for p in model.parameters()}
    b = {p.name: p for p in loaded.parameters()}
    assert set(a) == set(b)
    for name in a:
        assert a[name].value.dtype == b[name].value.dtype
        assert np.array_equal(a[name].value.data, b[name].value.data), name
    x = np.random.default_rng(1).normal(size=(2, 3, 8, 8)).astype(dtype)
    la, _ = forward(model, x, mode="eval")
    lb, _ = forward(loaded, x, mode="eval")
    assert np.array_equal(la.data, lb.data)


def test_momentum_buffers_not_saved(tmp_path):
    model = build_model(spec_small(), seed=0)
    model.initial_conv.momentum_buffer.data[:] = 5.0
    save_checkpoint(model, str(tmp_path))
    loaded = load_checkpoint(str(tmp_path))
    assert not loaded.initial_conv.momentum_buffer.data.any()


def test_manifest_contents(tmp_path):
    model = build_model(spec_small(), seed=0)
    save_checkpoint(model, str(tmp_path))
    with open(tmp_path / "manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["format_version"] == 1
    assert manifest["spec"]["blocks_per_stage"] == [2, 1, 1]
    assert manifest["dtype"] == "float32"
    names = {e["name"] for e in manifest["params"]}
    assert "stage0.block1.conv2" in names
    assert "stage0.block0.bn1.running_mean" in names  # running stats ride along
    entry = next(e for e in manifest["params"] if e["name"] == "initial_conv")
    assert entry["shape"] == [4, 3, 3, 3]
    assert os.path.exists(tmp_path / "params" / entry["file"])


def test_missing_manifest_raises_data_error(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(str(tmp_path / "nope"))


def test_corrupt_manifest_raises_data_error(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError):
        load_checkpoint(str(tmp_path))


def test_truncated_blob_raises_data_error(tmp_path):
    model = build_model(spec_small(), seed=0)
    save_checkpoint(model, str(tmp_path))
    blob = tmp_path / "params" / "initial_conv.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(DataError) as ei:
        load_checkpoint(str(tmp_path))
    assert "initial_conv" in str(ei.value)


def test_missing_parameter_raises_data_error(tmp_path):
    model = build_model(spec_small(), seed=0)
    save_checkpoint(model, str(tmp_path))
    with open(tmp_path / "manifest.json") as fh:
        manifest = json.load(fh)
    manifest["params"] = [e for e in manifest["params"]
                          if e["name"] != "classifier.bias"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        load_checkpoint(str(tmp_path))


def test_poolpad_structure_round_trips(tmp_path):
    model = build_model(spec_small(blocks_per_stage=(2, 2, 2)), seed=3,
                        dtype=np.float64)
    lesioned = remove_block(model, stage=1, index=0, force=True)
    save_checkpoint(lesioned, str(tmp_path))
    loaded = load_checkpoint(str(tmp_path))
    from odenet.model import PoolPadBlock
    assert isinstance(loaded.stages[1][0], PoolPadBlock)
    x = np.random.default_rng(2).normal(size=(2, 3, 8, 8))
    la, _ = forward(lesioned, x, mode="eval")
    lb, _ = forward(loaded, x, mode="eval")
    assert np.array_equal(la.data, lb.data)
