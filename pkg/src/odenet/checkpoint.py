"""Checkpoint format: a directory with a JSON manifest plus one raw
little-endian binary blob per parameter.

The manifest records the architecture spec, the model dtype, the block
kind layout of each stage (so lesioned models with pool-pad stand-ins
rebuild correctly), and for every parameter its name, dtype, shape, and
blob file. Values round-trip bit-exactly. Running statistics are saved;
optimizer momentum buffers are not, a checkpoint captures the model, not
the optimizer.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError
from .model import BlockParams, PoolPadBlock, ResNetModel, ResNetSpec, build_model

__all__ = ["save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1

_LE = {"float32": "<f4", "float64": "<f8"}


def _spec_dict(spec: ResNetSpec) -> dict:
    return {
        "blocks_per_stage": list(spec.blocks_per_stage),
        "base_filters": list(spec.base_filters),
        "width_multiplier": spec.width_multiplier,
        "step_size": spec.step_size,
        "step_size_mode": spec.step_size_mode,
        "input_channels": spec.input_channels,
        "input_hw": spec.input_hw,
        "num_classes": spec.num_classes,
    }


def _spec_from_dict(d: dict) -> ResNetSpec:
    return ResNetSpec(
        blocks_per_stage=tuple(d["blocks_per_stage"]),
        base_filters=tuple(d["base_filters"]),
        width_multiplier=d["width_multiplier"],
        step_size=d["step_size"],
        step_size_mode=d["step_size_mode"],
        input_channels=d["input_channels"],
        input_hw=d["input_hw"],
        num_classes=d["num_classes"],
    )


def save_checkpoint(model: ResNetModel, directory: str) -> None:
    params_dir = os.path.join(directory, "params")
    os.makedirs(params_dir, exist_ok=True)
    entries = []
    for p in model.parameters():
        dt = str(p.value.dtype)
        if dt not in _LE:
            raise ValueError(f"cannot checkpoint dtype {dt}")
        fname = p.name + ".bin"
        with open(os.path.join(params_dir, fname), "wb") as fh:
            fh.write(np.asarray(p.value.data, dtype=_LE[dt]).tobytes())
        entries.append({"name": p.name, "dtype": dt,
                        "shape": list(p.value.shape), "file": fname})
    stage_kinds = []
    for stage in model.stages:
        kinds = []
        for block in stage:
            if isinstance(block, PoolPadBlock):
                kinds.append({"kind": "poolpad", "in_channels": block.in_channels,
                              "out_channels": block.out_channels})
            else:
                kinds.append({"kind": "residual"})
        stage_kinds.append(kinds)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": _spec_dict(model.spec),
        "dtype": str(model.dtype),
        "stage_kinds": stage_kinds,
        "params": entries,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory: str) -> ResNetModel:
    """Rebuild a model from :func:`save_checkpoint` output, bit-exactly."""
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no checkpoint manifest at {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt checkpoint manifest {path}: {e}")
    try:
        if manifest["format_version"] != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {manifest['format_version']}")
        spec = _spec_from_dict(manifest["spec"])
        dtype = np.dtype(manifest["dtype"])
        stage_kinds = manifest["stage_kinds"]
        entries = manifest["params"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"corrupt checkpoint manifest {path}: {e!r}")

    model = build_model(spec, seed=0, dtype=dtype)
    for s, kinds in enumerate(stage_kinds):
        if len(kinds) != len(model.stages[s]):
            raise DataError(f"stage {s} kind list does not match spec")
        for i, kind in enumerate(kinds):
            if kind["kind"] == "poolpad":
                model.stages[s][i] = PoolPadBlock(kind["in_channels"],
                                                  kind["out_channels"])
            elif kind["kind"] != "residual":
                raise DataError(f"unknown block kind {kind['kind']!r}")

    by_name = {p.name: p for p in model.parameters()}
    seen = set()
    for entry in entries:
        name = entry["name"]
        p = by_name.get(name)
        if p is None:
            raise DataError(f"checkpoint has unexpected parameter {name!r}")
        shape = tuple(entry["shape"])
        if shape != p.value.shape:
            raise DataError(
                f"parameter {name!r}: checkpoint shape {shape} vs model {p.value.shape}")
        blob_path = os.path.join(directory, "params", entry["file"])
        try:
            with open(blob_path, "rb") as fh:
                raw = fh.read()
        except FileNotFoundError:
            raise DataError(f"missing checkpoint blob {blob_path}")
        le = _LE.get(entry["dtype"])
        if le is None:
            raise DataError(f"parameter {name!r}: bad dtype {entry['dtype']!r}")
        arr = np.frombuffer(raw, dtype=le)
        if arr.size != p.value.size:
            raise DataError(
                f"parameter {name!r}: blob holds {arr.size} values, expected {p.value.size}")
        p.value.data = arr.reshape(shape).astype(entry["dtype"], copy=True)
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise DataError(f"checkpoint is missing parameters: {sorted(missing)[:4]} ...")
    return model
