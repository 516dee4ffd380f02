#!/usr/bin/env python3
"""
Checkpoint container for RGNs and standalone models.

A checkpoint is a numpy ``.npz`` archive holding a JSON manifest under
``__manifest__`` and one array per state tensor. RGN replica arrays are
named ``block{i}.replica{j}.<param>``, layers outside the scope
``shared.<layer>.<param>`` and standalone layers ``layers.<layer>.<param>``.
Optimizer momentum buffers are stored as ``optim.<index>.momentum_buffer``
so that a resumed run continues bit-exactly.
"""

import re
import json
import logging
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np
import torch

from eio.archspec import parse_arch, make_scope, build_rgn_spec
from eio.rgn import (RGNModel, StandaloneModel, Provenance, count_paths,
        parameter_hash)


logger = logging.getLogger(__name__)

MANIFEST_KEY = "__manifest__"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict = field(default_factory=dict)
    optim_arrays: dict = field(default_factory=dict)

    @property
    def kind(self):
        return self.manifest["kind"]

    @property
    def counters(self):
        return self.manifest.get("counters", {})

    @property
    def rng_state(self):
        return self.manifest.get("rng_state")


class ArrayNames:
    p_block = re.compile(R"^blocks\.(?P<i>\d+)\.replicas\.(?P<j>\d+)\.(?P<rest>.+)$")
    p_replica = re.compile(R"^block(?P<i>\d+)\.replica(?P<j>\d+)\.(?P<rest>.+)$")

    @classmethod
    def to_array(cls, state_key):
        m = cls.p_block.match(state_key)
        if m:
            return f"block{m['i']}.replica{m['j']}.{m['rest']}"
        return state_key

    @classmethod
    def to_state(cls, array_name):
        m = cls.p_replica.match(array_name)
        if m:
            return f"blocks.{m['i']}.replicas.{m['j']}.{m['rest']}"
        return array_name


def _write(path, manifest, arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    payload = {MANIFEST_KEY: np.array(json.dumps(manifest, sort_keys=True))}
    payload.update(arrays)
    with tmp.open("wb") as f:
        np.savez(f, **payload)
    tmp.replace(path)
    logger.info(f"Wrote {manifest['kind']} checkpoint: {path}")


def _state_arrays(model):
    return {
            ArrayNames.to_array(key): value.detach().cpu().numpy()
            for key, value in model.state_dict().items()
    }


def _optimizer_payload(optimizer):
    if optimizer is None:
        return None, {}
    state = optimizer.state_dict()
    arrays = {}
    for index, buffers in state["state"].items():
        for name, value in buffers.items():
            if isinstance(value, torch.Tensor):
                arrays[f"optim.{index}.{name}"] = value.detach().cpu().numpy()
    return state["param_groups"], arrays


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            manifest = json.loads(str(data[MANIFEST_KEY]))
            arrays = {}
            optim_arrays = {}
            for key in data.files:
                if key == MANIFEST_KEY:
                    continue
                if key.startswith("optim."):
                    optim_arrays[key] = data[key]
                else:
                    arrays[key] = data[key]
    except (OSError, ValueError, KeyError) as err:
        raise CheckpointError(f"Unreadable checkpoint {path}: {err}") from err
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format: {manifest.get('format')}")
    return Checkpoint(manifest, arrays, optim_arrays)


def read_manifest(path):
    return read_checkpoint(path).manifest


def _load_state(model, arrays, path):
    dtypes = {a.dtype for a in arrays.values() if np.issubdtype(a.dtype, np.floating)}
    if len(dtypes) == 1:
        model.to(dtype=torch.from_numpy(np.zeros(0, dtype=dtypes.pop())).dtype)
    state = {
            ArrayNames.to_state(name): torch.from_numpy(np.array(value))
            for name, value in arrays.items()
    }
    try:
        model.load_state_dict(state)
    except RuntimeError as err:
        raise CheckpointError(f"Parameter mismatch in {path}: {err}") from err
    return model


def save_rgn(rgn, path, seed=0, rng_state=None, counters=None, optimizer=None,
             config_hash=None, extra=None):
    """Write an RGN checkpoint and return its manifest."""
    spec = rgn.spec
    param_groups, optim_arrays = _optimizer_payload(optimizer)
    manifest = {
            "format": FORMAT_VERSION,
            "kind": "rgn",
            "arch_name": spec.base.name,
            "arch_text": spec.base.to_text(),
            "scope": spec.scope.describe(),
            "gated_ids": list(spec.gated_ids),
            "n": spec.n,
            "L": spec.L,
            "m": spec.m,
            "path_count": count_paths(spec),
            "degenerate": spec.is_degenerate,
            "spec_hash": spec.digest(),
            "param_hash": parameter_hash(rgn),
            "seed": seed,
            "rng_state": rng_state,
            "counters": counters or {},
            "optimizer": param_groups,
            "config_hash": config_hash,
            "extra": extra or {},
    }
    if spec.is_degenerate:
        manifest["note"] = "degenerate: equivalent to base network"
    arrays = _state_arrays(rgn)
    arrays.update(optim_arrays)
    _write(path, manifest, arrays)
    return manifest


def load_rgn(path, expected_spec_hash=None):
    """Rebuild an RGN from a checkpoint; returns ``(rgn, checkpoint)``."""
    ckpt = read_checkpoint(path)
    if ckpt.kind != "rgn":
        raise CheckpointError(f"Expected an rgn checkpoint, got {ckpt.kind}: {path}")
    manifest = ckpt.manifest
    arch = parse_arch(manifest["arch_text"], name=manifest["arch_name"])
    scope = make_scope(arch, manifest["scope"])
    spec = build_rgn_spec(arch, scope, int(manifest["n"]))
    if spec.digest() != manifest["spec_hash"]:
        raise CheckpointError(f"Spec hash mismatch in manifest: {path}")
    if expected_spec_hash is not None and spec.digest() != expected_spec_hash:
        raise CheckpointError(f"Checkpoint {path} was built for a different RGN spec")
    rgn = RGNModel(spec, seed=int(manifest.get("seed") or 0))
    _load_state(rgn, ckpt.arrays, path)
    return rgn, ckpt


def restore_optimizer(optimizer, ckpt):
    """Load saved momentum buffers and parameter groups into ``optimizer``."""
    groups = ckpt.manifest.get("optimizer")
    if groups is None:
        return optimizer
    state = {}
    for name, value in ckpt.optim_arrays.items():
        _, index, buffer = name.split(".", 2)
        state.setdefault(int(index), {})[buffer] = torch.from_numpy(np.array(value))
    try:
        optimizer.load_state_dict({"state": state, "param_groups": groups})
    except (ValueError, KeyError) as err:
        raise CheckpointError(f"Optimizer state does not match: {err}") from err
    return optimizer


def save_standalone(model, path, config_hash=None, extra=None):
    manifest = {
            "format": FORMAT_VERSION,
            "kind": "standalone",
            "arch_name": model.arch.name,
            "arch_text": model.arch.to_text(),
            "provenance": model.provenance.to_dict(),
            "param_hash": parameter_hash(model),
            "config_hash": config_hash,
            "extra": extra or {},
    }
    _write(path, manifest, _state_arrays(model))
    return manifest


def load_standalone(path):
    """Returns ``(model, checkpoint)``; provenance is restored exactly."""
    ckpt = read_checkpoint(path)
    if ckpt.kind != "standalone":
        raise CheckpointError(f"Expected a standalone checkpoint, got {ckpt.kind}: {path}")
    manifest = ckpt.manifest
    arch = parse_arch(manifest["arch_text"], name=manifest["arch_name"])
    provenance = Provenance.from_dict(manifest["provenance"])
    model = StandaloneModel(arch, provenance=provenance)
    _load_state(model, ckpt.arrays, path)
    return model, ckpt


def load_model(path):
    """Standalone model, or the single path of a degenerate RGN."""
    kind = read_manifest(path)["kind"]
    if kind == "standalone":
        return load_standalone(path)[0]
    rgn, _ = load_rgn(path)
    if rgn.n != 1:
        raise CheckpointError(f"RGN with n={rgn.n} has no single model; derive paths first: {path}")
    return rgn


def dump_distilled(batch, path):
    """Store a distilled batch for inspection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        np.savez(
                f,
                x_prime=batch.x_prime.detach().cpu().numpy(),
                y_s=batch.y_s.detach().cpu().numpy(),
                path=np.array(batch.path.gates),
                layer=np.array(batch.layer),
                objective_trace=np.array(batch.objective_trace, dtype=float),
        )
