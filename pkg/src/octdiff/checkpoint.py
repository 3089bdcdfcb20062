"""Self-describing checkpoint archives.

A checkpoint is a single zip file:

    manifest.json             network config, schedule betas, counters, seed,
                              and the name/shape/dtype of every array
    params/<name>.bin         model arrays, raw little-endian bytes, C order
    optim/<name>.<slot>.bin   Adam moment arrays (present after training)

Floats in the manifest round-trip exactly (JSON uses repr), and archive
entries carry a fixed timestamp so identical checkpoints are identical bytes.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch

from .diffusion import VarianceSchedule, schedule_from_betas
from .errors import ConfigError
from .model import EpsilonPredictor, NetworkConfig

_FORMAT = "octdiff.checkpoint"
_VERSION = 1
_EPOCH_TIMESTAMP = (1980, 1, 1, 0, 0, 0)
_OPT_SLOTS = ("exp_avg", "exp_avg_sq")


@dataclass
class Checkpoint:
    network: NetworkConfig
    state: dict[str, np.ndarray]
    schedule: VarianceSchedule
    train_config: dict[str, Any] | None = None
    optimizer: dict[str, Any] | None = None
    epoch: int = 0
    global_step: int = 0
    seed: int | None = None

    @classmethod
    def from_model(
        cls,
        model: EpsilonPredictor,
        schedule: VarianceSchedule,
        optimizer: torch.optim.Optimizer | None = None,
        **kwargs,
    ) -> "Checkpoint":
        state = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}
        opt_state = None
        if optimizer is not None:
            opt_state = _optimizer_to_arrays(optimizer, model)
        return cls(
            network=model.config, state=state, schedule=schedule,
            optimizer=opt_state, **kwargs,
        )

    def build_model(self) -> EpsilonPredictor:
        model = EpsilonPredictor(self.network)
        tensors = {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}
        model.load_state_dict(tensors)
        return model

    def build_optimizer(self, model: EpsilonPredictor) -> torch.optim.Optimizer:
        if self.optimizer is None:
            raise ConfigError("checkpoint carries no optimizer state")
        return _arrays_to_optimizer(self.optimizer, model)


def _optimizer_to_arrays(optimizer: torch.optim.Optimizer, model: EpsilonPredictor) -> dict:
    """Re-key Adam state from parameter ids to parameter names."""
    names = [name for name, _ in model.named_parameters()]
    sd = optimizer.state_dict()
    entries = {}
    for idx, st in sd["state"].items():
        entry: dict[str, Any] = {"step": float(st["step"])}
        for slot in _OPT_SLOTS:
            entry[slot] = st[slot].detach().numpy().copy()
        entries[names[idx]] = entry
    groups = [
        {k: v for k, v in g.items() if k != "params"} for g in sd["param_groups"]
    ]
    return {"param_groups": groups, "state": entries}


def _arrays_to_optimizer(opt_state: dict, model: EpsilonPredictor) -> torch.optim.Optimizer:
    names = [name for name, _ in model.named_parameters()]
    group = dict(opt_state["param_groups"][0])
    optimizer = torch.optim.Adam(model.parameters(), lr=group.get("lr", 1e-4))
    state = {}
    for idx, name in enumerate(names):
        if name not in opt_state["state"]:
            continue
        entry = opt_state["state"][name]
        state[idx] = {
            "step": torch.tensor(entry["step"]),
            **{slot: torch.from_numpy(entry[slot].copy()) for slot in _OPT_SLOTS},
        }
    optimizer.load_state_dict(
        {
            "state": state,
            "param_groups": [{**group, "params": list(range(len(names))) }],
        }
    )
    return optimizer


def _little_endian(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH_TIMESTAMP)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest: dict[str, Any] = {
        "format": _FORMAT,
        "version": _VERSION,
        "network": ckpt.network.to_dict(),
        "schedule": {"betas": [float(b) for b in ckpt.schedule.betas]},
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
        "seed": ckpt.seed,
        "params": [],
        "optimizer": None,
    }
    blobs: list[tuple[str, bytes]] = []
    for name in sorted(ckpt.state):
        arr = _little_endian(np.ascontiguousarray(ckpt.state[name]))
        manifest["params"].append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str}
        )
        blobs.append((f"params/{name}.bin", arr.tobytes()))
    if ckpt.optimizer is not None:
        entries = []
        for name in sorted(ckpt.optimizer["state"]):
            entry = ckpt.optimizer["state"][name]
            meta = {"name": name, "step": entry["step"], "slots": {}}
            for slot in _OPT_SLOTS:
                arr = _little_endian(np.ascontiguousarray(entry[slot]))
                meta["slots"][slot] = {"shape": list(arr.shape), "dtype": arr.dtype.str}
                blobs.append((f"optim/{name}.{slot}.bin", arr.tobytes()))
            entries.append(meta)
        manifest["optimizer"] = {
            "param_groups": ckpt.optimizer["param_groups"],
            "entries": entries,
        }
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=1).encode())
        for name, payload in blobs:
            _write_entry(zf, name, payload)


def _read_array(zf: zipfile.ZipFile, name: str, shape, dtype) -> np.ndarray:
    raw = zf.read(name)
    return np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(shape).copy()


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != _FORMAT:
            raise ConfigError(f"{path} is not a checkpoint archive")
        state = {
            p["name"]: _read_array(zf, f"params/{p['name']}.bin", p["shape"], p["dtype"])
            for p in manifest["params"]
        }
        optimizer = None
        if manifest["optimizer"] is not None:
            entries = {}
            for meta in manifest["optimizer"]["entries"]:
                name = meta["name"]
                entry: dict[str, Any] = {"step": meta["step"]}
                for slot, spec in meta["slots"].items():
                    entry[slot] = _read_array(
                        zf, f"optim/{name}.{slot}.bin", spec["shape"], spec["dtype"]
                    )
                entries[name] = entry
            optimizer = {
                "param_groups": manifest["optimizer"]["param_groups"],
                "state": entries,
            }
    return Checkpoint(
        network=NetworkConfig.from_dict(manifest["network"]),
        state=state,
        schedule=schedule_from_betas(np.array(manifest["schedule"]["betas"])),
        train_config=manifest["train_config"],
        optimizer=optimizer,
        epoch=manifest["epoch"],
        global_step=manifest["global_step"],
        seed=manifest["seed"],
    )
