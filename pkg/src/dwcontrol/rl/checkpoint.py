"""Versioned binary checkpoints: magic bytes, JSON shape table, raw float64.

Layout: 8-byte magic, uint32 format version, uint64 header length, UTF-8
JSON header (shape table, config, counters, RNG states), then every array
as little-endian float64 in the order fixed by the header.  Round-trips are
bit-exact; loads are validated against the requesting configuration.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import CheckpointCorruptError, CheckpointShapeError, CheckpointVersionError
from .ppo import Adam, PpoConfig, PPOTrainer

MAGIC = b"DWCHKPT\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    cfg: PpoConfig
    iteration: int
    total_steps: int
    lr: float
    rng_states: dict

    @classmethod
    def from_trainer(cls, trainer: PPOTrainer) -> "Checkpoint":
        rng_states = {
            "actions": trainer._rng_actions.bit_generator.state,
            "shuffle": trainer._rng_shuffle.bit_generator.state,
        }
        env_rngs = getattr(trainer.env, "_rngs", None)
        if env_rngs:
            rng_states["env"] = [rng.bit_generator.state for rng in env_rngs]
        return cls(
            params={k: v.copy() for k, v in trainer.params.items()},
            adam_m={k: v.copy() for k, v in trainer.adam.m.items()},
            adam_v={k: v.copy() for k, v in trainer.adam.v.items()},
            adam_t=trainer.adam.t,
            cfg=trainer.cfg,
            iteration=trainer.iteration,
            total_steps=trainer.total_steps,
            lr=trainer.lr,
            rng_states=rng_states,
        )

    def apply_to_trainer(self, trainer: PPOTrainer) -> None:
        trainer.params = {k: v.copy() for k, v in self.params.items()}
        trainer.adam = Adam(trainer.params)
        trainer.adam.m = {k: v.copy() for k, v in self.adam_m.items()}
        trainer.adam.v = {k: v.copy() for k, v in self.adam_v.items()}
        trainer.adam.t = self.adam_t
        trainer.iteration = self.iteration
        trainer.total_steps = self.total_steps
        trainer.lr = self.lr
        trainer._rng_actions.bit_generator.state = self.rng_states["actions"]
        trainer._rng_shuffle.bit_generator.state = self.rng_states["shuffle"]
        env_states = self.rng_states.get("env")
        env_rngs = getattr(trainer.env, "_rngs", None)
        if env_states and env_rngs and len(env_states) == len(env_rngs):
            for rng, state in zip(env_rngs, env_states):
                rng.bit_generator.state = state


def _array_table(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    table = [(f"params/{k}", v) for k, v in ckpt.params.items()]
    table += [(f"adam_m/{k}", v) for k, v in ckpt.adam_m.items()]
    table += [(f"adam_v/{k}", v) for k, v in ckpt.adam_v.items()]
    return table


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write (temp file + rename) of the full training state."""
    path = os.fspath(path)
    table = _array_table(ckpt)
    header = {
        "format_version": FORMAT_VERSION,
        "arrays": [[name, list(arr.shape)] for name, arr in table],
        "ppo_config": dataclasses.asdict(ckpt.cfg),
        "adam_t": ckpt.adam_t,
        "iteration": ckpt.iteration,
        "total_steps": ckpt.total_steps,
        "lr": ckpt.lr,
        "rng_states": ckpt.rng_states,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in table:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, expected_cfg: PpoConfig | None = None) -> Checkpoint:
    """Validated load; corrupt files, foreign versions and mismatched shapes
    raise distinct errors."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path}: missing checkpoint magic")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if offset + header_len > len(data):
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header: {exc}") from None
    offset += header_len
    cfg_dict = dict(header["ppo_config"])
    cfg_dict["hidden_sizes"] = tuple(cfg_dict["hidden_sizes"])
    cfg = PpoConfig(**cfg_dict)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise CheckpointCorruptError(f"{path}: truncated array {name}")
        arrays[name] = np.frombuffer(
            data, dtype="<f8", count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    ckpt = Checkpoint(
        params={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("params/")},
        adam_m={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        adam_v={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v/")},
        adam_t=int(header["adam_t"]),
        cfg=cfg,
        iteration=int(header["iteration"]),
        total_steps=int(header["total_steps"]),
        lr=float(header["lr"]),
        rng_states=header["rng_states"],
    )
    if expected_cfg is not None:
        from .network import parameter_layout

        expected_shapes = {
            name: shape
            for name, shape in parameter_layout(
                _infer_obs_dim(ckpt), tuple(expected_cfg.hidden_sizes)
            )
        }
        for name, arr in ckpt.params.items():
            if name not in expected_shapes or tuple(arr.shape) != tuple(expected_shapes[name]):
                raise CheckpointShapeError(
                    f"{path}: parameter {name} has shape {arr.shape}, "
                    f"expected {expected_shapes.get(name)}"
                )
    return ckpt


def _infer_obs_dim(ckpt: Checkpoint) -> int:
    return ckpt.params["shared.w"].shape[0]
