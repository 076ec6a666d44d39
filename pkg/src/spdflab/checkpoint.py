"""Portable checkpoint container and its binary file format.

Layout (all integers little-endian):

    bytes 0..7    magic  b"SPDFCKPT"
    bytes 8..11   uint32 header length H
    bytes 12..    header: UTF-8 JSON (format_version, model config, counters,
                  optimizer step, rng state, tensor and mask directories)
    then          tensor payload: each tensor raw '<f4', row-major, in
                  directory order (params, then opt_m, then opt_v)
    then          mask payload: np.packbits of each mask in directory order,
                  each padded to a whole byte

The header's directories give name and shape for every tensor/mask, so the
payload offsets are implied by cumulative sizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import GptModel, ModelConfig, Param
from .sparsity import MaskSet

MAGIC = b"SPDFCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    masks: MaskSet | None = None
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    opt_step: int = 0
    tokens_seen: int = 0
    step: int = 0
    rng_state: dict | None = None
    format_version: int = FORMAT_VERSION

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            masks=self.masks.copy() if self.masks is not None else None,
            opt_m={k: v.copy() for k, v in self.opt_m.items()} if self.opt_m else None,
            opt_v={k: v.copy() for k, v in self.opt_v.items()} if self.opt_v else None,
            opt_step=self.opt_step,
            tokens_seen=self.tokens_seen,
            step=self.step,
            rng_state=json.loads(json.dumps(self.rng_state)) if self.rng_state else None,
            format_version=self.format_version,
        )

    def build_model(self) -> GptModel:
        params = {}
        for name, value in self.params.items():
            decay = value.ndim >= 2
            params[name] = Param(name, value.copy(), decay=decay)
        return GptModel(self.config, params)

    @classmethod
    def from_model(
        cls,
        model: GptModel,
        masks: MaskSet | None = None,
        opt_state=None,
        tokens_seen: int = 0,
        step: int = 0,
        rng_state: dict | None = None,
    ) -> "Checkpoint":
        return cls(
            config=model.config,
            params={k: p.value.copy() for k, p in model.params.items()},
            masks=masks.copy() if masks is not None else None,
            opt_m={k: v.copy() for k, v in opt_state.m.items()} if opt_state else None,
            opt_v={k: v.copy() for k, v in opt_state.v.items()} if opt_state else None,
            opt_step=opt_state.step if opt_state else 0,
            tokens_seen=tokens_seen,
            step=step,
            rng_state=rng_state,
        )


def _directory(tensors: dict[str, np.ndarray]) -> list[dict]:
    return [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensor_groups = [("params", ckpt.params)]
    if ckpt.opt_m is not None:
        tensor_groups += [("opt_m", ckpt.opt_m), ("opt_v", ckpt.opt_v)]
    header = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.config.to_dict(),
        "tokens_seen": ckpt.tokens_seen,
        "step": ckpt.step,
        "opt_step": ckpt.opt_step,
        "rng_state": ckpt.rng_state,
        "has_masks": ckpt.masks is not None,
        "mask_seed": ckpt.masks.seed if ckpt.masks is not None else None,
        "tensors": {group: _directory(t) for group, t in tensor_groups},
        "masks": _directory(ckpt.masks.masks) if ckpt.masks is not None else [],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        for _, tensors in tensor_groups:
            for arr in tensors.values():
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if ckpt.masks is not None:
            for mask in ckpt.masks.masks.values():
                f.write(np.packbits(mask.ravel()).tobytes())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        (hlen,) = np.frombuffer(f.read(4), dtype="<u4")
        header = json.loads(f.read(int(hlen)).decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format {header['format_version']}")

        def read_group(directory):
            out = {}
            for entry in directory:
                shape = tuple(entry["shape"])
                n = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
                out[entry["name"]] = arr.astype(np.float32)
            return out

        groups = header["tensors"]
        params = read_group(groups["params"])
        opt_m = read_group(groups["opt_m"]) if "opt_m" in groups else None
        opt_v = read_group(groups["opt_v"]) if "opt_v" in groups else None
        masks = None
        if header["has_masks"]:
            md = {}
            for entry in header["masks"]:
                shape = tuple(entry["shape"])
                n = int(np.prod(shape))
                nbytes = (n + 7) // 8
                bits = np.unpackbits(np.frombuffer(f.read(nbytes), dtype=np.uint8))[:n]
                md[entry["name"]] = bits.astype(bool).reshape(shape)
            masks = MaskSet(md, seed=header["mask_seed"])
    return Checkpoint(
        config=ModelConfig.from_dict(header["model_config"]),
        params=params,
        masks=masks,
        opt_m=opt_m,
        opt_v=opt_v,
        opt_step=header["opt_step"],
        tokens_seen=header["tokens_seen"],
        step=header["step"],
        rng_state=header["rng_state"],
        format_version=header["format_version"],
    )
