"""Binary containers for model state ("CIGC") and latent-code rows ("CIGW").

A checkpoint is a single file: magic "CIGC", u32 version, u64 length of a
canonical JSON header, the header, then the raw little-endian bytes of every
array in header order. Arrays are namespaced by role, e.g. "generator/...",
"optimizer/...", "rng_state/...". The header carries stage, step, config_hash
and an "extra" dict with whatever is needed to rebuild the networks.

Writing the same state twice produces byte-identical files, which the
determinism checks rely on.
"""

import json
import os
import struct

import numpy as np
import torch

from .errors import MissingCheckpointError

CKPT_MAGIC = b"CIGC"
CKPT_VERSION = 1
LATENT_MAGIC = b"CIGW"
LATENT_VERSION = 1


class Checkpoint:
    def __init__(self, stage: int, step: int, config_hash: str, arrays=None, extra=None):
        self.stage = stage
        self.step = step
        self.config_hash = config_hash
        self.arrays = dict(arrays or {})
        self.extra = dict(extra or {})

    def put_state_dict(self, prefix: str, state_dict) -> None:
        """Flatten a torch state_dict under `prefix/`."""
        for name, tensor in state_dict.items():
            self.arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()

    def get_state_dict(self, prefix: str) -> dict:
        pre = prefix + "/"
        out = {}
        for key, arr in self.arrays.items():
            if key.startswith(pre):
                out[key[len(pre):]] = torch.from_numpy(arr.copy())
        return out

    def put_optimizer(self, prefix: str, optimizer) -> None:
        sd = optimizer.state_dict()
        self.extra.setdefault("optimizers", {})[prefix] = sd["param_groups"]
        for idx, state in sd["state"].items():
            for name, value in state.items():
                if isinstance(value, torch.Tensor):
                    arr = value.detach().cpu().numpy()
                else:
                    arr = np.asarray(value)
                self.arrays[f"{prefix}/state/{idx}/{name}"] = arr

    def load_optimizer(self, prefix: str, optimizer) -> None:
        groups = self.extra.get("optimizers", {}).get(prefix)
        if groups is None:
            return
        pre = prefix + "/state/"
        state = {}
        for key, arr in self.arrays.items():
            if not key.startswith(pre):
                continue
            idx_str, name = key[len(pre):].split("/", 1)
            state.setdefault(int(idx_str), {})[name] = torch.from_numpy(arr.copy())
        sd = optimizer.state_dict()
        for g_new, g_old in zip(groups, sd["param_groups"]):
            g_new["params"] = g_old["params"]
        optimizer.load_state_dict({"state": state, "param_groups": groups})

    def put_rng(self, name: str, generator: torch.Generator) -> None:
        self.arrays[f"rng_state/{name}"] = generator.get_state().numpy()

    def load_rng(self, name: str, generator: torch.Generator) -> None:
        arr = self.arrays[f"rng_state/{name}"]
        generator.set_state(torch.from_numpy(arr.copy()))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.arrays)
    header = {
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra,
        "arrays": [
            {"name": n, "dtype": ckpt.arrays[n].dtype.str, "shape": list(ckpt.arrays[n].shape)}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            arr = ckpt.arrays[n]
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, str(path))


def load_checkpoint(path) -> Checkpoint:
    if not os.path.exists(str(path)):
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    with open(str(path), "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r}): {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = f.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return Checkpoint(header["stage"], header["step"], header["config_hash"],
                      arrays=arrays, extra=header["extra"])


def write_latents(path, codes: np.ndarray) -> None:
    """Write an N x d_w float32 matrix as a fresh latent-code file."""
    codes = np.ascontiguousarray(codes, dtype="<f4")
    if codes.ndim != 2:
        raise ValueError("latent codes must be a 2-D array")
    with open(str(path), "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(struct.pack("<I", codes.shape[1]))
        f.write(struct.pack("<Q", codes.shape[0]))
        f.write(codes.tobytes())


def append_latents(path, codes: np.ndarray) -> None:
    """Append rows to an existing latent-code file (creates it if absent)."""
    codes = np.atleast_2d(np.asarray(codes, dtype="<f4"))
    if not os.path.exists(str(path)):
        write_latents(path, codes)
        return
    with open(str(path), "r+b") as f:
        magic = f.read(4)
        if magic != LATENT_MAGIC:
            raise ValueError(f"not a latent-code file: {path}")
        (dim,) = struct.unpack("<I", f.read(4))
        (count,) = struct.unpack("<Q", f.read(8))
        if codes.shape[1] != dim:
            raise ValueError(f"dimension mismatch: file has d={dim}, rows have d={codes.shape[1]}")
        f.seek(0, os.SEEK_END)
        f.write(np.ascontiguousarray(codes).tobytes())
        f.seek(8)
        f.write(struct.pack("<Q", count + codes.shape[0]))


def read_latents(path) -> np.ndarray:
    with open(str(path), "rb") as f:
        magic = f.read(4)
        if magic != LATENT_MAGIC:
            raise ValueError(f"not a latent-code file: {path}")
        (dim,) = struct.unpack("<I", f.read(4))
        (count,) = struct.unpack("<Q", f.read(8))
        data = f.read(count * dim * 4)
    return np.frombuffer(data, dtype="<f4").reshape(count, dim).copy()
