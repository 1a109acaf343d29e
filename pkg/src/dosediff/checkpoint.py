"""Binary checkpoints: full-precision parameters, optimizer state, RNG
state, and a config echo. Saving the same state twice yields identical
bytes (no timestamps), and save -> load -> save is byte-identical.

Layout (little-endian):

    magic b"SPCK" | u16 version | u32 json_len | JSON header
    then per parameter, in header order: data f64 | m f64 | v f64
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .config import RunConfig, config_from_dict, config_to_dict
from .optim import ParamStore
from .phantom import BadMagicError, TruncatedFileError, VersionError

CKPT_MAGIC = b"SPCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    rng_state: dict
    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    opt_steps: Dict[str, int]


def save_checkpoint(path, cfg: RunConfig, store: ParamStore, step: int,
                    rng: np.random.Generator) -> None:
    names = store.names()
    header = {
        "version": CKPT_VERSION,
        "config": config_to_dict(cfg),
        "step": int(step),
        "rng_state": rng.bit_generator.state,
        "params": [{"name": n, "shape": list(store[n].shape)} for n in names],
        "opt_steps": {n: store.steps[n] for n in names},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(blob)) + blob)
        for n in names:
            f.write(np.ascontiguousarray(store[n].data, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(store.m[n], dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(store.v[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 10:
        raise TruncatedFileError(f"checkpoint too short ({len(buf)} bytes)")
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {buf[:4]!r}")
    version, jsize = struct.unpack("<HI", buf[4:10])
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    if len(buf) < 10 + jsize:
        raise TruncatedFileError("truncated checkpoint header")
    header = json.loads(buf[10:10 + jsize].decode("utf-8"))
    cfg = config_from_dict(header["config"])
    params: Dict[str, np.ndarray] = {}
    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}
    off = 10 + jsize
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        for target in (params, m, v):
            if off + nbytes > len(buf):
                raise TruncatedFileError(f"truncated tensor data for {entry['name']!r}")
            target[entry["name"]] = np.frombuffer(
                buf[off:off + nbytes], dtype="<f8").reshape(shape).copy()
            off += nbytes
    return Checkpoint(
        config=cfg,
        step=int(header["step"]),
        rng_state=header["rng_state"],
        params=params, m=m, v=v,
        opt_steps={k: int(x) for k, x in header["opt_steps"].items()},
    )


def restore_into(store: ParamStore, ckpt: Checkpoint) -> None:
    """Overwrite a freshly built store with checkpointed state."""
    if set(store.names()) != set(ckpt.params):
        missing = set(store.names()) ^ set(ckpt.params)
        raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)[:5]}...")
    for n in store.names():
        if store[n].shape != ckpt.params[n].shape:
            raise ValueError(f"shape mismatch for {n!r}: "
                             f"{store[n].shape} vs {ckpt.params[n].shape}")
        store[n].data = ckpt.params[n]
        store.m[n] = ckpt.m[n]
        store.v[n] = ckpt.v[n]
        store.steps[n] = ckpt.opt_steps[n]
