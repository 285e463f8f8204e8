"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"PYRF"            magic
    u32                format version (currently 1)
    u32                number of sections
    repeated:
        4 bytes        ASCII section tag
        u64            payload length in bytes
        payload

Sections, in this order:

    CONF  UTF-8 JSON: field config (grid, pyramid, bounds, shared_grid, dtype,
          seed), train config, iteration, occupancy-update count, step size,
          last samples-per-ray, rng bit-generator state, optimizer meta
          (per-group step counts), parameter layout
    PARM  parameter vector, dtype from CONF["field"]["dtype"] (float32 by default)
    ADMM  Adam first moments then second moments, same dtype and length as PARM
    SUPV  supervision grid: resolution**3 int16 min levels, then int16 max levels
    OCCU  occupancy grid: resolution**3 float32 estimates, then uint8 occupied
          flags, then one uint8 "initialized" flag
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoding import HashGridConfig
from .pyramid import PyramidConfig
from .training import TrainConfig, TrainState, build_field

MAGIC = b"PYRF"
VERSION = 1
TAGS = (b"CONF", b"PARM", b"ADMM", b"SUPV", b"OCCU")


def _le(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False).tobytes()


def _rng_state_to_json(state: dict) -> dict:
    return json.loads(json.dumps(state, default=int))


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    f = state.field
    conf = {
        "field": f.config_dict(),
        "train": state.config.to_dict(),
        "iteration": state.iteration,
        "occupancy_updates": state.occupancy_updates,
        "step_size": state.step_size,
        "last_samples_per_ray": state.last_samples_per_ray,
        "rng": _rng_state_to_json(state.rng.bit_generator.state),
        "optimizer": state.optimizer.state_dict(),
        "layout": f.store.layout(),
        "supervision_resolution": state.supervision.resolution,
        "occupancy_resolution": state.occupancy.resolution,
    }
    occ = state.occupancy
    sections = [
        (b"CONF", json.dumps(conf, sort_keys=True).encode("utf-8")),
        (b"PARM", _le(f.store.values)),
        (b"ADMM", _le(state.optimizer.m) + _le(state.optimizer.v)),
        (b"SUPV", _le(state.supervision.min_level) + _le(state.supervision.max_level)),
        (b"OCCU", _le(occ.estimates.astype(np.float32)) + _le(occ.occupied.astype(np.uint8))
         + bytes([int(occ.initialized)])),
    ]
    blob = bytearray(MAGIC + struct.pack("<II", VERSION, len(sections)))
    for tag, payload in sections:
        blob += tag + struct.pack("<Q", len(payload)) + payload
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(bytes(blob))
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_sections(path) -> dict[bytes, bytes]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    for _ in range(count):
        if pos + 12 > len(data):
            raise ValueError(f"{path}: truncated section header")
        tag = data[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", data, pos + 4)
        pos += 12
        if pos + length > len(data):
            raise ValueError(f"{path}: section {tag!r} is truncated")
        out[tag] = data[pos:pos + length]
        pos += length
    missing = [t.decode() for t in TAGS if t not in out]
    if missing:
        raise ValueError(f"{path}: missing sections {missing}")
    return out


def load_checkpoint(path) -> TrainState:
    sec = read_sections(path)
    conf = json.loads(sec[b"CONF"].decode("utf-8"))
    fc = conf["field"]
    train_cfg = TrainConfig.from_dict(conf["train"])
    field = build_field(PyramidConfig.from_dict(fc["pyramid"]), HashGridConfig(**fc["grid"]), fc["bounds"],
                        fc["shared_grid"], fc["dtype"], fc["seed"])
    if field.store.layout() != conf["layout"]:
        raise ValueError(f"{path}: parameter layout does not match the configuration")
    dt = field.store.dtype.newbyteorder("<")
    n = field.store.size
    field.store.values[...] = np.frombuffer(sec[b"PARM"], dtype=dt, count=n)
    state = TrainState.create(field, train_cfg, float(conf["step_size"]))
    moments = np.frombuffer(sec[b"ADMM"], dtype=dt, count=2 * n)
    state.optimizer.load_state(conf["optimizer"], moments[:n], moments[n:])
    cells = state.supervision.resolution ** 3
    sup = np.frombuffer(sec[b"SUPV"], dtype="<i2", count=2 * cells)
    state.supervision.min_level[...] = sup[:cells]
    state.supervision.max_level[...] = sup[cells:]
    occ = state.occupancy
    ocells = occ.resolution ** 3
    raw = sec[b"OCCU"]
    occ.estimates = np.frombuffer(raw, dtype="<f4", count=ocells).astype(np.float32)
    occ.occupied = np.frombuffer(raw, dtype=np.uint8, count=ocells, offset=4 * ocells).astype(bool)
    occ.initialized = bool(raw[5 * ocells])
    state.iteration = int(conf["iteration"])
    state.occupancy_updates = int(conf["occupancy_updates"])
    state.last_samples_per_ray = float(conf["last_samples_per_ray"])
    state.rng.bit_generator.state = conf["rng"]
    return state
