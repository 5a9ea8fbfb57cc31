"""Bit-exact binary checkpoint format for experts and routers.

Layout (all integers little-endian):

    magic   4 bytes  "HDDM"
    version u32      format version (currently 1)
    header  {objective u8, schedule u8, n_blocks u16, width u16,
             data_dim u16, cond_count u16, step_count u64}
    tensors a sequence of {name_len u16, name utf-8, rank u8,
             dims u32 × rank, values f64 LE, C order}
    crc32   u32      CRC-32 of every preceding byte

Live parameters come first, then EMA parameters under the same names; the
reader switches sections at the first repeated name. A VP-generic schedule
ships its interpolation knots as reserved "schedule.*" tensors ahead of the
live section. Objective tags: 0 ε-prediction, 1 velocity, 2 router (the
router's schedule byte is written as 0 and ignored on read).

Writers are atomic (temp file + rename) and byte-deterministic, so two
identically-seeded training runs produce identical files.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .io_utils import atomic_write_bytes
from .netcore import ExpertModel, ModelConfig, ModulatedNet, RouterModel
from .objectives import Objective
from .schedules import Schedule, ScheduleKind

MAGIC = b"HDDM"
VERSION = 1
ROUTER_TAG = 2

_HEADER = struct.Struct("<BBHHHHQ")
_SCHEDULE_KEYS = ("schedule.knots_t", "schedule.knots_alpha", "schedule.knots_sigma")


def _pack_tensor(name: str, values: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(values, dtype="<f8")
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.tobytes())
    return b"".join(parts)


def serialize(model: ModulatedNet) -> bytes:
    if isinstance(model, ExpertModel):
        obj_tag = model.objective.tag
        sched = model.schedule
        sched_tag = sched.kind.tag
    elif isinstance(model, RouterModel):
        obj_tag = ROUTER_TAG
        sched = None
        sched_tag = 0
    else:
        raise CheckpointError(f"cannot serialize model type {type(model).__name__}")

    cfg = model.config
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += _HEADER.pack(
        obj_tag, sched_tag, cfg.n_blocks, cfg.width, cfg.data_dim, cfg.cond_count,
        model.step_count,
    )
    if sched is not None and sched.kind is ScheduleKind.VP_GENERIC:
        out += _pack_tensor("schedule.knots_t", sched.knots_t)
        out += _pack_tensor("schedule.knots_alpha", sched.knots_alpha)
        out += _pack_tensor("schedule.knots_sigma", sched.knots_sigma)
    for name, values in model.params.items():
        out += _pack_tensor(name, values)
    for name, values in model.ema.items():
        out += _pack_tensor(name, values)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(model: ModulatedNet, path) -> None:
    atomic_write_bytes(path, serialize(model))


@dataclass
class RawCheckpoint:
    objective_tag: int
    schedule_tag: int
    n_blocks: int
    width: int
    data_dim: int
    cond_count: int
    step_count: int
    live: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    schedule_knots: dict[str, np.ndarray]

    def schedule(self) -> Schedule | None:
        if self.objective_tag == ROUTER_TAG:
            return None
        kind = ScheduleKind(self.schedule_tag)
        if kind is ScheduleKind.LINEAR:
            return Schedule.linear()
        if kind is ScheduleKind.COSINE:
            return Schedule.cosine()
        if set(self.schedule_knots) != set(_SCHEDULE_KEYS):
            raise CheckpointError("VP-generic checkpoint is missing its schedule knots")
        return Schedule.vp_generic(
            self.schedule_knots["schedule.knots_t"],
            self.schedule_knots["schedule.knots_alpha"],
            self.schedule_knots["schedule.knots_sigma"],
        )


def read_raw(path) -> RawCheckpoint:
    data = Path(path).read_bytes()
    if len(data) < 4 + 4 + _HEADER.size + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not an HDDM checkpoint)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version mismatch (file {version}, reader {VERSION})"
        )
    (crc_stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc_stored:
        raise CheckpointError(f"{path}: CRC failure, checkpoint payload is corrupt")

    fields = _HEADER.unpack_from(data, 8)
    pos = 8 + _HEADER.size
    end = len(data) - 4

    knots: dict[str, np.ndarray] = {}
    live: dict[str, np.ndarray] = {}
    ema: dict[str, np.ndarray] = {}
    section = live
    while pos < end:
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            values = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated tensor record ({exc})") from None
        if pos > end:
            raise CheckpointError(f"{path}: tensor record overruns payload")
        arr = values.reshape(dims).astype(np.float64)
        if name in _SCHEDULE_KEYS:
            knots[name] = arr
            continue
        if section is live and name in live:
            section = ema
        section[name] = arr
    if set(live) != set(ema):
        raise CheckpointError(f"{path}: live and EMA parameter sets differ")
    return RawCheckpoint(*fields[:2], *fields[2:7], live, ema, knots)


def load_checkpoint(path, ema_decay: float = 0.9999) -> ExpertModel | RouterModel:
    raw = read_raw(path)
    if raw.objective_tag == ROUTER_TAG:
        out_dim = raw.live["head.w"].shape[0]
        cfg = ModelConfig(raw.n_blocks, raw.width, raw.data_dim, 0, out_dim=out_dim)
        model: ModulatedNet = RouterModel(cfg, seed=0, ema_decay=ema_decay)
    else:
        cfg = ModelConfig(raw.n_blocks, raw.width, raw.data_dim, raw.cond_count)
        model = ExpertModel(
            cfg, Objective(raw.objective_tag), raw.schedule(), seed=0, ema_decay=ema_decay
        )
    mismatched = [
        name
        for name in model.params
        if name not in raw.live or raw.live[name].shape != model.params[name].shape
    ]
    mismatched += [name for name in raw.live if name not in model.params]
    if mismatched:
        raise CheckpointError(f"{path}: tensor shape mismatch for {sorted(mismatched)}")
    for name in model.params:
        model.params[name][:] = raw.live[name]
        model.ema[name][:] = raw.ema[name]
    model.step_count = raw.step_count
    return model


def diff_checkpoints(path_a, path_b):
    """Tensor-by-tensor comparison; returns (name, section, status, max_abs_diff)."""
    a, b = read_raw(path_a), read_raw(path_b)
    rows = []
    for section_name, sa, sb in (("live", a.live, b.live), ("ema", a.ema, b.ema)):
        for name in sorted(set(sa) | set(sb)):
            if name not in sa or name not in sb:
                rows.append((name, section_name, "missing", float("nan")))
            elif sa[name].shape != sb[name].shape:
                rows.append((name, section_name, "shape-mismatch", float("nan")))
            else:
                delta = float(np.max(np.abs(sa[name] - sb[name]))) if sa[name].size else 0.0
                rows.append((name, section_name, "equal" if delta == 0.0 else "differs", delta))
    return rows
