import numpy as np
import pytest

from hddm.checkpoint import (
    diff_checkpoints,
    load_checkpoint,
    read_raw,
    save_checkpoint,
    serialize,
)
from hddm.errors import CheckpointError
from hddm.netcore import ExpertModel, ModelConfig, RouterModel, ema_update
from hddm.objectives import Objective
from hddm.rngstream import stream
from hddm.schedules import Schedule, ScheduleKind


def make_expert(seed=4, schedule=None):
    cfg = ModelConfig(n_blocks=2, width=8, data_dim=2, cond_count=3)
    model = ExpertModel(cfg, Objective.VELOCITY, schedule or Schedule.linear(), seed=seed)
    rng = stream(seed, "fill")
    for p in model.params.values():
        p[:] = rng.standard_normal(p.shape)
    ema_update(model, decay=0.5)
    model.step_count = 1234
    return model


class TestRoundTrip:
    def test_expert_bit_exact(self, tmp_path):
        model = make_expert()
        path = tmp_path / "expert_0.hddm"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.objective is Objective.VELOCITY
        assert loaded.schedule.kind is ScheduleKind.LINEAR
        assert loaded.step_count == 1234
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name], model.params[name])
            np.testing.assert_array_equal(loaded.ema[name], model.ema[name])

    def test_serialization_is_idempotent(self, tmp_path):
        model = make_expert()
        first = serialize(model)
        path = tmp_path / "e.hddm"
        save_checkpoint(model, path)
        assert serialize(load_checkpoint(path)) == first

    def test_router_round_trip(self, tmp_path):
        cfg = ModelConfig(n_blocks=1, width=8, data_dim=2, cond_count=0, out_dim=5)
        router = RouterModel(cfg, seed=1)
        rng = stream(1, "fill")
        for p in router.params.values():
            p[:] = rng.standard_normal(p.shape)
        path = tmp_path / "router.hddm"
        save_checkpoint(router, path)
        loaded = load_checkpoint(path)
        assert isinstance(loaded, RouterModel)
        assert loaded.n_experts == 5
        x = np.array([0.2, -0.4])
        np.testing.assert_array_equal(
            loaded.probabilities(x, 0.5, use_ema=False),
            router.probabilities(x, 0.5, use_ema=False),
        )

    def test_vp_generic_schedule_round_trip(self, tmp_path):
        t = np.linspace(0, 1, 33)
        sched = Schedule.vp_generic(t, np.cos(np.pi / 2 * t), np.sin(np.pi / 2 * t))
        cfg = ModelConfig(n_blocks=1, width=4, data_dim=2, cond_count=0)
        model = ExpertModel(cfg, Objective.EPSILON, sched, seed=0)
        path = tmp_path / "vp.hddm"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.schedule.kind is ScheduleKind.VP_GENERIC
        np.testing.assert_array_equal(loaded.schedule.knots_t, t)
        a, s = loaded.schedule.alpha_sigma(0.37)
        ae, se = sched.alpha_sigma(0.37)
        assert (a, s) == (ae, se)


class TestFormatGuards:
    def test_header_fields(self, tmp_path):
        model = make_expert()
        path = tmp_path / "e.hddm"
        save_checkpoint(model, path)
        raw = read_raw(path)
        assert raw.objective_tag == Objective.VELOCITY.tag
        assert raw.schedule_tag == ScheduleKind.LINEAR.tag
        assert (raw.n_blocks, raw.width, raw.data_dim, raw.cond_count) == (2, 8, 2, 3)
        assert raw.step_count == 1234

    def test_magic_check(self, tmp_path):
        path = tmp_path / "bad.hddm"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(CheckpointError, match="magic"):
            read_raw(path)

    def test_version_check(self, tmp_path):
        data = bytearray(serialize(make_expert()))
        data[4] = 99
        path = tmp_path / "ver.hddm"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version mismatch"):
            read_raw(path)

    def test_crc_check(self, tmp_path):
        data = bytearray(serialize(make_expert()))
        data[len(data) // 2] ^= 0xFF
        path = tmp_path / "crc.hddm"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="CRC"):
            read_raw(path)

    def test_truncation_check(self, tmp_path):
        data = serialize(make_expert())
        path = tmp_path / "trunc.hddm"
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            read_raw(path)


class TestDiff:
    def test_identical_files(self, tmp_path):
        model = make_expert()
        a, b = tmp_path / "a.hddm", tmp_path / "b.hddm"
        save_checkpoint(model, a)
        save_checkpoint(model, b)
        rows = diff_checkpoints(a, b)
        assert all(status == "equal" for _, _, status, _ in rows)

    def test_detects_single_tensor_change(self, tmp_path):
        model = make_expert()
        a = tmp_path / "a.hddm"
        save_checkpoint(model, a)
        model.params["head.w"][0, 0] += 1.0
        b = tmp_path / "b.hddm"
        save_checkpoint(model, b)
        rows = {(name, section): status for name, section, status, _ in diff_checkpoints(a, b)}
        assert rows[("head.w", "live")] == "differs"
        assert rows[("head.w", "ema")] == "equal"
        assert rows[("input.w", "live")] == "equal"
