import subprocess
import sys
from pathlib import Path

import numpy as np

from hddm.checkpoint import load_checkpoint
from hddm.cli import main
from hddm.objectives import Objective
from hddm.partition import load_dataset_csv


def write_config(tmp_path, **extra) -> Path:
    out_dir = tmp_path / "run"
    lines = [
        "[experiment]",
        "seed = 11",
        f"out_dir = {out_dir}",
        "[dataset]",
        "n_points = 800",
        "[partition]",
        "k = 4",
        "m_fine = 16",
        "[experts]",
        "expert_steps = 120",
        "expert_batch = 16",
        "ddpm_expert_ids = 0,3",
        "[router]",
        "router_steps = 60",
        "[sampler]",
        "sample_batch = 48",
        "[evaluation]",
        "n_eval = 200",
        "repetitions = 1",
        "thresholds = 0.3,0.5",
        "threshold_batch = 100",
        "[warmstart]",
        "warm_source_steps = 100",
        "warm_steps = 100",
        "warm_eval_every = 20",
    ]
    for key, value in extra.items():
        lines.append(f"{key} = {value}")
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "exp.ini"
    path.write_text("\n".join(lines) + "\n")
    return path


class TestPipeline:
    def test_full_pipeline(self, tmp_path):
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        assert main(["cluster", "--config", str(cfg)]) == 0
        data, labels = load_dataset_csv(run / "dataset.csv")
        assert len(data) == 800 and labels is not None

        for k in range(4):
            assert main(["train-expert", "--k", str(k), "--config", str(cfg)]) == 0
            model = load_checkpoint(run / f"expert_{k}.hddm")
            expected = Objective.EPSILON if k in (0, 3) else Objective.VELOCITY
            assert model.objective is expected
        assert main(["train-router", "--config", str(cfg)]) == 0
        assert main(["sample", "--config", str(cfg), "--cond", "1"]) == 0
        for name in (
            "samples.csv",
            "trajectory_audit.csv",
            "conversion_audit.csv",
            "samples_scatter.png",
            "router_curve.csv",
            "expert_0_curve.csv",
        ):
            assert (run / name).exists(), name

    def test_cluster_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        main(["cluster", "--config", str(cfg)])
        first = (run / "dataset.csv").read_bytes()
        main(["cluster", "--config", str(cfg)])
        assert (run / "dataset.csv").read_bytes() == first

    def test_train_expert_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        main(["cluster", "--config", str(cfg)])
        main(["train-expert", "--k", "1", "--config", str(cfg)])
        first = (run / "expert_1.hddm").read_bytes()
        main(["train-expert", "--k", "1", "--config", str(cfg)])
        assert (run / "expert_1.hddm").read_bytes() == first

    def test_parallel_shells_match_sequential(self, tmp_path):
        # two output trees with identical datasets; one trains experts one by
        # one, the other launches all of them as concurrent OS processes
        cfg_a = write_config(tmp_path / "a")
        cfg_b = write_config(tmp_path / "b")
        main(["cluster", "--config", str(cfg_a)])
        main(["cluster", "--config", str(cfg_b)])
        for k in range(4):
            main(["train-expert", "--k", str(k), "--config", str(cfg_a)])
        procs = [
            subprocess.Popen(
                [sys.executable, "-m", "hddm.cli", "train-expert", "--k", str(k), "--config", str(cfg_b)],
                stdout=subprocess.DEVNULL,
                stderr=subprocess.PIPE,
            )
            for k in range(4)
        ]
        for proc in procs:
            _, err = proc.communicate(timeout=600)
            assert proc.returncode == 0, err.decode()
        for k in range(4):
            seq = (tmp_path / "a" / "run" / f"expert_{k}.hddm").read_bytes()
            conc = (tmp_path / "b" / "run" / f"expert_{k}.hddm").read_bytes()
            assert seq == conc, f"expert {k} diverged under concurrent training"

    def test_convert_and_diff(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        main(["cluster", "--config", str(cfg)])
        main(["train-expert", "--k", "0", "--config", str(cfg)])
        assert main([
            "convert-checkpoint", str(run / "expert_0.hddm"), str(run / "conv.hddm"),
            "--objective", "velocity", "--schedule", "linear", "--config", str(cfg),
        ]) == 0
        converted = load_checkpoint(run / "conv.hddm")
        source = load_checkpoint(run / "expert_0.hddm")
        np.testing.assert_array_equal(
            converted.params["blocks.0.msa.w1"], source.params["blocks.0.msa.w1"]
        )
        capsys.readouterr()
        assert main(["diff-checkpoint", str(run / "expert_0.hddm"), str(run / "conv.hddm")]) == 0
        out = capsys.readouterr().out
        assert "head.w" in out and "differs" in out
        assert any(line.endswith("equal") for line in out.splitlines() if "msa.w1" in line and "live" in line)

    def test_evaluate_writes_reports(self, tmp_path):
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        assert main(["evaluate", "--study", "warm-start", "--config", str(cfg)]) == 0
        assert (run / "warm-start" / "warm-start.csv").exists()
        assert (run / "warm-start" / "warm_start.png").exists()


class TestErrors:
    def test_missing_inputs_named(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        code = main(["train-expert", "--k", "0", "--config", str(cfg)])
        err = capsys.readouterr().err
        assert code != 0
        assert "dataset.csv" in err and "cluster" in err

    def test_bad_config_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[experiment]\nseed = pear\n")
        code = main(["cluster", "--config", str(bad)])
        assert code == 2
        assert "seed" in capsys.readouterr().err

    def test_corrupt_checkpoint_distinct_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        main(["cluster", "--config", str(cfg)])
        main(["train-expert", "--k", "0", "--config", str(cfg)])
        path = tmp_path / "run" / "expert_0.hddm"
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        code = main([
            "convert-checkpoint", str(path), str(tmp_path / "x.hddm"),
            "--objective", "velocity", "--schedule", "linear",
        ])
        err = capsys.readouterr().err
        assert code == 4
        assert "CRC" in err

    def test_seed_and_out_overrides(self, tmp_path):
        cfg = write_config(tmp_path)
        alt = tmp_path / "alt"
        assert main(["cluster", "--config", str(cfg), "--seed", "99", "--out", str(alt)]) == 0
        assert (alt / "dataset.csv").exists()
        base = tmp_path / "run"
        main(["cluster", "--config", str(cfg)])
        assert (alt / "dataset.csv").read_bytes() != (base / "dataset.csv").read_bytes()
