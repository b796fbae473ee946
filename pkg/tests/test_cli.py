import os

import numpy as np
import pytest

from fieldchain import dataio as dio
from fieldchain.cli import main


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    rc = main([
        "synth", "--scene", "corridor", "--frames", "12",
        "--out", str(root), "--width", "24", "--height", "18",
        "--advance", "0.5",
    ])
    assert rc == 0
    return root


TRAIN_OVERRIDES = [
    "--set", "batch_rays=64",
    "--set", "frames_per_batch=4",
    "--set", "n_fg=8",
    "--set", "n_bg=2",
    "--set", "base_resolution=8",
    "--set", "upsample_resolutions=12,16",
    "--set", "density_components=2",
    "--set", "appearance_components=3",
    "--set", "iters_per_append=2",
    "--set", "refine_iters_per_frame=2",
    "--set", "overlap_frames=4",
    "--set", "test_pose_iters=2",
]


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    rc = main([
        "train", "--input", str(tiny_dataset), "--out", str(out),
        "--deterministic", "--seed", "3", "--holdout-every", "6",
        *TRAIN_OVERRIDES,
    ])
    assert rc == 0
    return out


class TestSynth:
    def test_outputs_exist(self, tiny_dataset):
        assert os.path.exists(tiny_dataset / "frames" / "000011.png")
        assert os.path.exists(tiny_dataset / "depth" / "000011.pfm")
        assert os.path.exists(tiny_dataset / "flow_fwd" / "000000.flo")
        assert os.path.exists(tiny_dataset / "poses_gt.txt")
        assert os.path.exists(tiny_dataset / "intrinsics.txt")


class TestTrain:
    def test_checkpoint_written(self, trained):
        assert os.path.exists(trained / "trajectory.ckpt")
        assert os.path.exists(trained / "field_000.ckpt")
        assert os.path.exists(trained / "run_report.json")
        assert os.path.exists(trained / "run_log.jsonl")


class TestEval:
    def test_csv_contract(self, trained, tiny_dataset, capsys):
        rc = main([
            "eval", "--checkpoint", str(trained), "--input", str(tiny_dataset),
            "--test-iters", "2",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        lines = out.strip().splitlines()
        assert lines[0] == "frame,psnr,ssim"
        assert lines[-1].startswith("aggregate,")
        # held out every 6th of 12 frames -> frames 0 and 6
        assert lines[1].startswith("0,")
        assert lines[2].startswith("6,")

    def test_eval_without_holdout_fails(self, tiny_dataset, tmp_path, capsys):
        out = tmp_path / "nohold"
        rc = main([
            "train", "--input", str(tiny_dataset), "--out", str(out),
            "--deterministic", *TRAIN_OVERRIDES,
        ])
        assert rc == 0
        rc = main(["eval", "--checkpoint", str(out), "--input", str(tiny_dataset)])
        assert rc == 1


class TestRender:
    def test_renders_strided_trajectory(self, trained, tiny_dataset, tmp_path):
        out = tmp_path / "renders"
        rc = main([
            "render", "--checkpoint", str(trained), "--input", str(tiny_dataset),
            "--out", str(out), "--stride", "5", "--n-fg", "8", "--n-bg", "2",
        ])
        assert rc == 0
        pngs = sorted(os.listdir(out))
        assert len(pngs) == 2
        img = dio.load_frame(out / pngs[0])
        assert img.shape == (18, 24, 3)

    def test_path_deviation_offset(self, trained, tiny_dataset, tmp_path):
        out = tmp_path / "dev"
        rc = main([
            "render", "--checkpoint", str(trained), "--input", str(tiny_dataset),
            "--out", str(out), "--stride", "11", "--offset", "0.1,0,0",
            "--n-fg", "8", "--n-bg", "2",
        ])
        assert rc == 0
        assert len(os.listdir(out)) >= 1


class TestExportPoses:
    def test_stdout_lines(self, trained, tiny_dataset, capsys):
        rc = main([
            "export-poses", "--checkpoint", str(trained),
            "--input", str(tiny_dataset),
        ])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 10  # 12 frames minus 2 held out
        assert all(len(l.split()) == 13 for l in lines)


class TestUsageErrors:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as e:
            main(["train", "--nope"])
        assert e.value.code == 2

    def test_missing_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2

    def test_runtime_error_exits_1(self, tmp_path):
        rc = main(["train", "--input", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "o")])
        assert rc == 1


class TestDeterminism:
    def test_two_runs_bit_identical(self, tiny_dataset, tmp_path, capsys):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            rc = main([
                "train", "--input", str(tiny_dataset), "--out", str(out),
                "--deterministic", "--seed", "7", "--holdout-every", "6",
                *TRAIN_OVERRIDES,
            ])
            assert rc == 0
            rc = main([
                "eval", "--checkpoint", str(out), "--input", str(tiny_dataset),
                "--test-iters", "2",
            ])
            assert rc == 0
            outs.append((out, capsys.readouterr().out))
        (a, csv_a), (b, csv_b) = outs
        assert csv_a == csv_b
        for name in sorted(os.listdir(a)):
            if name.endswith(".ckpt"):
                assert (a / name).read_bytes() == (b / name).read_bytes(), name
