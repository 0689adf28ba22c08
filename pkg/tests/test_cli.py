import csv
import struct
from fractions import Fraction

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from test_masking import enumerate_block_ratio
from vimpac import config as C
from vimpac.cli import load_checkpoint, main
from vimpac.raster import read_pgm, write_frame
from vimpac.synthetic import procedural_store
from vimpac.tokens import TokenGrid, VideoTokenStore, Vocabulary, load_store, save_store


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fast_config(tmp_path, **overrides):
    cfg = C.tiny_config(hidden=16, heads=2, head_dim=8, mlp_dim=32, cl_hidden=16, cl_out=8)
    pairs = [("train.group_size", "4"), ("train.accumulation_target", "4"), ("train.steps", "3"),
             ("finetune.steps", "3"), ("finetune.batch_size", "4")]
    cfg = C.apply_overrides(cfg, pairs + [(k, str(v)) for k, v in overrides.items()])
    path = tmp_path / "run.cfg"
    path.write_text(C.dump(cfg), encoding="utf-8")
    return path


@pytest.fixture
def store_path(tmp_path):
    path = tmp_path / "store.vtk"
    save_store(procedural_store(4, 4, 32), path)
    return path


@pytest.fixture
def labels_path(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("video_id,label\n" + "".join(f"video{k:03d},{k % 2}\n" for k in range(4)))
    return path


class TestQuantize:
    def test_golden_store_bytes(self, tmp_path, capsys):
        # 16x16 frames of four flat 8x8 patches; with vq_size 64 each channel
        # keeps 2 bits, so id = (r // 64) << 4 | (g // 64) << 2 | (b // 64).
        colours = [[(200, 100, 10), (0, 0, 0)], [(255, 255, 255), (70, 130, 190)]]
        ids = [[52, 0], [63, 26]]
        video = tmp_path / "frames" / "clipA"
        video.mkdir(parents=True)
        for t in range(2):
            frame = np.zeros((16, 16, 3), np.uint8)
            for i in range(2):
                for j in range(2):
                    frame[8 * i:8 * i + 8, 8 * j:8 * j + 8] = colours[i][j] if t == 0 else colours[1 - i][j]
            write_frame(video / f"{t:03d}.ppm", frame)
        out = tmp_path / "s.vtk"
        assert run("quantize", "--frames", tmp_path / "frames", "--out", out, "--vq-size", 64) == 0
        tokens = [ids[0][0], ids[0][1], ids[1][0], ids[1][1], ids[1][0], ids[1][1], ids[0][0], ids[0][1]]
        expected = (b"VTK1" + struct.pack("<II", 64, 1) + struct.pack("<I", 5) + b"clipA"
                    + struct.pack("<IIIII", 2, 1, 2, 2, 2) + struct.pack("<8H", *tokens))
        assert out.read_bytes() == expected
        assert "clipA\t2x2x2" in capsys.readouterr().out

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        out = tmp_path / "s.vtk"
        assert run("quantize", "--frames", tmp_path / "empty", "--out", out) == 0
        assert len(load_store(out)) == 0

    def test_npy_input(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, (2, 3, 16, 8, 3), dtype=np.uint8)
        np.save(tmp_path / "raw.npy", arr)
        out = tmp_path / "s.vtk"
        assert run("quantize", "--frames", tmp_path / "raw.npy", "--out", out, "--vq-size", 64) == 0
        store = load_store(out)
        assert [v.video_id for v in store.videos] == ["raw000", "raw001"]
        assert store[0].grid.dims == (3, 2, 1)

    def test_odd_frame_size_exits_2(self, tmp_path):
        video = tmp_path / "v"
        video.mkdir()
        write_frame(video / "0.ppm", np.zeros((12, 16, 3), np.uint8))
        assert run("quantize", "--frames", video, "--out", tmp_path / "s.vtk") == 2

    def test_missing_input_exits_2(self, tmp_path):
        assert run("quantize", "--frames", tmp_path / "nope.npy", "--out", tmp_path / "s.vtk") == 2


class TestCalibrate:
    def test_flags_seven_at_10x32x32(self, tmp_path):
        out = tmp_path / "c.csv"
        assert run("calibrate-masks", "--dims", "10x32x32", "--blocks", "5..9", "--samples", 3000,
                   "--out", out) == 0
        rows = read_csv(out)
        assert [r["blocks"] for r in rows if r["closest"] == "1"] == ["7"]

    def test_5x16x16_five_blocks(self, tmp_path):
        out = tmp_path / "c.csv"
        run("calibrate-masks", "--dims", "5x16x16", "--blocks", "5", "--samples", 4000, "--out", out)
        (row,) = read_csv(out)
        assert abs(float(row["mean_ratio"]) - 0.145) < 0.02

    def test_matches_enumeration(self, tmp_path):
        out = tmp_path / "c.csv"
        run("calibrate-masks", "--dims", "2x4x4", "--blocks", "1", "--samples", 20000, "--out", out)
        (row,) = read_csv(out)
        exact = enumerate_block_ratio((2, 4, 4))
        assert abs(float(row["mean_ratio"]) - exact) < 3 * float(row["stderr"]) + 1e-6

    def test_deterministic(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            run("calibrate-masks", "--dims", "5x8x8", "--blocks", "1..3", "--samples", 500, "--seed", 4,
                "--out", tmp_path / name)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    @pytest.mark.parametrize("dims", ["5x16", "0x4x4", "axbxc"])
    def test_bad_dims_exit_2(self, dims):
        assert run("calibrate-masks", "--dims", dims) == 2

    def test_bad_range_exit_2(self):
        assert run("calibrate-masks", "--dims", "5x8x8", "--blocks", "4..2") == 2


class TestTrainCommands:
    def test_pretrain_outputs(self, tmp_path, store_path):
        cfg = fast_config(tmp_path)
        out = tmp_path / "run"
        assert run("pretrain", "--config", cfg, "--store", store_path, "--out", out) == 0
        rows = read_csv(out / "metrics.csv")
        assert [r["step"] for r in rows] == ["1", "2", "3"]
        model, resolved = load_checkpoint(out)
        assert resolved.train.steps == 3
        assert model.config.hidden == 16

    def test_resolved_config_reproduces_run(self, tmp_path, store_path):
        cfg = fast_config(tmp_path)
        assert run("pretrain", "--config", cfg, "--store", store_path, "--out", tmp_path / "a") == 0
        assert run("pretrain", "--config", tmp_path / "a" / "resolved.cfg", "--store", store_path,
                   "--out", tmp_path / "b") == 0
        for name in ("metrics.csv", "model.vprm", "resolved.cfg"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_set_overrides(self, tmp_path, store_path):
        cfg = fast_config(tmp_path)
        assert run("pretrain", "--config", cfg, "--set", "train.steps=2", "--set", "objective.alpha=0",
                   "--store", store_path, "--out", tmp_path / "r") == 0
        rows = read_csv(tmp_path / "r" / "metrics.csv")
        assert len(rows) == 2
        assert all(r["cl_loss"] == "" for r in rows)

    @pytest.mark.parametrize("override", ["train.nope=1", "train.steps=zero", "noequals"])
    def test_config_errors_exit_2(self, tmp_path, store_path, override):
        cfg = fast_config(tmp_path)
        assert run("pretrain", "--config", cfg, "--set", override, "--store", store_path,
                   "--out", tmp_path / "r") == 2
        assert not (tmp_path / "r").exists()

    def test_model_too_small_for_store(self, tmp_path, store_path):
        cfg = fast_config(tmp_path, **{"model.max_h": 2})
        assert run("pretrain", "--config", cfg, "--store", store_path, "--out", tmp_path / "r") == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_1_with_metrics(self, tmp_path, store_path):
        cfg = fast_config(tmp_path, **{"train.peak_lr": "1e300", "train.clip_norm": "1e300",
                                       "train.warmup_ratio": "0.0"})
        assert run("pretrain", "--config", cfg, "--store", store_path, "--out", tmp_path / "r") == 1
        rows = read_csv(tmp_path / "r" / "metrics.csv")
        assert len(rows) >= 1

    def test_finetune_eval_chain(self, tmp_path, store_path, labels_path, capsys):
        cfg = fast_config(tmp_path)
        assert run("pretrain", "--config", cfg, "--store", store_path, "--out", tmp_path / "pre") == 0
        assert run("finetune", "--config", cfg, "--store", store_path, "--labels", labels_path,
                   "--init", tmp_path / "pre", "--out", tmp_path / "ft") == 0
        scores = tmp_path / "scores.csv"
        assert run("eval", "--ckpt", tmp_path / "ft", "--store", store_path, "--labels", labels_path,
                   "--spatial-crops", 3, "--out", scores) == 0
        rows = read_csv(scores)
        assert len(rows) == 4 and {"score_0", "score_1"} <= set(rows[0])
        assert "top1" in capsys.readouterr().out

    def test_probe_keeps_backbone(self, tmp_path, store_path, labels_path):
        cfg = fast_config(tmp_path)
        run("pretrain", "--config", cfg, "--store", store_path, "--out", tmp_path / "pre")
        assert run("probe", "--config", cfg, "--store", store_path, "--labels", labels_path,
                   "--init", tmp_path / "pre", "--out", tmp_path / "probe") == 0
        pre, _ = load_checkpoint(tmp_path / "pre")
        probe, resolved = load_checkpoint(tmp_path / "probe")
        assert resolved.finetune.linear_probe
        assert_array_equal(pre.params["embed.token"].data, probe.params["embed.token"].data)

    def test_missing_labels_exit_2(self, tmp_path, store_path):
        labels = tmp_path / "labels.csv"
        labels.write_text("video_id,label\nvideo000,0\n")
        cfg = fast_config(tmp_path)
        assert run("finetune", "--config", cfg, "--store", store_path, "--labels", labels,
                   "--out", tmp_path / "ft") == 2

    def test_eval_without_classifier_exit_2(self, tmp_path, store_path, labels_path):
        cfg = fast_config(tmp_path)
        run("pretrain", "--config", cfg, "--store", store_path, "--out", tmp_path / "pre")
        assert run("eval", "--ckpt", tmp_path / "pre", "--store", store_path, "--labels", labels_path) == 2

    def test_bad_store_exit_2(self, tmp_path):
        bad = tmp_path / "bad.vtk"
        bad.write_bytes(b"nope")
        assert run("pretrain", "--config", fast_config(tmp_path), "--store", bad, "--out", tmp_path / "r") == 2


def constant_store(tmp_path):
    grids = [np.full((3, 4, 5), 9), np.arange(60).reshape(3, 4, 5) % 16]
    store = VideoTokenStore(Vocabulary(16), tuple((f"v{k}", Fraction(2), TokenGrid(g)) for k, g in enumerate(grids)))
    path = tmp_path / "c.vtk"
    save_store(store, path)
    return path


class TestReconstruct:
    def test_constant_video_rate_one(self, tmp_path):
        out = tmp_path / "rec"
        assert run("reconstruct", "--store", constant_store(tmp_path), "--out", out, "--blocks", 2) == 0
        rows = read_csv(out / "fill.csv")
        assert rows[0]["video_id"] == "v0" and float(rows[0]["match_rate"]) == 1.0
        assert rows[0]["status"] == "ok"

    def test_pgm_layout(self, tmp_path):
        out = tmp_path / "rec"
        run("reconstruct", "--store", constant_store(tmp_path), "--out", out, "--strategy", "iid", "--xi", 0.5)
        original = read_pgm(out / "v1_original.pgm")
        assert original.shape == (4, 15)
        tokens = np.arange(60).reshape(3, 4, 5) % 16
        assert_array_equal(original[:, 5:10], tokens[1])
        masked = read_pgm(out / "v1_masked.pgm")
        assert set(np.unique(masked[masked != original])) <= {255}
        assert read_pgm(out / "v1_filled.pgm").shape == (4, 15)

    def test_fully_masked_is_reported(self, tmp_path):
        out = tmp_path / "rec"
        assert run("reconstruct", "--store", constant_store(tmp_path), "--out", out, "--strategy", "iid",
                   "--xi", 1.0) == 0
        rows = read_csv(out / "fill.csv")
        assert len(rows) == 2
        assert all(r["status"].startswith("degenerate") for r in rows)

    def test_deterministic(self, tmp_path, store_path):
        for name in ("a", "b"):
            run("reconstruct", "--store", store_path, "--out", tmp_path / name, "--seed", 3)
        for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_iid_beats_block_on_smooth_store(self, tmp_path):
        from vimpac.synthetic import smooth_store
        path = tmp_path / "smooth.vtk"
        save_store(smooth_store(12, (5, 16, 16), vq_size=64), path)
        means = {}
        for strategy in ("iid", "block"):
            run("reconstruct", "--store", path, "--out", tmp_path / strategy, "--strategy", strategy)
            means[strategy] = np.mean([float(r["match_rate"]) for r in read_csv(tmp_path / strategy / "fill.csv")])
        assert means["iid"] > means["block"]


class TestExitCodes:
    def test_no_command(self):
        assert run() == 2

    def test_unknown_command(self):
        assert run("frobnicate") == 2

    def test_help(self, capsys):
        assert run("--help") == 0
        assert "calibrate-masks" in capsys.readouterr().out
