"""End-to-end tests for the command-line interface.

Every test drives ``mript.cli.main`` with an argv list, the same entry the
installed console script uses, and checks return codes, stdout contracts,
and the files each subcommand leaves behind.
"""

import json
import os

import numpy as np
import pytest

from mript.cli import (
    DataConfig,
    configure_threads,
    load_experiment_config,
    main,
)
from mript.dataio import load_manifest, load_raster, phantom_set, save_raster
from mript.degradation import Mask, MaskSpec, degrade, make_mask
from mript.model import MaskFamily
from mript.training import load_checkpoint


def write_config(path, **overrides):
    """Write a small tiny-preset experiment config and return its path."""
    cfg = {
        "output_dir": overrides.pop("output_dir"),
        "model": {"preset": "tiny"},
        "train": {
            "batch_size": 2,
            "pretrain_epochs": 1,
            "finetune_epochs": 1,
            "learning_rate": 1e-3,
            "seed": 0,
        },
        "data": {"train_count": 4, "eval_count": 2, "seed": 3},
        "eval_tasks": [{"family": "random", "acceleration": 2.0}],
        "downstream": [{"family": "equispaced", "acceleration": 4.0}],
    }
    for key, value in overrides.items():
        if value is None:
            cfg.pop(key, None)
        elif isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f)
    return str(path)


class TestMaskGen:
    def test_writes_raster_and_png(self, tmp_path, capsys):
        out = str(tmp_path / "m")
        rc = main(["mask-gen", "--family", "random", "--acc", "4",
                   "--size", "64", "--seed", "0", "--out", out])
        assert rc == 0
        assert os.path.exists(out + ".mrit")
        assert os.path.exists(out + ".png")
        line = capsys.readouterr().out
        assert line.startswith("achieved_acceleration=")
        # 64 columns / 16 kept columns is exactly 4x
        assert float(line.split("=")[1]) == pytest.approx(4.0)
        kept = load_raster(out + ".mrit")
        assert kept.shape == (64, 64)
        assert set(np.unique(kept)) <= {0.0, 1.0}

    def test_matches_library_mask(self, tmp_path, capsys):
        out = str(tmp_path / "m")
        rc = main(["mask-gen", "--family", "gaussian1d", "--acc", "6",
                   "--size", "48", "--seed", "11", "--out", out])
        assert rc == 0
        expected = make_mask(
            MaskSpec(MaskFamily.GAUSSIAN_1D, 6.0, seed=11), (48, 48))
        np.testing.assert_array_equal(load_raster(out + ".mrit"),
                                      expected.to_float())

    def test_equispaced_offset_flag(self, tmp_path, capsys):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out, off in ((a, "0"), (b, "1")):
            rc = main(["mask-gen", "--family", "equispaced", "--acc", "4",
                       "--size", "64", "--offset", off, "--out", out])
            assert rc == 0
        ka = load_raster(a + ".mrit")
        kb = load_raster(b + ".mrit")
        assert not np.array_equal(ka, kb)

    def test_infeasible_center_returns_2(self, tmp_path, capsys):
        rc = main(["mask-gen", "--family", "random", "--acc", "2",
                   "--center-fraction", "0.9", "--size", "64",
                   "--out", str(tmp_path / "m")])
        assert rc == 2
        assert "mask-gen:" in capsys.readouterr().err
        assert not os.path.exists(str(tmp_path / "m") + ".mrit")

    def test_unknown_family_rejected_by_parser(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["mask-gen", "--family", "spiral", "--acc", "4",
                  "--out", str(tmp_path / "m")])


class TestDegrade:
    @pytest.fixture()
    def image_and_mask(self, tmp_path):
        img = phantom_set(1, 32, seed=5)[0]
        img_path = str(tmp_path / "img.mrit")
        save_raster(img_path, img)
        spec = MaskSpec(MaskFamily.CARTESIAN_RANDOM, 4.0, seed=2)
        mask = make_mask(spec, (32, 32))
        mask_path = str(tmp_path / "mask.mrit")
        save_raster(mask_path, mask.to_float())
        return img, mask, img_path, mask_path

    def test_writes_zero_filled_output(self, tmp_path, capsys, image_and_mask):
        img, mask, img_path, mask_path = image_and_mask
        out = str(tmp_path / "zf")
        rc = main(["degrade", "--image", img_path, "--mask", mask_path,
                   "--out", out])
        assert rc == 0
        line = capsys.readouterr().out
        assert line.startswith("zero_filled_psnr_db=")
        produced = load_raster(out + ".mrit")
        expected = degrade(img, Mask(mask.kept, None))
        np.testing.assert_array_equal(produced, expected)
        assert os.path.exists(out + ".png")

    def test_error_map_flag(self, tmp_path, capsys, image_and_mask):
        _, _, img_path, mask_path = image_and_mask
        err_png = str(tmp_path / "err.png")
        rc = main(["degrade", "--image", img_path, "--mask", mask_path,
                   "--out", str(tmp_path / "zf"), "--error-map", err_png,
                   "--gain", "2.0"])
        assert rc == 0
        assert os.path.exists(err_png)

    def test_missing_image_returns_2(self, tmp_path, capsys, image_and_mask):
        _, _, _, mask_path = image_and_mask
        rc = main(["degrade", "--image", str(tmp_path / "nope.mrit"),
                   "--mask", mask_path, "--out", str(tmp_path / "zf")])
        assert rc == 2
        assert "degrade:" in capsys.readouterr().err

    def test_non_2d_mask_returns_2(self, tmp_path, capsys, image_and_mask):
        _, _, img_path, _ = image_and_mask
        bad = str(tmp_path / "bad.mrit")
        save_raster(bad, np.ones((1, 32, 32), dtype=np.float32))
        rc = main(["degrade", "--image", img_path, "--mask", bad,
                   "--out", str(tmp_path / "zf")])
        assert rc == 2
        assert "2-d" in capsys.readouterr().err

    def test_size_mismatch_returns_2(self, tmp_path, capsys, image_and_mask):
        _, _, img_path, _ = image_and_mask
        small = str(tmp_path / "small.mrit")
        save_raster(small, np.ones((16, 16), dtype=np.float32))
        rc = main(["degrade", "--image", img_path, "--mask", small,
                   "--out", str(tmp_path / "zf")])
        assert rc == 2


class TestPhantoms:
    def test_writes_dataset_and_manifest(self, tmp_path, capsys):
        out_dir = str(tmp_path / "data")
        rc = main(["phantoms", "--count", "3", "--size", "24",
                   "--seed", "9", "--out-dir", out_dir])
        assert rc == 0
        assert capsys.readouterr().out == "count=3\n"
        manifest = load_manifest(os.path.join(out_dir, "manifest.csv"))
        paths = manifest.paths("train")
        assert len(paths) == 3
        for i, p in enumerate(paths):
            img = load_raster(p)
            np.testing.assert_array_equal(img, phantom_set(1, 24, seed=9 + i)[0])

    def test_png_previews(self, tmp_path, capsys):
        out_dir = str(tmp_path / "data")
        rc = main(["phantoms", "--count", "2", "--size", "16",
                   "--out-dir", out_dir, "--png"])
        assert rc == 0
        assert os.path.exists(os.path.join(out_dir, "phantom_0001.png"))


class TestExperimentConfig:
    def test_minimal_config_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"output_dir": str(tmp_path / "out")}))
        cfg = load_experiment_config(str(path))
        assert cfg.model.image_size == 64  # desk preset is the default
        assert cfg.data == DataConfig()
        assert len(cfg.eval_tasks) == 1
        assert cfg.eval_tasks[0].family is MaskFamily.CARTESIAN_RANDOM
        assert cfg.eval_tasks[0].acceleration == 4.0
        # eval combs get a pinned offset; downstream ones stay randomized
        assert cfg.eval_tasks[0].offset == 0
        assert cfg.downstream[0].offset is None

    def test_tiny_preset(self, tmp_path):
        cfg = load_experiment_config(
            write_config(tmp_path / "c.json", output_dir=str(tmp_path / "o")))
        assert cfg.model.image_size == 16
        assert cfg.train.batch_size == 2
        assert cfg.data.train_count == 4

    def test_missing_output_dir_exits(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"model": {"preset": "tiny"}}))
        with pytest.raises(SystemExit):
            load_experiment_config(str(path))

    @pytest.mark.parametrize("mutation", [
        {"unknown_section": {"a": 1}},             # unrecognized top level
        {"model": {"preset": "huge"}},             # unknown preset
        {"model": {"preset": "tiny", "bogus": 1}},  # unknown model field
        {"train": {"learning_rate": "fast"}},      # wrong type
        {"data": {"seed": -1}},                    # out-of-range seed
        {"eval_tasks": [{"family": "random"}]},    # missing acceleration
        {"eval_tasks": [{"family": "random", "acceleration": 4,
                         "extra": 1}]},            # unknown task key
    ])
    def test_invalid_config_exits(self, tmp_path, mutation):
        path = write_config(tmp_path / "c.json",
                            output_dir=str(tmp_path / "o"), **mutation)
        with pytest.raises(SystemExit):
            load_experiment_config(path)

    def test_malformed_json_exits(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(SystemExit):
            load_experiment_config(str(path))

    def test_missing_file_exits(self, tmp_path):
        with pytest.raises(SystemExit):
            load_experiment_config(str(tmp_path / "absent.json"))


class TestThreadConfig:
    def test_rejects_non_integer(self, monkeypatch):
        monkeypatch.setenv("MRIPT_THREADS", "many")
        with pytest.raises(SystemExit):
            configure_threads()

    def test_rejects_negative(self, monkeypatch):
        monkeypatch.setenv("MRIPT_THREADS", "-2")
        with pytest.raises(SystemExit):
            configure_threads()

    def test_unset_means_single_thread(self, monkeypatch):
        monkeypatch.delenv("MRIPT_THREADS", raising=False)
        configure_threads()
        assert os.environ["OPENBLAS_NUM_THREADS"] == "1"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny pretrain run shared by the eval/finetune/stability tests."""
    root = tmp_path_factory.mktemp("pipeline")
    out_dir = str(root / "run")
    config = write_config(root / "config.json", output_dir=out_dir)
    rc = main(["pretrain", "--config", config])
    assert rc == 0
    return config, out_dir, os.path.join(out_dir, "pretrain.ckpt")


class TestPretrain:
    def test_outputs_and_stdout(self, trained, capsys):
        config, out_dir, ckpt = trained
        # 1 epoch over 4 images at batch size 2 is exactly 2 steps
        assert os.path.exists(ckpt)
        trace_path = os.path.join(out_dir, "pretrain_loss.csv")
        with open(trace_path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 3
        loaded = load_checkpoint(ckpt)
        assert loaded.step == 2
        assert loaded.mode == "pretrain"
        assert loaded.model.config.image_size == 16

    def test_lock_released_after_run(self, trained):
        _, out_dir, _ = trained
        assert not os.path.exists(os.path.join(out_dir, ".lock"))

    def test_deterministic_repeat(self, trained, tmp_path, capsys):
        config, _, ckpt = trained
        out2 = str(tmp_path / "run2")
        config2 = write_config(tmp_path / "c2.json", output_dir=out2)
        rc = main(["pretrain", "--config", config2])
        assert rc == 0
        with open(ckpt, "rb") as f:
            first = f.read()
        with open(os.path.join(out2, "pretrain.ckpt"), "rb") as f:
            second = f.read()
        assert first == second

    def test_locked_directory_exits(self, tmp_path, capsys):
        out_dir = tmp_path / "busy"
        out_dir.mkdir()
        (out_dir / ".lock").write_text("123")
        config = write_config(tmp_path / "c.json", output_dir=str(out_dir))
        with pytest.raises(SystemExit, match="locked"):
            main(["pretrain", "--config", config])


class TestEval:
    def test_writes_metrics_and_report(self, trained, tmp_path, capsys):
        config_src, _, ckpt = trained
        out_dir = str(tmp_path / "evalrun")
        config = write_config(tmp_path / "c.json", output_dir=out_dir)
        rc = main(["eval", "--config", config, "--checkpoint", ckpt])
        assert rc == 0
        stdout = capsys.readouterr().out
        with open(os.path.join(out_dir, "metrics.csv"), encoding="utf-8") as f:
            csv_text = f.read()
        assert stdout == csv_text
        assert "mript-split" in csv_text
        assert "zero-filled" in csv_text
        assert os.path.exists(os.path.join(out_dir, "report.md"))
        assert os.path.exists(
            os.path.join(out_dir, "error_random_x2_mript-split.png"))
        assert os.path.exists(
            os.path.join(out_dir, "error_random_x2_zero-filled.png"))

    def test_zero_shot_tag_and_checkpoint_untouched(self, trained, tmp_path,
                                                    capsys):
        _, _, ckpt = trained
        with open(ckpt, "rb") as f:
            before = f.read()
        out_dir = str(tmp_path / "zs")
        config = write_config(tmp_path / "c.json", output_dir=out_dir,
                              eval_tasks=[{"family": "equispaced",
                                           "acceleration": 4.0}])
        rc = main(["eval", "--config", config, "--checkpoint", ckpt,
                   "--zero-shot"])
        assert rc == 0
        assert "mript-split-zeroshot" in capsys.readouterr().out
        with open(ckpt, "rb") as f:
            assert f.read() == before

    def test_missing_checkpoint_returns_1(self, trained, tmp_path, capsys):
        config = write_config(tmp_path / "c.json",
                              output_dir=str(tmp_path / "o"))
        rc = main(["eval", "--config", config,
                   "--checkpoint", str(tmp_path / "none.ckpt")])
        assert rc == 1
        assert "eval:" in capsys.readouterr().err


class TestFinetune:
    def test_continues_from_checkpoint(self, trained, tmp_path, capsys):
        _, _, ckpt = trained
        out_dir = str(tmp_path / "ft")
        config = write_config(tmp_path / "c.json", output_dir=out_dir)
        rc = main(["finetune", "--config", config, "--checkpoint", ckpt])
        assert rc == 0
        out = capsys.readouterr().out
        assert "steps=2" in out
        loaded = load_checkpoint(os.path.join(out_dir, "finetune.ckpt"))
        assert loaded.step == 4  # 2 pretrain steps + 2 finetune steps
        assert loaded.mode == "finetune"
        assert os.path.exists(os.path.join(out_dir, "finetune_loss.csv"))

    def test_finetune_changes_weights(self, trained, tmp_path, capsys):
        _, _, ckpt = trained
        out_dir = str(tmp_path / "ft")
        config = write_config(tmp_path / "c.json", output_dir=out_dir)
        assert main(["finetune", "--config", config,
                     "--checkpoint", ckpt]) == 0
        before = load_checkpoint(ckpt).model
        after = load_checkpoint(os.path.join(out_dir, "finetune.ckpt")).model
        diffs = [n for n in before.param_names
                 if not np.array_equal(before.params[n].data,
                                       after.params[n].data)]
        assert diffs


class TestStability:
    def test_sweep_outputs(self, trained, tmp_path, capsys):
        _, _, ckpt = trained
        out_dir = str(tmp_path / "stab")
        config = write_config(tmp_path / "c.json", output_dir=out_dir)
        rc = main(["stability", "--config", config, "--checkpoint", ckpt,
                   "--sizes", "2", "--repeats", "1"])
        assert rc == 0
        summary = capsys.readouterr().out.splitlines()
        assert summary[0] == "size,mean_psnr_db,std_psnr_db,mean_ssim,std_ssim,n_runs"
        assert summary[1].startswith("0,")
        assert summary[2].startswith("2,")
        assert summary[1].endswith(",1") and summary[2].endswith(",1")
        with open(os.path.join(out_dir, "stability_runs.csv"),
                  encoding="utf-8") as f:
            runs = f.read().splitlines()
        assert runs[0] == "size,repeat,psnr_db,ssim"
        assert len(runs) == 3  # baseline plus one finetuned run

    @pytest.mark.parametrize("argv_tail", [
        ["--sizes", "0"],
        ["--sizes", ""],
        ["--repeats", "0"],
    ])
    def test_bad_sweep_arguments_exit(self, trained, tmp_path, argv_tail,
                                      capsys):
        _, _, ckpt = trained
        config = write_config(tmp_path / "c.json",
                              output_dir=str(tmp_path / "o"))
        with pytest.raises(SystemExit):
            main(["stability", "--config", config, "--checkpoint", ckpt]
                 + argv_tail)


class TestManifestData:
    def test_pretrain_from_manifest(self, tmp_path, capsys):
        data_dir = str(tmp_path / "imgs")
        assert main(["phantoms", "--count", "2", "--size", "16",
                     "--out-dir", data_dir]) == 0
        out_dir = str(tmp_path / "run")
        config = write_config(
            tmp_path / "c.json", output_dir=out_dir,
            data={"manifest": os.path.join(data_dir, "manifest.csv")})
        rc = main(["pretrain", "--config", config])
        assert rc == 0
        # two manifest images at batch size 2 is a single step
        assert "steps=1" in capsys.readouterr().out

    def test_eval_needs_test_split(self, tmp_path, capsys):
        data_dir = str(tmp_path / "imgs")
        assert main(["phantoms", "--count", "2", "--size", "16",
                     "--out-dir", data_dir]) == 0
        out_dir = str(tmp_path / "run")
        config = write_config(
            tmp_path / "c.json", output_dir=out_dir,
            data={"manifest": os.path.join(data_dir, "manifest.csv")})
        assert main(["pretrain", "--config", config]) == 0
        with pytest.raises(SystemExit, match="test"):
            main(["eval", "--config", config,
                  "--checkpoint", os.path.join(out_dir, "pretrain.ckpt")])


class TestParser:
    def test_no_command_exits(self):
        with pytest.raises(SystemExit):
            main([])

    def test_unknown_command_exits(self):
        with pytest.raises(SystemExit):
            main(["transmogrify"])
