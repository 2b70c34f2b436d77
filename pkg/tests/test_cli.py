import json

import numpy as np
import pytest

from semgan.cli import main
from semgan.data import load_domain
from semgan.nets import build_detector, save_checkpoint

TINY = [
    "--set", "train.detector_steps=6",
    "--set", "train.finetune_steps=4",
    "--set", "train.gan_steps=4",
    "--set", "train.batch_size=2",
    "--set", "train.eval_every=2",
    "--set", "train.checkpoint_every=2",
    "--set", "arch.detector.base_width=4",
    "--set", "arch.generator.base_width=4",
    "--set", "arch.generator.res_blocks=1",
    "--set", "arch.discriminator.base_width=4",
    "--set", "arch.discriminator.n_down=2",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Datasets plus a pretrained detector and a tiny trained generator,
    all produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--style", "synthetic", "--count", "6",
                 "--seed", "600", "--out", str(root / "src")]) == 0
    assert main(["gen", "--style", "night_like", "--count", "6",
                 "--seed", "7600", "--out", str(root / "tgt")]) == 0
    assert main(["gen", "--style", "night_like", "--count", "4",
                 "--seed", "7980", "--out", str(root / "test")]) == 0
    assert main(["pretrain", "--source", str(root / "src"),
                 "--out", str(root / "pre"), "--seed", "0", *TINY]) == 0
    assert main(["train-gan", "--source", str(root / "src"),
                 "--target", str(root / "tgt"),
                 "--detector", str(root / "pre" / "detector.npz"),
                 "--lambda-task", "0",
                 "--out", str(root / "gan"), "--seed", "0", *TINY]) == 0
    return root


class TestGen:
    def test_writes_dataset(self, workspace):
        images = load_domain(workspace / "src", labeled=True)
        assert len(images) == 6
        assert all(im.labeled for im in images)

    def test_deterministic_across_runs(self, tmp_path):
        for out in ("one", "two"):
            assert main(["gen", "--style", "day_like", "--count", "3",
                         "--seed", "42", "--out", str(tmp_path / out)]) == 0
        for sub in ("images", "labels"):
            for p in sorted((tmp_path / "one" / sub).iterdir()):
                assert p.read_bytes() == (tmp_path / "two" / sub / p.name).read_bytes()

    def test_zero_count_exits_two(self, tmp_path, capsys):
        code = main(["gen", "--count", "0", "--out", str(tmp_path / "ds")])
        assert code == 2
        assert "count" in capsys.readouterr().err

    def test_unknown_style_exits_two(self, tmp_path):
        assert main(["gen", "--style", "noir", "--out", str(tmp_path / "ds")]) == 2


class TestRunMarkers:
    def test_run_directory_records(self, workspace):
        out = workspace / "pre"
        info = json.loads((out / "run_info.json").read_text())
        assert info["command"] == "pretrain"
        assert info["seeds"] == [0]
        done = json.loads((out / "done.json").read_text())
        assert done["stage"] == "pretrain"
        assert done["config_hash"] == info["config_hash"]
        assert (out / "resolved_config.yaml").exists()

    def test_resume_skips_completed_run(self, workspace, capsys):
        code = main(["pretrain", "--source", str(workspace / "src"),
                     "--out", str(workspace / "pre"), "--seed", "0",
                     "--resume", *TINY])
        assert code == 0
        assert "skipping" in capsys.readouterr().out

    def test_resume_reruns_on_config_change(self, workspace, capsys):
        detector = workspace / "pre" / "detector.npz"
        before = detector.read_bytes()
        code = main(["pretrain", "--source", str(workspace / "src"),
                     "--out", str(workspace / "pre"), "--seed", "0",
                     "--resume", *TINY, "--set", "train.detector_steps=7"])
        assert code == 0
        assert "skipping" not in capsys.readouterr().out
        # restore the module-scoped fixture's artifact for later tests
        code = main(["pretrain", "--source", str(workspace / "src"),
                     "--out", str(workspace / "pre"), "--seed", "0", *TINY])
        assert code == 0
        assert detector.read_bytes() == before


class TestExitCodes:
    def test_missing_input_exits_two(self, tmp_path, capsys):
        code = main(["pretrain", "--source", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "out"), *TINY])
        assert code == 2
        assert "does not exist" in capsys.readouterr().err

    def test_unknown_config_section_exits_two(self, tmp_path):
        code = main(["gen", "--out", str(tmp_path / "ds"), "--count", "1",
                     "--set", "trian.seed=1"])
        assert code == 2

    def test_finetune_requires_exactly_one_source(self, workspace, tmp_path):
        detector = str(workspace / "pre" / "detector.npz")
        code = main(["finetune", "--detector", detector,
                     "--out", str(tmp_path / "ft"), *TINY])
        assert code == 2
        code = main(["finetune", "--detector", detector,
                     "--train", str(workspace / "tgt"),
                     "--generated", str(workspace / "tgt"),
                     "--out", str(tmp_path / "ft"), *TINY])
        assert code == 2

    def test_stage_order_violation_exits_three(self, workspace, tmp_path, capsys):
        fresh = build_detector({"base_width": 4})
        fresh.freeze()
        save_checkpoint(fresh, tmp_path / "fresh.npz")
        code = main(["finetune", "--detector", str(tmp_path / "fresh.npz"),
                     "--train", str(workspace / "tgt"),
                     "--valid", str(workspace / "tgt"),
                     "--out", str(tmp_path / "ft"), *TINY])
        assert code == 3
        assert "pretrain" in capsys.readouterr().err

    def test_trainable_detector_exits_three(self, workspace, tmp_path):
        loose = build_detector({"base_width": 4})  # never frozen
        save_checkpoint(loose, tmp_path / "loose.npz")
        code = main(["train-gan", "--source", str(workspace / "src"),
                     "--target", str(workspace / "tgt"),
                     "--detector", str(tmp_path / "loose.npz"),
                     "--out", str(tmp_path / "gan"), *TINY])
        assert code == 3

    def test_test_overlap_exits_four(self, workspace, tmp_path):
        code = main(["experiment", "--source", str(workspace / "src"),
                     "--target", str(workspace / "test"),
                     "--test", str(workspace / "test"),
                     "--out", str(tmp_path / "exp"),
                     "--methods", "pretrained", "--seeds", "0",
                     "--k-list", "", *TINY])
        assert code == 4


class TestTranslateEval:
    def test_translate_copies_labels(self, workspace, tmp_path):
        code = main(["translate",
                     "--generator", str(workspace / "gan" / "checkpoints" / "g_ab.npz"),
                     "--source", str(workspace / "src"),
                     "--out", str(tmp_path / "translated")])
        assert code == 0
        for label in (workspace / "src" / "labels").iterdir():
            assert (tmp_path / "translated" / "labels" / label.name).read_bytes() \
                == label.read_bytes()

    def test_translate_rejects_wrong_kind(self, workspace, tmp_path):
        code = main(["translate",
                     "--generator", str(workspace / "pre" / "detector.npz"),
                     "--source", str(workspace / "src"),
                     "--out", str(tmp_path / "translated")])
        assert code == 2

    def test_eval_prints_report_json(self, workspace, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(workspace / "pre" / "detector.npz"),
                     "--test", str(workspace / "test"),
                     "--out", str(tmp_path / "report")])
        assert code == 0
        out = capsys.readouterr().out
        report = json.loads(out[:out.rindex("}") + 1])
        assert set(report) == {"ap30", "ap50", "counts", "metadata"}
        assert 0.0 <= report["ap30"] <= 100.0
        assert report["metadata"]["interpolation"] == "continuous"
        assert (tmp_path / "report" / "report.json").exists()
        assert (tmp_path / "report" / "pr_30.csv").exists()
        assert (tmp_path / "report" / "pr_50.csv").exists()


class TestExperimentCommand:
    def test_baseline_run_outputs(self, workspace, tmp_path, capsys):
        out = tmp_path / "exp"
        code = main(["experiment", "--source", str(workspace / "src"),
                     "--target", str(workspace / "tgt"),
                     "--test", str(workspace / "test"),
                     "--out", str(out),
                     "--methods", "pretrained", "--seeds", "0,1",
                     "--k-list", "", *TINY])
        assert code == 0
        printed = capsys.readouterr().out
        assert "| a | b | k | method | seed | AP@0.3 | AP@0.5 |" in printed
        csv_lines = (out / "results.csv").read_text().splitlines()
        assert csv_lines[0] == "k,a,b,method,seed,ap30,ap50"
        assert len(csv_lines) == 3  # header + one row per seed
        assert (out / "summary.md").exists()
        assert json.loads((out / "done.json").read_text())["outputs"] == {"rows": 2}

    def test_repeat_run_identical_csv(self, workspace, tmp_path):
        argv = ["experiment", "--source", str(workspace / "src"),
                "--target", str(workspace / "tgt"),
                "--test", str(workspace / "test"),
                "--methods", "pretrained,fine_tuned", "--seeds", "2",
                "--k-list", "2", *TINY]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "results.csv").read_text() \
            == (tmp_path / "b" / "results.csv").read_text()


class TestOutRoot:
    def test_relative_out_uses_env_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SEMGAN_OUT_ROOT", str(tmp_path))
        assert main(["gen", "--count", "2", "--seed", "1", "--out", "nested/ds"]) == 0
        assert (tmp_path / "nested" / "ds" / "manifest.json").exists()

    def test_absolute_out_ignores_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SEMGAN_OUT_ROOT", str(tmp_path / "unused"))
        assert main(["gen", "--count", "2", "--seed", "1",
                     "--out", str(tmp_path / "abs")]) == 0
        assert (tmp_path / "abs" / "manifest.json").exists()
        assert not (tmp_path / "unused").exists()
