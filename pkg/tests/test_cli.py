"""End-to-end command-line behavior through ``tkfnet.cli.main``."""

import numpy as np
import pytest

import tkfnet.tensor
from tkfnet.cli import main
from tkfnet.data import load_image_folder
from tkfnet.weights import read_weights

TRAIN_CONFIG = """\
# desk-scale training setup
model = small
data = synth:3x4x16
input_size = 16
epochs = 4
batch_size = 4
lr_init = 0.01
lr_end = 0.001
"""


def run_train(tmp_dir, out_name="run", seed="0"):
    config = tmp_dir / "train.cfg"
    config.write_text(TRAIN_CONFIG)
    out = tmp_dir / out_name
    code = main(["train", "--config", str(config), "--out", str(out), "--seed", seed])
    return code, out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp_dir = tmp_path_factory.mktemp("train")
    code, out = run_train(tmp_dir)
    assert code == 0
    return out


class TestTrain:
    def test_writes_all_artifacts(self, trained):
        for name in (
            "metrics.tsv",
            "timing.log",
            "weights.tkfw",
            "final.txt",
            "confusion.csv",
            "manifest.txt",
        ):
            assert (trained / name).is_file(), name

    def test_metrics_rows(self, trained):
        rows = [line.split("\t") for line in
                (trained / "metrics.tsv").read_text().splitlines()]
        assert [r[0] for r in rows] == ["0", "1", "2", "3"]
        assert all(len(r) == 3 for r in rows)
        losses = [float(r[1]) for r in rows]
        lrs = [float(r[2]) for r in rows]
        assert all(np.isfinite(losses))
        assert lrs[0] == 0.01
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_timing_has_one_row_per_epoch(self, trained):
        rows = (trained / "timing.log").read_text().splitlines()
        assert len(rows) == 4
        assert all(float(r.split("\t")[1]) >= 0 for r in rows)

    def test_manifest_reflects_run(self, trained):
        manifest = dict(
            line.split("=", 1)
            for line in (trained / "manifest.txt").read_text().splitlines()
        )
        assert manifest["command"] == "train"
        assert manifest["model"] == "small"
        assert manifest["seed"] == "0"
        assert manifest["epochs"] == "4"
        assert manifest["input_size"] == "16"
        assert manifest["class_0"] == "grating_0"
        assert manifest["class_2"] == "grating_2"
        assert "out" not in manifest

    def test_weights_file_loads(self, trained):
        arrays = read_weights(trained / "weights.tkfw")
        assert "backbone.stem.weight" in arrays
        assert arrays["dcif.head.weight"].shape[3] == 3

    def test_progress_and_summary_output(self, tmp_path, capsys):
        code, _ = run_train(tmp_path)
        assert code == 0
        out = capsys.readouterr().out
        assert "epoch 0 loss" in out
        assert "accuracy" in out

    def test_deterministic_across_runs(self, trained, tmp_path):
        code, again = run_train(tmp_path, out_name="again")
        assert code == 0
        for name in ("metrics.tsv", "weights.tkfw", "manifest.txt", "confusion.csv"):
            assert (trained / name).read_bytes() == (again / name).read_bytes(), name

    def test_seed_changes_outcome(self, trained, tmp_path):
        code, other = run_train(tmp_path, out_name="seed9", seed="9")
        assert code == 0
        assert (trained / "weights.tkfw").read_bytes() != (other / "weights.tkfw").read_bytes()

    def test_missing_data_is_config_error(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path / "o")])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERR:CONFIG:")

    def test_missing_out_is_config_error(self, capsys):
        code = main(["train", "--data", "synth:2x2x16"])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("ERR:CONFIG:") and "--out" in err

    def test_nonexistent_data_folder_is_io_error(self, tmp_path, capsys):
        code = main([
            "train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o"),
        ])
        assert code == 3
        assert capsys.readouterr().err.startswith("ERR:IO:")


class TestConfigFile:
    def test_unknown_key_names_location(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("model = small\nlearning_rate = 0.1\n")
        code = main(["train", "--config", str(config), "--data", "synth:2x2x16",
                     "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert "bad.cfg:2" in err
        assert "learning_rate" in err

    def test_malformed_line_rejected(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("just some words\n")
        assert main(["train", "--config", str(config)]) == 2
        assert "bad.cfg:1" in capsys.readouterr().err

    def test_invalid_value_rejected(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("epochs = -3\n")
        assert main(["train", "--config", str(config)]) == 2
        assert "epochs" in capsys.readouterr().err

    def test_missing_config_file_is_io_error(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "absent.cfg")])
        assert code == 3
        assert capsys.readouterr().err.startswith("ERR:IO:")

    def test_flags_override_file_values(self, tmp_path):
        config = tmp_path / "train.cfg"
        config.write_text(TRAIN_CONFIG)
        out = tmp_path / "o"
        code = main(["train", "--config", str(config), "--out", str(out),
                     "--epochs", "2"])
        assert code == 0
        assert len((out / "metrics.tsv").read_text().splitlines()) == 2


class TestEval:
    def test_prints_confusion_without_out(self, trained, capsys):
        code = main(["eval", str(trained / "weights.tkfw"), "--data", "synth:3x4x16"])
        assert code == 0
        out = capsys.readouterr().out
        assert "accuracy" in out
        lines = out.splitlines()
        header_at = next(i for i, l in enumerate(lines) if l.startswith("class,"))
        assert lines[header_at] == "class,grating_0,grating_1,grating_2"
        rows = [l.split(",") for l in lines[header_at + 1 : header_at + 4]]
        assert [r[0] for r in rows] == ["grating_0", "grating_1", "grating_2"]
        assert all(sum(int(v) for v in r[1:]) == 4 for r in rows)

    def test_writes_artifacts_with_out(self, trained, tmp_path):
        out = tmp_path / "eval"
        code = main(["eval", str(trained / "weights.tkfw"),
                     "--data", "synth:3x4x16", "--out", str(out)])
        assert code == 0
        assert (out / "confusion.csv").read_text().startswith("class,grating_0")
        final = dict(
            line.split("=", 1)
            for line in (out / "final.txt").read_text().splitlines()
        )
        assert final["samples"] == "12"
        manifest = (out / "manifest.txt").read_text()
        assert "command=eval" in manifest
        assert "weights=" in manifest

    def test_class_count_mismatch_is_shape_error(self, trained, capsys):
        code = main(["eval", str(trained / "weights.tkfw"), "--data", "synth:2x2x16"])
        assert code == 4
        err = capsys.readouterr().err
        assert err.startswith("ERR:SHAPE:")
        assert "3 classes" in err

    def test_missing_weights_is_io_error(self, tmp_path, capsys):
        code = main(["eval", str(tmp_path / "none.tkfw"), "--data", "synth:2x2x16"])
        assert code == 3
        assert capsys.readouterr().err.startswith("ERR:IO:")

    def test_corrupt_weights_is_io_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.tkfw"
        bad.write_bytes(b"not a weights file")
        code = main(["eval", str(bad), "--data", "synth:2x2x16"])
        assert code == 3
        assert capsys.readouterr().err.startswith("ERR:IO:")

    def test_requires_data(self, trained, capsys):
        assert main(["eval", str(trained / "weights.tkfw")]) == 2
        assert capsys.readouterr().err.startswith("ERR:CONFIG:")

    def test_adopts_training_input_size_from_manifest(self, trained, tmp_path):
        # The training run used input_size 16; eval without any config must
        # pick that up from the manifest beside the weights instead of the
        # 224 default.
        out = tmp_path / "eval"
        code = main(["eval", str(trained / "weights.tkfw"),
                     "--data", "synth:3x4x16", "--out", str(out)])
        assert code == 0
        manifest = dict(
            line.split("=", 1)
            for line in (out / "manifest.txt").read_text().splitlines()
        )
        assert manifest["input_size"] == "16"

        # Evaluating the training set at the training resolution reproduces
        # the accuracy the train command reported.
        train_final = dict(
            line.split("=", 1)
            for line in (trained / "final.txt").read_text().splitlines()
        )
        eval_final = dict(
            line.split("=", 1)
            for line in (out / "final.txt").read_text().splitlines()
        )
        assert eval_final["accuracy"] == train_final["accuracy"]

    def test_explicit_config_overrides_manifest_adoption(self, trained, tmp_path):
        config = tmp_path / "eval.cfg"
        config.write_text("input_size = 32\n")
        out = tmp_path / "eval32"
        code = main(["eval", str(trained / "weights.tkfw"), "--config", str(config),
                     "--data", "synth:3x4x16", "--out", str(out)])
        assert code == 0
        manifest = dict(
            line.split("=", 1)
            for line in (out / "manifest.txt").read_text().splitlines()
        )
        assert manifest["input_size"] == "32"


@pytest.fixture(scope="module")
def synth_tree(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "tree"
    assert main(["synth", "3x2x16", "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_layout_and_count(self, synth_tree, capsys):
        files = sorted(p.relative_to(synth_tree) for p in synth_tree.rglob("*.ppm"))
        assert len(files) == 6
        assert str(files[0]) == "grating_0/00000.ppm"
        assert {p.parts[0] for p in files} == {"grating_0", "grating_1", "grating_2"}

    def test_reloadable_and_balanced(self, synth_tree):
        data = load_image_folder(synth_tree)
        assert data.class_names == ["grating_0", "grating_1", "grating_2"]
        labels = data.labels()
        assert all((labels == k).sum() == 2 for k in range(3))

    def test_regeneration_is_byte_identical(self, synth_tree, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "3x2x16", "--out", str(again)]) == 0
        for path in sorted(synth_tree.rglob("*.ppm")):
            twin = again / path.relative_to(synth_tree)
            assert twin.read_bytes() == path.read_bytes()

    def test_spec_with_prefix_accepted(self, tmp_path, capsys):
        assert main(["synth", "synth:2x1x8", "--out", str(tmp_path / "t")]) == 0
        assert "wrote 2 files across 2 classes" in capsys.readouterr().out

    def test_invalid_spec_rejected(self, tmp_path, capsys):
        assert main(["synth", "7x20", "--out", str(tmp_path / "t")]) == 2
        assert capsys.readouterr().err.startswith("ERR:CONFIG:")

    def test_class_limit_enforced(self, tmp_path, capsys):
        assert main(["synth", "9x1x8", "--out", str(tmp_path / "t")]) == 2
        assert "1..7" in capsys.readouterr().err

    def test_requires_out(self, capsys):
        assert main(["synth", "2x1x8"]) == 2
        assert "--out" in capsys.readouterr().err


class TestInfer:
    def test_predicts_with_class_names(self, trained, synth_tree, capsys):
        image = synth_tree / "grating_1" / "00000.ppm"
        code = main(["infer", str(trained / "weights.tkfw"), str(image)])
        assert code == 0
        out = capsys.readouterr().out
        lines = out.splitlines()
        predicted = next(l for l in lines if l.startswith("predicted "))
        assert predicted.split()[1].startswith("grating_")
        probs = [float(l.split()[2]) for l in lines if l.startswith("prob ")]
        assert len(probs) == 3
        assert sum(probs) == pytest.approx(1.0, abs=1e-6)
        assert all(p >= 0 for p in probs)

    def test_attention_dump(self, trained, synth_tree, tmp_path):
        image = synth_tree / "grating_0" / "00000.ppm"
        out = tmp_path / "infer"
        code = main(["infer", str(trained / "weights.tkfw"), str(image),
                     "--dump-attention", "--out", str(out)])
        assert code == 0
        lines = (out / "attention.csv").read_text().splitlines()
        assert lines[0] == "channel,eta"
        # Gate width is twice the small backbone's 16 output channels.
        assert len(lines) == 1 + 32
        values = [float(l.split(",")[1]) for l in lines[1:]]
        assert all(0.0 < v < 1.0 for v in values)

    def test_attention_dump_requires_out(self, trained, synth_tree, capsys):
        image = synth_tree / "grating_0" / "00000.ppm"
        code = main(["infer", str(trained / "weights.tkfw"), str(image),
                     "--dump-attention"])
        assert code == 2
        assert "--out" in capsys.readouterr().err

    def test_unsupported_image_extension(self, trained, tmp_path, capsys):
        bogus = tmp_path / "x.jpeg"
        bogus.write_bytes(b"\xff\xd8\xff")
        code = main(["infer", str(trained / "weights.tkfw"), str(bogus)])
        assert code == 3
        assert capsys.readouterr().err.startswith("ERR:IO:")


class TestGradcheckCommand:
    def test_reports_every_module_and_passes(self, capsys):
        code = main(["gradcheck", "--seed", "0"])
        assert code == 0
        out = capsys.readouterr().out
        for name in ("tensor-core", "backbone", "tafe", "dcif", "train", "full-model"):
            assert f"{name} max_rel_err" in out
        assert "gradient check passed" in out

    def test_corrupted_backward_fails_fast(self, monkeypatch, capsys):
        monkeypatch.setattr(tkfnet.tensor, "_GRAD_FAULT_SCALE", 1.5)
        code = main(["gradcheck"])
        assert code == 1
        captured = capsys.readouterr()
        assert captured.err.startswith("ERR:VERIFY:")
        assert "tensor-core" in captured.err

    def test_base_model_rejected(self, capsys):
        assert main(["gradcheck", "--model", "base"]) == 2
        assert "small" in capsys.readouterr().err


class TestArgumentErrors:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 2
        assert capsys.readouterr().err.startswith("ERR:CONFIG:")

    def test_unknown_flag(self, capsys):
        assert main(["train", "--banana", "1"]) == 2
        assert capsys.readouterr().err.startswith("ERR:CONFIG:")

    def test_no_subcommand(self, capsys):
        assert main([]) == 2
        assert capsys.readouterr().err.startswith("ERR:CONFIG:")

    def test_invalid_flag_value(self, capsys):
        assert main(["train", "--epochs", "many"]) == 2
        assert "epochs" in capsys.readouterr().err

    def test_error_output_is_single_line(self, capsys):
        main(["train"])
        err = capsys.readouterr().err
        assert err.endswith("\n")
        assert err.count("\n") == 1
