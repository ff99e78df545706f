import csv
import filecmp
import os

import numpy as np
import pytest

from fdct import alignment as A
from fdct import cli, training
from fdct.config import Config
from fdct.errors import CheckpointExistsError, ConfigError, NumericError
from fdct.metrics import read_metrics
from fdct.objectives import LOSS_COLUMNS
from fdct.tensor import Tensor

TINY = """
data.classes = 3
data.per_class = 10
data.image_size = 16
model.channels = 4
model.inn_layers = 2
udt.patch = 2
udt.dim = 8
udt.depth = 1
udt.heads = 2
align.proj_dim = 8
align.prototypes = 4
train.epochs = 2
train.batch_size = 8
train.lr = 0.003
train.seeds = 0,1,2
"""


@pytest.fixture(scope="module")
def tiny():
    return Config.parse(TINY)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, tiny):
    root = tmp_path_factory.mktemp("run")
    training.resolve_dataset(tiny, root)
    return root


@pytest.fixture(scope="module")
def trained(workdir, tiny):
    out = workdir / "a"
    cfg = tiny.replace(data__path=str(workdir / "data"))
    result = training.cmd_train(cfg, out, seed=0, deterministic=True)
    return out, cfg, result


class TestTrain:
    def test_outputs(self, trained):
        out, _, result = trained
        for name in ("losses.csv", "metrics.csv", "confusion.csv", "pr.csv", "checkpoint/config.lock"):
            assert (out / name).exists(), name
        with open(out / "losses.csv") as fh:
            header = next(csv.reader(fh))
        assert tuple(header) == ("step",) + LOSS_COLUMNS
        assert len(result.losses) == 2 * 3      # 21 train pairs, batches of 8

    def test_checkpoint_bit_identical_across_runs(self, trained, workdir):
        out, cfg, _ = trained
        again = workdir / "b"
        training.cmd_train(cfg, again, seed=0, deterministic=True)
        a, b = out / "checkpoint", again / "checkpoint"
        names = sorted(os.listdir(a))
        assert names == sorted(os.listdir(b)) and len(names) > 50
        match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
        assert not mismatch and not errors
        assert read_metrics(out)["accuracy"] == read_metrics(again)["accuracy"]

    def test_different_seed_differs(self, trained, workdir):
        out, cfg, _ = trained
        other = workdir / "c"
        training.cmd_train(cfg, other, seed=1, deterministic=True)
        assert not filecmp.cmp(out / "checkpoint" / "udt.embed.weight.fdt",
                               other / "checkpoint" / "udt.embed.weight.fdt", shallow=False)

    def test_checkpoint_round_trip_eval(self, trained):
        out, _, result = trained
        report = training.cmd_eval(out / "checkpoint", "test")
        assert report.accuracy == result.report.accuracy
        np.testing.assert_array_equal(report.confusion, result.report.confusion)
        model, _ = training.load_checkpoint(out)
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), result.model.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_refuses_overwrite(self, trained):
        out, cfg, _ = trained
        with pytest.raises(CheckpointExistsError):
            training.cmd_train(cfg, out, seed=0)

    def test_overwrite_allowed(self, workdir, tiny):
        cfg = tiny.replace(data__path=str(workdir / "data"), train__epochs=1)
        out = workdir / "ow"
        training.cmd_train(cfg, out, seed=0)
        training.cmd_train(cfg, out, seed=0, overwrite=True)

    def test_nan_aborts_naming_component_and_step(self, workdir, tiny, monkeypatch):
        monkeypatch.setattr(A, "scma_loss", lambda *a, **k: Tensor(np.nan))
        cfg = tiny.replace(data__path=str(workdir / "data"))
        with pytest.raises(NumericError) as info:
            training.cmd_train(cfg, workdir / "nan", seed=0)
        assert info.value.where == "scma"
        assert "step 0" in str(info.value)

    def test_eval_diagnostics_present(self, trained):
        m = read_metrics(trained[0])
        for key in ("accuracy_visible_only", "accuracy_infrared_only"):
            assert 0.0 <= m[key] <= 1.0

    def test_class_count_mismatch(self, workdir, tiny):
        cfg = tiny.replace(data__path=str(workdir / "data"), data__classes=2)
        with pytest.raises(ConfigError):
            training.cmd_train(cfg, workdir / "mismatch", seed=0)

    def test_memorizing_run_scores_higher_on_train(self, workdir, tiny):
        cfg = tiny.replace(data__path=str(workdir / "data"), train__epochs=100, train__lr=0.01,
                           loss__ita=0, loss__scma=0, loss__cpa=0, loss__decp=0)
        splits = training.load_splits(training.resolve_dataset(cfg))
        result = training.train_fdct(cfg, splits, seed=0)
        train_acc = training.evaluate(result.model, splits["train"], 3).accuracy
        assert train_acc >= result.report.accuracy
        assert train_acc > 0.9


class TestBaseline:
    def test_same_architecture_both_modalities(self, workdir, tiny):
        cfg = tiny.replace(data__path=str(workdir / "data"))
        splits = training.load_splits(training.resolve_dataset(cfg))
        rv = training.train_baseline(cfg, splits, "visible", seed=0)
        ri = training.train_baseline(cfg, splits, "infrared", seed=0)
        names_v = [(n, p.shape) for n, p in rv.model.named_parameters()]
        assert names_v == [(n, p.shape) for n, p in ri.model.named_parameters()]
        assert len(rv.losses) == len(ri.losses)

    def test_output_schema_matches_eval(self, workdir, tiny, trained):
        cfg = tiny.replace(data__path=str(workdir / "data"))
        out = workdir / "base"
        training.cmd_baseline(cfg, "infrared", out, seed=0)
        for name in ("metrics.csv", "confusion.csv", "pr.csv"):
            with open(out / name) as a, open(trained[0] / name) as b:
                assert a.readline() == b.readline()

    def test_unknown_modality(self, workdir, tiny):
        with pytest.raises(ValueError):
            training.cmd_baseline(tiny.replace(data__path=str(workdir / "data")), "radar", workdir / "x")


class TestAblate:
    def test_five_rows(self, workdir, tiny):
        cfg = tiny.replace(data__path=str(workdir / "data"), train__epochs=1)
        rows = training.cmd_ablate(cfg, workdir / "abl", seeds=[0, 1, 2])
        assert [r["config"] for r in rows] == ["full", "drop_ita", "drop_scma", "drop_cpa", "drop_decp"]
        full = rows[0]
        assert all(full[k] == 1.0 for k in ("ita", "scma", "cpa", "decp", "ce"))
        for r, k in zip(rows[1:], ("ita", "scma", "cpa", "decp")):
            assert r[k] == 0.0
            assert r["median_accuracy"] == np.median([r["seed_0"], r["seed_1"], r["seed_2"]])
        assert (workdir / "abl" / "ablation.csv").read_text().startswith("config,")


class TestCli:
    def test_generate_train_eval(self, tmp_path, tiny):
        cfg_file = tmp_path / "tiny.cfg"
        cfg_file.write_text(TINY.replace("train.epochs = 2", "train.epochs = 1"))
        data = tmp_path / "data"
        assert cli.main(["generate", "--config", str(cfg_file), "--out", str(data)]) == 0
        assert (data / "manifest.csv").exists()
        run = tmp_path / "run"
        args = ["train", "--config", str(cfg_file), "--data", str(data), "--out", str(run), "--deterministic"]
        assert cli.main(args) == 0
        assert cli.main(args) == 2        # collision without --overwrite
        assert cli.main(args + ["--overwrite"]) == 0
        lock = Config.load(run / "checkpoint" / "config.lock")
        assert lock["train.epochs"] == 1
        assert cli.main(["eval", "--checkpoint", str(run / "checkpoint"), "--out", str(tmp_path / "ev"),
                         "--split", "val"]) == 0
        assert (tmp_path / "ev" / "metrics.csv").exists()

    def test_baseline_command(self, tmp_path):
        cfg_file = tmp_path / "tiny.cfg"
        cfg_file.write_text(TINY)
        assert cli.main(["baseline", "--config", str(cfg_file), "--modality", "visible",
                         "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "b" / "data" / "manifest.csv").exists()

    def test_bad_config_reports_error(self, tmp_path, capsys):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("udt.nonsense = 1\n")
        assert cli.main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "o")]) == 2
        assert "udt.nonsense" in capsys.readouterr().err
