#!/usr/bin/env python3

import pytest

from . import TOY_ARCH, write_config
from eio.checkpoint import read_manifest
from eio.cli import error_category, main
from eio.config import ConfigError
from eio.experiment import RunDirectory


@pytest.fixture(scope="module")
def f_run(tmp_path_factory):
    config = write_config(tmp_path_factory.mktemp("cli"))
    with pytest.warns(UserWarning, match="SGM"):
        code = main(["pipeline", "--config", str(config)])
    assert code == 0
    return config, RunDirectory(config.parent / "run")


class TestPipeline:
    def test_artifacts(self, f_run):
        _, dirs = f_run
        for path in (dirs.config, dirs.built, dirs.pretrained, dirs.trained,
                dirs.last, dirs.train_log, dirs.baseline, dirs.surrogate(0)):
            assert path.exists(), path
        assert len(list(dirs.derived_dir.glob("*-ft.npz"))) == 2
        assert (dirs.reports / "transfer-trained-eps0.03.csv").exists()
        assert (dirs.reports / "standard-blackbox.csv").exists()
        assert (dirs.reports / "standard-whitebox.csv").exists()

    def test_manifests(self, f_run):
        _, dirs = f_run
        manifest = read_manifest(dirs.trained)
        assert manifest["counters"]["phase"] == "done"
        assert manifest["L"] == 3
        assert manifest["path_count"] == 8
        derived = sorted(dirs.derived_dir.glob("*-ft.npz"))[0]
        provenance = read_manifest(derived)["provenance"]
        assert provenance["kind"] == "derived"
        assert provenance["finetuned"]
        assert provenance["rgn_hash"] == manifest["param_hash"]

    def test_report(self, f_run, capsys):
        _, dirs = f_run
        assert main(["report", str(dirs.reports)]) == 0
        out = capsys.readouterr().out
        assert "blackbox" in out
        assert "whitebox" in out

    def test_inspect(self, f_run, capsys):
        _, dirs = f_run
        assert main(["inspect", str(dirs.trained)]) == 0
        assert "Path count" in capsys.readouterr().out

    def test_resume_done(self, f_run):
        config, dirs = f_run
        before = read_manifest(dirs.trained)["param_hash"]
        assert main(["train", "--config", str(config), "--resume"]) == 0
        assert read_manifest(dirs.trained)["param_hash"] == before

    def test_infeasible_derive(self, f_run, capsys):
        config, _ = f_run
        code = main(["derive", "--config", str(config), "--count", "9", "--no-finetune"])
        assert code == 6
        assert "error[infeasible]" in capsys.readouterr().err

    def test_missing_surrogates(self, f_run, tmp_path, capsys):
        config, dirs = f_run
        model = sorted(dirs.derived_dir.glob("*-ft.npz"))[0]
        code = main(["eval", "--config", str(config), "--protocol", "blackbox",
                "--set", f"output_dir={tmp_path}", str(model)])
        assert code == 7
        assert "error[protocol]" in capsys.readouterr().err


class TestErrors:
    def test_missing_config(self, tmp_path, capsys):
        assert main(["build", "--config", str(tmp_path / "none.cfg")]) == 2
        assert "error[config]" in capsys.readouterr().err

    def test_bad_override(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["build", "--config", str(config), "--set", "n=two"]) == 2

    def test_bad_arch(self, tmp_path, capsys):
        config = write_config(tmp_path, TOY_ARCH + "edge fc nowhere\n")
        assert main(["build", "--config", str(config)]) == 3
        assert "error[parse]" in capsys.readouterr().err

    def test_train_before_build(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["train", "--config", str(config)]) == 4

    def test_categories(self):
        assert error_category(ConfigError("x")) == ("config", 2)
        assert error_category(KeyError("x")) == ("other", 1)
