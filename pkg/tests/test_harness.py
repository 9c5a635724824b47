from __future__ import annotations

import csv
import json
import math
import shutil
from collections import Counter
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cyberood import cli, harness, monitor
from cyberood.harness import ConfigError, ExperimentConfig, model_path, switch_timestep

QUIET = {"log": lambda _: None}
SMALL = "n_train = 20\nhorizon = 20\nn_eval = 6\nseed = 7\n"


def small(out: Path, **kw) -> ExperimentConfig:
    return ExperimentConfig.parse(SMALL, out=out, **kw)


@pytest.fixture(scope="module")
def trained(tmp_path_factory) -> ExperimentConfig:
    cfg = small(tmp_path_factory.mktemp("small"))
    harness.cmd_collect(cfg, **QUIET)
    harness.cmd_train(cfg, **QUIET)
    return cfg


def read_csv(path: Path) -> list[dict]:
    with path.open() as fh:
        return list(csv.DictReader(fh))


def artifacts(directory: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != "timing.json"}


class TestConfig:
    def test_defaults_are_desk_scale(self):
        cfg = ExperimentConfig()
        assert (cfg.n_train, cfg.horizon, cfg.n_eval) == (500, 50, 200)
        assert cfg.rhos == (0.0, 1e-5, 1e-4, 1e-3)

    def test_paper_scale(self):
        cfg = ExperimentConfig().paper_scale()
        assert (cfg.n_train, cfg.horizon, cfg.n_eval) == (10_000, 100, 1_000)

    def test_parse_values_and_aliases(self):
        cfg = ExperimentConfig.parse(
            "# desk\nred_strategy = bline\ntau = 30  # steps\nrho = 0, 1e-3\n"
            "with_safe_action = no\nseed = 0x10\nmodel_dir = m\n")
        assert cfg.strategies == ("bline",)
        assert cfg.horizon == 30
        assert cfg.rhos == (0.0, 1e-3)
        assert cfg.with_safe_action is False
        assert cfg.seed == 16
        assert cfg.models == Path("m")

    def test_overrides_win(self):
        cfg = ExperimentConfig.parse("seed = 3\n", seed=9, out=None)
        assert cfg.seed == 9 and cfg.out == Path("runs")

    @pytest.mark.parametrize("text", [
        "n_eval = 0", "n_train = 0", "horizon = 1", "rho = 1.5", "rho = -0.1", "rho = ",
        "red_strategy = ransom", "with_ood = false", "seed = -1", f"seed = {2 ** 64}",
        "colour = red", "seed = 1\nseed = 2", "just words", "= 3", "horizon = ten", "with_ood = maybe",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse(text)

    @given(st.integers(2, 10_000))
    def test_switch_window(self, horizon):
        lo, hi = math.ceil(horizon / 4), max(math.ceil(horizon / 4), math.floor(3 * horizon / 4))
        for e in range(5):
            assert lo <= switch_timestep(0, e, horizon) <= hi

    def test_switch_timestep_spread(self):
        got = Counter(switch_timestep(1, e, 50) for e in range(2000))
        assert set(got) == set(range(13, 38))


class TestCommands:
    def test_collect_sizes(self, trained):
        summary = json.loads((trained.out / "summary.json").read_text())
        assert summary["command"] == "train"
        for tag in ("anti-meander", "anti-bline"):
            ds = monitor.load(harness.dataset_path(trained, tag))
            assert len(ds.records) == 20 * 20
            assert monitor.load(model_path(trained.out, tag)).n_records == 400

    def test_train_needs_dataset(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.cmd_train(small(tmp_path), **QUIET)

    def test_eval_tables_agree(self, trained, tmp_path):
        cfg = replace(trained, out=tmp_path, model_dir=trained.out)
        summary = harness.cmd_eval(cfg, **QUIET)
        rows = read_csv(tmp_path / "episodes.csv")
        table = read_csv(tmp_path / "rho_table.csv")
        assert len(rows) == 2 * 4 * 6
        assert len(table) == 2 * 4
        for line in table:
            mine = [r for r in rows if r["strategy"] == line["strategy"] and r["rho"] == line["rho"]]
            assert int(line["total_episodes"]) == len(mine) == 6
            assert int(line["ood_episodes"]) == sum(int(r["ood_episode"]) for r in mine)
            assert summary["ood_episodes"][f"{line['strategy']}@{line['rho']}"] == int(line["ood_episodes"])
        for r in rows:
            assert int(r["ood_episode"]) == (int(r["ood_transitions"]) > 0)
            assert (r["first_ood_t"] == "") == (r["ood_transitions"] == "0")

    def test_switch_rows(self, trained, tmp_path):
        cfg = replace(trained, out=tmp_path, model_dir=trained.out)
        summary = harness.cmd_switch(cfg, **QUIET)
        rows = read_csv(tmp_path / "episodes.csv")
        assert {r["arm"] for r in rows} == {"safe", "nosafe"}
        assert len(rows) == 12
        for r in rows:
            assert 5 <= int(r["switch_t"]) <= 15
            if r["first_ood_t"]:
                assert int(r["first_ood_t"]) > 0
        assert summary["arms"]["safe"]["episodes"] == 6

    def test_unknown_arms(self, trained, tmp_path):
        cfg = replace(trained, out=tmp_path, model_dir=trained.out)
        summary = harness.cmd_unknown(cfg, **QUIET)
        assert set(summary["arms"]) == {"unknown", "known"}

    def test_missing_model(self, tmp_path):
        with pytest.raises(monitor.MonitorError):
            harness.cmd_eval(small(tmp_path), **QUIET)

    def test_wrong_model_tag(self, trained, tmp_path):
        shutil.copy(model_path(trained.out, "anti-meander"), model_path(tmp_path, "anti-bline"))
        cfg = replace(trained, out=tmp_path, strategies=("bline",))
        with pytest.raises(monitor.PolicyMismatch):
            harness.cmd_eval(cfg, **QUIET)

    def test_switch_needs_monitor(self, trained, tmp_path):
        cfg = replace(trained, out=tmp_path, with_safe_action=False, with_ood=False)
        with pytest.raises(ConfigError):
            harness.cmd_switch(cfg, **QUIET)


class TestDeterminism:
    def run_all(self, out: Path) -> dict[str, bytes]:
        cfg = small(out)
        for name in ("collect", "train", "eval"):
            harness.COMMANDS[name](cfg, **QUIET)
        return artifacts(out)

    def test_repeat_runs_are_byte_identical(self, tmp_path):
        first = self.run_all(tmp_path / "a")
        second = self.run_all(tmp_path / "b")
        assert set(first) >= {"dataset-anti-meander.txt", "model-anti-bline.txt", "episodes.csv",
                              "rho_table.csv", "summary.json"}
        assert first == second

    def test_seed_changes_data(self, tmp_path):
        a, b = small(tmp_path / "a"), small(tmp_path / "b", seed=8)
        harness.cmd_collect(a, **QUIET)
        harness.cmd_collect(b, **QUIET)
        name = "dataset-anti-meander.txt"
        assert (a.out / name).read_bytes() != (b.out / name).read_bytes()


class TestCli:
    def write(self, tmp_path: Path, text: str) -> str:
        path = tmp_path / "exp.cfg"
        path.write_text(text)
        return str(path)

    def test_pipeline_exit_codes(self, tmp_path):
        config = self.write(tmp_path, SMALL)
        out = str(tmp_path / "run")
        for command in ("collect", "train", "eval", "switch", "unknown"):
            assert cli.main([command, "--config", config, "--out", out, "--seed", "3"]) == 0
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["config"]["seed"] == 3

    def test_config_error(self, tmp_path, capsys):
        config = self.write(tmp_path, "n_eval = 0\n")
        assert cli.main(["eval", "--config", config, "--out", str(tmp_path)]) == 2
        assert "n_eval" in capsys.readouterr().err

    def test_unreadable_config(self, tmp_path):
        assert cli.main(["collect", "--config", str(tmp_path / "nope.cfg")]) == 2

    def test_missing_model_exit_code(self, tmp_path):
        config = self.write(tmp_path, SMALL)
        assert cli.main(["eval", "--config", config, "--out", str(tmp_path / "empty")]) == 3

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            cli.main(["fly"])

    def test_paper_scale_flag(self):
        args = cli.build_parser().parse_args(["eval", "--paper-scale", "--seed", "5"])
        cfg = cli.load_config(args)
        assert (cfg.n_train, cfg.horizon, cfg.n_eval, cfg.seed) == (10_000, 100, 1_000, 5)
