import json
import os
from pathlib import Path

import pytest
from omegaconf import OmegaConf

from cli_modules.config import RunConfig, default_yaml, load, run_dir
from cli_modules.rich import increment_version
from main import cli_main, fit_main
from utils.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY_FIT = """
trainer:
  logger: false
model:
  class_path: models.StableMaskLM
  init_args:
    model_config: {model_dim: 8, n_layers: 1, n_heads: 2, max_len: 6}
    train_config: {total_steps: 2, warmup_steps: 1, eval_every: 1, batch_size: 4}
    task: {kind: pos_mapping, seq_len: 6, min_train_len: 3, eval_lengths: [4], n_max: 8, n_train: 8, n_eval: 2}
data:
  class_path: datasets.TaskDataModule
"""


@pytest.fixture
def tiny_fit(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_FIT)
    return str(path)


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


class TestLoad:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("STABLEMASK_OUT", raising=False)
        cfg = load()
        assert isinstance(cfg, RunConfig)
        assert cfg.output.dir == "logs"
        assert cfg.model.vocab_size == cfg.task.vocab_size() == 36

    def test_environment_output_root(self, monkeypatch):
        monkeypatch.setenv("STABLEMASK_OUT", "/tmp/elsewhere")
        assert load().output.dir == "/tmp/elsewhere"
        assert load(flags={"out": "/tmp/flag"}).output.dir == "/tmp/flag"

    def test_layering(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  peak_lr: 0.01\n  seed: 4\nmodel:\n  mask:\n    gamma: 0.25\n")
        cfg = load(str(path))
        assert (cfg.train.peak_lr, cfg.train.seed, cfg.model.mask.gamma) == (0.01, 4, 0.25)
        cfg = load(str(path), ["train.peak_lr=0.02", "model.mask.gamma=0.75"], {"gamma": 1.5, "seed": 9})
        assert cfg.train.peak_lr == 0.02
        assert cfg.model.mask.gamma == 1.5
        assert (cfg.train.seed, cfg.task.seed, cfg.decode.seed) == (9, 9, 9)

    def test_boolean_and_kind_flags(self):
        cfg = load(flags={"headwise_gamma": True, "mask": "vanilla", "pe": "alibi", "window": 16, "plot": True})
        assert cfg.model.mask.headwise_gamma and cfg.probe.plot
        assert (cfg.model.mask.kind, cfg.model.pe.kind, cfg.decode.window) == ("vanilla", "alibi", 16)

    @pytest.mark.parametrize(
        "dotlist",
        [
            ["model.mask.gamma=0"],
            ["model.mask.gamma=-1"],
            ["model.pe.kind=xpos"],
            ["probe.kind=everything"],
            ["train.mask_mode=infer"],
            ["model.no_such_key=1"],
            ["train.total_steps=many"],
        ],
    )
    def test_invalid(self, dotlist):
        with pytest.raises(ConfigError):
            load(dotlist=dotlist)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load(str(tmp_path / "absent.yaml"))

    @pytest.mark.parametrize("name", ["config.yaml", "soft_copy_last.yaml", "char_lm.yaml"])
    def test_shipped_configs(self, name):
        assert isinstance(load(str(CONFIGS / name)), RunConfig)

    def test_artificial_token_slot(self):
        cfg = load(dotlist=["task.at_tokens=1"])
        assert cfg.model.at_token == cfg.task.vocab.at

    def test_default_yaml_lists_every_section(self):
        tree = OmegaConf.to_container(OmegaConf.create(default_yaml()))
        assert set(tree) == {"model", "train", "task", "decode", "probe", "bench", "extrapolation", "output"}
        assert tree["model"]["mask"]["gamma"] == 0.5

    def test_run_dir(self, tmp_path):
        cfg = load(flags={"out": str(tmp_path), "name": "exp", "increment_version": True})
        os.makedirs(tmp_path / "exp" / "version_0")
        assert run_dir(cfg, "probe") == str(tmp_path / "exp" / "version_1" / "probe")
        # resolved once, later subcommands share it
        os.makedirs(tmp_path / "exp" / "version_1")
        assert run_dir(cfg, "eval") == str(tmp_path / "exp" / "version_1" / "eval")

    def test_increment_version(self, tmp_path):
        assert increment_version(str(tmp_path), "exp") == "version_0"
        os.makedirs(tmp_path / "exp" / "version_0")
        assert increment_version(str(tmp_path), "exp") == "version_1"


class TestFitCLI:
    def test_configs_reach_model_data_and_trainer(self, tiny_fit, tmp_path):
        cli = fit_main(["-c", tiny_fit, "--out", str(tmp_path), "--mask", "vanilla", "--seed", "3"], run=False)
        model, data = cli.model, cli.datamodule
        assert model.model_config.mask.kind == "vanilla"
        assert model.model_config.vocab_size == model.task.vocab_size()
        assert model.train_config.seed == model.task.seed == data.task.seed == 3
        assert data.task == model.task
        assert data.batch_size == 4
        assert cli.trainer.max_steps == 2
        assert cli.log_dir == str(tmp_path / "default_name" / "version_0" / "fit")

    @pytest.mark.parametrize("name", ["config.yaml", "position_tasks.yaml", "soft_copy_last.yaml", "char_lm.yaml"])
    def test_shipped_fit_configs(self, name, tmp_path):
        cli = fit_main(["-c", str(CONFIGS / "fit" / name), "--out", str(tmp_path)], run=False)
        assert cli.model.model_config.max_len >= cli.model.task.seq_len
        assert cli.datamodule.task == cli.model.task

    @pytest.mark.parametrize("logger", ["TensorBoardLogger", "CSVLogger"])
    def test_logger_follows_the_run_directory(self, logger, tiny_fit, tmp_path):
        args = ["-c", tiny_fit, "--out", str(tmp_path), "-n", "exp", "-v", "v3"]
        args += [f"--trainer.logger=lightning.pytorch.loggers.{logger}", "--trainer.logger.init_args.save_dir=elsewhere"]
        cli = fit_main(args, run=False)
        assert cli.trainer.log_dir == str(tmp_path / "exp" / "v3" / "fit")

    def test_fit_writes_the_run(self, tiny_fit, tmp_path, capsys):
        assert cli_main(["fit", "-c", tiny_fit, "--out", str(tmp_path), "-n", "tiny", "--json"]) == 0
        summary = last_json(capsys)
        run = tmp_path / "tiny" / "version_0" / "fit"
        assert summary["checkpoint"] == str(run / "checkpoints" / "last.ckpt")
        for name in ("metrics.jsonl", "config.yaml", "eval_samples.jsonl", "checkpoints/last.ckpt"):
            assert (run / name).exists(), name
        assert 0.0 <= summary["eval_acc"] <= 1.0
        saved = OmegaConf.load(run / "config.yaml")
        assert saved.model.class_path == "models.StableMaskLM"

    def test_refit_resumes_into_the_next_subdir(self, tiny_fit, tmp_path):
        args = ["fit", "-c", tiny_fit, "--out", str(tmp_path), "-n", "tiny"]
        assert cli_main(args) == 0
        assert cli_main(args) == 0
        run = tmp_path / "tiny" / "version_0"
        assert (run / "fit1" / "checkpoints" / "last.ckpt").exists()
        saved = OmegaConf.load(run / "fit1" / "config.yaml")
        assert saved.ckpt_path == str(run / "fit" / "checkpoints" / "last.ckpt")

    def test_increment_version_starts_fresh(self, tiny_fit, tmp_path):
        args = ["fit", "-c", tiny_fit, "--out", str(tmp_path), "-n", "tiny", "--increment_version"]
        assert cli_main(args) == 0
        assert cli_main(args) == 0
        assert (tmp_path / "tiny" / "version_1" / "fit" / "metrics.jsonl").exists()
        assert not (tmp_path / "tiny" / "version_0" / "fit1").exists()


class TestExitCodes:
    def test_defaults_command(self, capsys):
        assert cli_main(["defaults"]) == 0
        assert "max_len" in capsys.readouterr().out

    def test_config_error_is_one(self, tiny_fit, tmp_path):
        assert cli_main(["fit", "-c", str(tmp_path / "nope.yaml")]) == 1
        assert cli_main(["fit", "-c", tiny_fit, "--out", str(tmp_path), "--gamma=-1"]) == 1
        assert cli_main(["probe", "-c", str(tmp_path / "nope.yaml"), "--ckpt", "x.ckpt"]) == 1

    def test_train_is_not_a_hand_parsed_command(self, tmp_path):
        assert cli_main(["train", "--out", str(tmp_path)]) == 1

    def test_missing_checkpoint_is_two(self, tmp_path):
        assert cli_main(["eval", "--out", str(tmp_path), "--ckpt", str(tmp_path / "absent.ckpt")]) == 2

    def test_bench(self, tmp_path, capsys):
        code = cli_main(
            ["bench", "--out", str(tmp_path), "--json", "bench.lengths=[8]", "bench.block_sizes=[4]", "bench.repeats=1"]
        )
        assert code == 0
        rows = last_json(capsys)
        assert rows[0]["n"] == 8 and rows[0]["max_diff"] < 1e-10
        assert (tmp_path / "default_name" / "version_0" / "bench" / "streamed.csv").exists()

    def test_report_without_runs_is_one(self, tmp_path):
        assert cli_main(["report", "--out", str(tmp_path), "--table", "positions"]) == 1

    @pytest.mark.slow
    def test_verify(self, capsys):
        assert cli_main(["verify", "--json"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["passed"]
        checks = {c["name"]: c for c in report["checks"]}
        assert set(checks) >= {"suffix_equivalence", "streamed_equivalence", "attention_gradients"}
        assert checks["streamed_equivalence"]["details"]["instances"] >= 100
        assert checks["attention_gradients"]["details"]["seeds"] == 20


@pytest.mark.slow
def test_fit_then_inspect(tiny_fit, tmp_path, capsys):
    out = str(tmp_path)
    assert cli_main(["fit", "-c", tiny_fit, "--out", out, "-n", "tiny", "--json"]) == 0
    ckpt = last_json(capsys)["checkpoint"]
    run = tmp_path / "tiny" / "version_0"

    assert cli_main(["eval", "--out", out, "-n", "tiny", "--ckpt", ckpt]) == 0
    evals = (run / "eval" / "eval.csv").read_text().splitlines()
    assert {"mask", "pe", "seed", "accuracy"} <= set(evals[0].split(","))

    assert cli_main(["probe", "--out", out, "-n", "tiny", "--ckpt", ckpt, "--kind", "mask_ratio"]) == 0
    assert (run / "probe" / "mask_ratio.csv").exists()

    assert cli_main(["probe", "--out", out, "-n", "tiny", "--ckpt", ckpt, "--kind", "first_token", "--plot"]) == 0
    assert (run / "probe" / "first_token.png").exists()

    assert cli_main(["probe", "--out", out, "-n", "tiny", "--ckpt", ckpt, "--kind", "dump", "--plot"]) == 0
    assert (run / "probe" / "attention.png").exists()

    # position tasks have no exact information ratio
    assert cli_main(["probe", "--out", out, "-n", "tiny", "--ckpt", ckpt, "--kind", "da_scan"]) == 1

    capsys.readouterr()
    assert cli_main(["report", "--out", out, "-n", "summary", "--table", "positions", "--json"]) == 0
    (row,) = last_json(capsys)
    assert (row["pe"], row["mask"]) == ("rope", "stablemask")
    assert 0.0 <= row["pos_mapping"] <= 1.0

    assert cli_main(["generate", "--out", out, "--ckpt", ckpt, "--prompt", "0 0", "--json", "decode.max_new_tokens=3"]) == 0
    tokens = last_json(capsys)["tokens"]
    assert tokens[:2] == [0, 0] and len(tokens) == 5
