"""Config, training loop, checkpoints, experiments and CLI on tiny runs."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mim.cli import main
from mim.config import RunConfig, TrainConfig, config_from_dict, dump_config, load_config
from mim.data import CorpusSpec, generate_corpus
from mim.encoder import EncoderConfig
from mim.errors import NumericalError, ValidationError
from mim.experiments import ROW_NAMES, ablate, remove_attribute_types, sweep_intents
from mim.intents import IntentConfig
from mim.train import evaluate, evaluate_checkpoint, load_params, train

TINY = dict(
    encoder=EncoderConfig(vocab_size=40, d=16, heads=2, layers=1, ffn_dim=32, max_len=64, init_std=0.1),
    intents=IntentConfig(c=2, tau=0.3),
    corpus=CorpusSpec(vocab_size=40, tokens_per_intent=1, num_train=96, num_valid=48, num_test=48, seed=1),
)


def tiny(**train) -> RunConfig:
    return RunConfig(**TINY, train=TrainConfig(**{"epochs": 2, "batch_size": 16, **train}))


@pytest.fixture(scope="module")
def splits():
    return generate_corpus(TINY["corpus"])


TINY_TOML = """
[encoder]
vocab_size = 40
d = 16
heads = 2
layers = 1
ffn_dim = 32
max_len = 64
init_std = 0.1

[intents]
c = 2
tau = 0.3

[corpus]
vocab_size = 40
tokens_per_intent = 1
num_train = 64
num_valid = 32
num_test = 32

[train]
epochs = 1
batch_size = 16
"""


# config


def test_config_round_trip(tmp_path):
    cfg = tiny(ablations=["no_kl"], loss_weights={"dis": 0.5})
    dump_config(cfg, tmp_path / "c.toml")
    assert load_config(tmp_path / "c.toml") == cfg


@pytest.mark.parametrize(
    "data",
    [
        {"bogus": {}},
        {"train": {"epochs": 1, "nope": 2}},
        {"train": {"ablations": ["no_such_flag"]}},
        {"train": {"clip_lo": 1.0, "clip_hi": -1.0}},
        {"encoder": {"d": 10, "heads": 4}},
        {"corpus": {"num_latent_intents": 2}},
        {"encoder": {"vocab_size": 16}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ValidationError):
        config_from_dict(data)


def test_relative_data_dir_resolves_against_config(tmp_path):
    (tmp_path / "cfg").mkdir()
    (tmp_path / "cfg" / "c.toml").write_text('[train]\ndata_dir = "../data"\n')
    cfg = load_config(tmp_path / "cfg" / "c.toml")
    assert Path(cfg.train.data_dir) == (tmp_path / "data").resolve()
    with pytest.raises(ValidationError, match="train.jsonl"):
        cfg.train.check_paths()


# training


def test_training_reduces_loss_and_writes_artefacts(tmp_path, splits):
    result = train(tiny(epochs=3), tmp_path, splits)
    for name in ("config.toml", "best.ckpt", "train_log.jsonl", "metrics.csv"):
        assert (tmp_path / name).is_file()
    assert result.loss_curve[-1] < result.loss_curve[0]
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2, 3]
    events = [json.loads(line)["event"] for line in open(tmp_path / "train_log.jsonl")]
    assert events[0] == "start" and events[-1] == "done" and events.count("epoch") == 3


def test_fixed_seed_is_bit_identical(tmp_path, splits):
    a = train(tiny(), tmp_path / "a", splits)
    b = train(tiny(), tmp_path / "b", splits)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    assert a.test_report(tiny()) == b.test_report(tiny())
    train(tiny(seed=1), tmp_path / "c", splits)
    assert (tmp_path / "c" / "best.ckpt").read_bytes() != (tmp_path / "a" / "best.ckpt").read_bytes()


def test_checkpoint_round_trip_preserves_eval(tmp_path, splits):
    cfg = tiny()
    result = train(cfg, tmp_path, splits)
    mc = cfg.model_config()
    _, live = evaluate(result.params, mc, splits["test"])
    reloaded = load_params(mc, result.checkpoint)
    _, again = evaluate(reloaded, mc, splits["test"])
    np.testing.assert_array_equal(live, again)
    assert evaluate_checkpoint(cfg, result.checkpoint, splits["test"]).auc == result.test_report(cfg).auc


def test_zero_epochs_keeps_initial_parameters(tmp_path, splits):
    cfg = tiny(epochs=0)
    result = train(cfg, tmp_path, splits)
    assert result.best_epoch == 0 and result.history == []
    from mim.model import init_params

    init = init_params(cfg.model_config(), cfg.train.seed)
    for name, t in init.items():
        np.testing.assert_array_equal(result.params[name].data, t.data)


def test_nan_loss_aborts_with_dump(tmp_path, splits, monkeypatch):
    import mim.train as train_module

    real = train_module.forward

    def poisoned(params, config, batch, **kw):
        res = real(params, config, batch, **kw)
        if kw.get("train"):
            res.losses.match.data = np.asarray(np.nan, dtype=res.losses.match.data.dtype)
        return res

    monkeypatch.setattr(train_module, "forward", poisoned)
    with pytest.raises(NumericalError):
        train(tiny(), tmp_path, splits)
    dump = json.loads((tmp_path / "nan_batch.json").read_text())
    assert dump["step"] == 0 and len(dump["labels"]) == 16


def test_best_k_keeps_k_checkpoints(tmp_path, splits):
    result = train(tiny(epochs=3, best_k=2), tmp_path, splits)
    assert len(result.best_checkpoints) == 2
    assert len(list(tmp_path.glob("epoch*.ckpt"))) == 2


@pytest.mark.parametrize("flag", ["no_gate", "no_kl", "no_dis", "no_multi_intent", "no_mask"])
def test_ablation_flags_zero_their_losses(tmp_path, splits, flag):
    result = train(tiny(epochs=1, ablations=[flag]), tmp_path, splits)
    losses = result.history[0].train_losses
    off = {"no_kl": ["kl"], "no_dis": ["dis"], "no_mask": ["mask"], "no_multi_intent": ["kl", "dis", "mask"]}
    for name in off.get(flag, []):
        assert losses[name] == 0.0
    if flag == "no_gate":
        assert not any("gate" in name for name in result.params.keys())


# experiments


def test_ablate_emits_all_rows(tmp_path, splits):
    rows = ablate(tiny(epochs=1), ["no_gate", "no_kl", "no_dis", "no_multi_intent", "no_mask"], tmp_path,
                  seeds=[0], splits=splits)
    assert [r.name for r in rows] == list(ROW_NAMES.values())
    with open(tmp_path / "ablation.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 6
    full, no_multi = rows[0], rows[4]
    assert no_multi.n_parameters < full.n_parameters


def test_sweep_writes_table(tmp_path, splits):
    rows = sweep_intents(tiny(epochs=1), [1, 2], tmp_path, seeds=[0, 1], splits=splits)
    assert [r.c for r in rows] == [1, 2]
    with open(tmp_path / "sweep.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["c", "accuracy", "auc", "f1"] and len(table) == 3


def test_remove_attribute_types(tmp_path, splits):
    cfg = tiny(epochs=1)
    result = train(cfg, tmp_path, splits)
    reports = remove_attribute_types(cfg, result.params, splits["test"])
    assert set(reports) == {"none", "entity", "location", "category"}


# command line


def test_cli_pipeline(tmp_path, capsys):
    (tmp_path / "c.toml").write_text(TINY_TOML)
    cfg, data, run = str(tmp_path / "c.toml"), str(tmp_path / "data"), str(tmp_path / "run")
    assert main(["gen-data", "--config", cfg, "--out", data]) == 0
    for split in ("train", "valid", "test"):
        assert (tmp_path / "data" / f"{split}.jsonl").is_file()
    assert main(["train", "--config", cfg, "--out", run, "--data", data, "--seed", "3"]) == 0
    assert load_config(tmp_path / "run" / "config.toml").train.seed == 3
    assert main(["eval", "--config", cfg, "--out", run, "--data", data, "--split", "valid"]) == 0
    assert (tmp_path / "run" / "eval_valid.csv").is_file()
    out = capsys.readouterr().out
    assert "valid n=32" in out


def test_cli_ablate_and_sweep(tmp_path):
    (tmp_path / "c.toml").write_text(TINY_TOML)
    cfg = str(tmp_path / "c.toml")
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "ab"), "--seeds", "0", "--flags", "no_kl"]) == 0
    assert main(["sweep-intents", "--config", cfg, "--out", str(tmp_path / "sw"), "--seeds", "0",
                 "--c-values", "1,2"]) == 0
    assert (tmp_path / "ab" / "ablation.csv").is_file() and (tmp_path / "sw" / "sweep.csv").is_file()


def test_cli_errors(tmp_path, capsys):
    (tmp_path / "c.toml").write_text(TINY_TOML)
    cfg = str(tmp_path / "c.toml")
    assert main(["train", "--config", cfg, "--out", str(tmp_path), "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.toml").write_text("[train]\nepochs = -1\n")
    assert main(["train", "--config", str(tmp_path / "bad.toml"), "--out", str(tmp_path)]) == 1
    assert main(["train", "--config", cfg, "--out", str(tmp_path), "--data", str(tmp_path / "none")]) == 1
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path), "--flags", "no_such"]) == 1


def test_cli_numerical_failure_exit_code(tmp_path, monkeypatch):
    import mim.cli as cli

    def boom(*args, **kwargs):
        raise NumericalError("non-finite loss")

    monkeypatch.setattr(cli, "train", boom)
    (tmp_path / "c.toml").write_text(TINY_TOML)
    assert main(["train", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path)]) == 2
