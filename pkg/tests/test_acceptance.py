"""Acceptance criteria 1 to 9; each test records one PASS/FAIL line for the run summary.

Criteria 7 and 8 train the benchmark model many times and take most of the
suite's runtime. Deselect them with ``-m "not slow"``.
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from constructions import collapsed_intent_run, decisive_mask_run, pinned_gate_max_diff
from mim import tensors as T
from mim.cli import main
from mim.config import load_config
from mim.data import generate_corpus
from mim.experiments import ROW_NAMES, ablate, sweep_intents
from mim.intents import distribution_loss, kl_loss
from mim.matcher import match_loss
from mim.metrics import accuracy, auc, f1
from mim.tensors import Tensor
from mim.train import evaluate, load_params, train

ROOT = Path(__file__).resolve().parents[1]
BENCHMARK = ROOT / "configs" / "benchmark.toml"
SEEDS = [0, 1, 2, 3, 4]
BENCH_AUC = 0.90
BENCH_BUDGET_S = 15 * 60

TINY_TOML = """
[encoder]
vocab_size = 40
d = 16
heads = 2
layers = 1
ffn_dim = 32
max_len = 64

[intents]
c = 2

[corpus]
vocab_size = 40
tokens_per_intent = 1
num_train = 64
num_valid = 32
num_test = 32

[train]
epochs = 2
batch_size = 16
"""


@pytest.fixture(scope="module")
def bench():
    config = load_config(BENCHMARK)
    return config, generate_corpus(config.corpus)


@pytest.mark.criterion(1)
def test_gradient_integrity(tmp_path, verdict):
    start = time.perf_counter()
    code = main(["grad-check", "--config", str(BENCHMARK), "--out", str(tmp_path), "--trials", "50"])
    elapsed = time.perf_counter() - start
    with open(tmp_path / "gradcheck.csv") as fh:
        rows = list(csv.DictReader(fh))
    ops = max(float(r["max_rel_err"]) for r in rows if r["kind"] == "op")
    losses = {r["name"]: float(r["max_rel_err"]) for r in rows if r["kind"] == "loss"}
    ok = (
        code == 0
        and set(losses) == {"match", "dis", "kl", "mask", "total"}
        and max(losses.values()) < 1e-3
        and ops < 1e-4
        and elapsed < 120
    )
    worst = max(losses, key=losses.get)
    verdict(ok, f"worst op {ops:.1e}, worst loss {worst} {losses[worst]:.1e}, {elapsed:.0f}s")
    assert ok


@pytest.mark.criterion(2)
def test_pinned_gates_reduce_to_plain_encoder(verdict):
    worst = max(pinned_gate_max_diff(seed) for seed in range(5))
    ok = worst < 1e-5
    verdict(ok, f"max abs diff {worst:.1e}")
    assert ok


@pytest.mark.criterion(3)
def test_distribution_loss_behaviour(verdict):
    spread = sum(after > before for before, after in (collapsed_intent_run(seed) for seed in range(20)))
    with T.default_dtype(np.float64):
        h = Tensor(np.array([1.0, 1.0]) / math.sqrt(2))
        orthogonal = distribution_loss(Tensor(np.eye(2)), h, tau=1.0).item()
        collapsed = distribution_loss(Tensor(np.tile(h.data, (2, 1))), h, tau=1.0).item()
    ok = (
        spread >= 19
        and abs(orthogonal + 1 / math.sqrt(2)) < 1e-5
        and abs(collapsed) < 1e-5
        and orthogonal < collapsed
    )
    verdict(ok, f"spread in {spread}/20 seeds, orthogonal {orthogonal:.5f} vs collapsed {collapsed:.5f}")
    assert ok


@pytest.mark.criterion(4)
def test_kl_contract(verdict):
    with T.default_dtype(np.float64):
        p = Tensor(np.array([[0.9, 0.1]]))
        q = Tensor(np.array([[0.5, 0.5]]))
        same = kl_loss(p, p, 1).item()
        hinge = kl_loss(p, p, 0, margin=1.0).item()
        case = kl_loss(p, q, 1).item()
    ok = same == 0.0 and hinge == 1.0 and abs(case - 0.36806) < 1e-4
    verdict(ok, f"identical {same}, hinge {hinge}, hand case {case:.5f}")
    assert ok


@pytest.mark.criterion(5)
def test_mask_task_direction(verdict):
    monotone = sum(bool(np.all(np.diff(decisive_mask_run(seed)) > 0)) for seed in range(20))
    ok = monotone >= 19
    verdict(ok, f"decisive weight rose monotonically in {monotone}/20 seeds")
    assert ok


def _pair_count_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


@pytest.mark.criterion(6)
def test_metric_oracles(verdict):
    rng = np.random.default_rng(0)
    exact = 0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[: 2] = [0, 1]
        scores = rng.integers(0, 10, n) / 10.0 if rng.random() < 0.5 else rng.random(n)
        exact += auc(scores, labels) == _pair_count_auc(scores, labels)
    with T.default_dtype(np.float64):
        ln2 = match_loss(Tensor(0.5), 1).item()
    examples = (
        auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75
        and accuracy([1, 0, 1, 0], [1, 0, 0, 0]) == 0.75
        and ln2 == math.log(2)
        and f1([1, 1, 0], [1, 0, 0]) == 2 / 3
    )
    ok = exact == 1000 and examples
    verdict(ok, f"AUC exact in {exact}/1000 trials, worked examples {'match' if examples else 'differ'}")
    assert ok


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_synthetic_benchmark(tmp_path, bench, verdict):
    config, splits = bench
    start = time.perf_counter()
    full, no_multi = ablate(config, ["no_multi_intent"], tmp_path, seeds=SEEDS, splits=splits)
    elapsed = time.perf_counter() - start
    assert no_multi.flag == "no_multi_intent"
    ok = (
        config.train.epochs <= 20
        and full.auc >= BENCH_AUC
        and full.auc > no_multi.auc
        and elapsed < BENCH_BUDGET_S
    )
    verdict(ok, f"full {full.auc:.4f} (min seed {min(full.per_seed_auc):.4f}) vs no_multi_intent "
                f"{no_multi.auc:.4f}, {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_ablation_and_sweep_harness(tmp_path, bench, verdict):
    (tmp_path / "tiny.toml").write_text(TINY_TOML)
    code = main(["ablate", "--config", str(tmp_path / "tiny.toml"), "--out", str(tmp_path / "ab"), "--seeds", "0"])
    with open(tmp_path / "ab" / "ablation.csv") as fh:
        names = [row["name"] for row in csv.DictReader(fh)]
    rows_ok = code == 0 and names == list(ROW_NAMES.values())

    config, splits = bench
    rows = sweep_intents(config, range(1, 7), tmp_path / "sweep", seeds=SEEDS, splits=splits)
    by_c = {row.c: row.auc for row in rows}
    ok = rows_ok and by_c[3] > by_c[1]
    curve = " ".join(f"c{c}={a:.4f}" for c, a in by_c.items())
    verdict(ok, f"{len(names)} ablation rows, sweep {curve}")
    assert ok


@pytest.mark.criterion(9)
def test_determinism_and_persistence(tmp_path, verdict):
    (tmp_path / "tiny.toml").write_text(TINY_TOML)
    cfg = str(tmp_path / "tiny.toml")
    outputs = []
    for name in ("a", "b"):
        data, run = tmp_path / name / "data", tmp_path / name / "run"
        assert main(["gen-data", "--config", cfg, "--out", str(data)]) == 0
        assert main(["train", "--config", cfg, "--out", str(run), "--data", str(data)]) == 0
        outputs.append([(run / f).read_bytes() for f in ("metrics.csv", "test_metrics.csv", "best.ckpt")])
    identical = outputs[0] == outputs[1]

    config = load_config(cfg)
    splits = generate_corpus(config.corpus)
    result = train(config, tmp_path / "live", splits)
    mc = config.model_config()
    _, live = evaluate(result.params, mc, splits["test"])
    _, reloaded = evaluate(load_params(mc, result.checkpoint), mc, splits["test"])
    round_trip = np.array_equal(live, reloaded)
    ok = identical and round_trip
    verdict(ok, f"repeat runs {'bit-identical' if identical else 'differ'}, "
                f"checkpoint eval {'exact' if round_trip else 'differs'}")
    assert ok
