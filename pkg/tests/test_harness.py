import json
from dataclasses import fields

import numpy as np
import pytest

from matcn import cli
from matcn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from matcn.config import ConfigError, RunConfig, load_config, read_config_file
from matcn.metrics import MetricsReport, compute_metrics
from matcn.optim import NumericalError
from matcn.siamese import SiameseConfig, init_siamese
from matcn.tensor import Tensor
from matcn.train import evaluate_checkpoint, split_drivers, train_model

TINY = dict(d=8, n_heads=2, n_blocks=1, kernel_size=3, head_hidden1=8, head_hidden2=4, batch_size=4,
            max_epochs=2, steps_per_epoch=2, n_val_pairs=8, n_test_pairs=12, lr=3e-3)


# ---------------------------------------------------------------- metrics

def test_degenerate_scorer():
    r = compute_metrics([0] * 50 + [1] * 50, np.zeros(100))
    assert (r.accuracy, r.recall, r.f1) == (0.5, 0.0, 0.0)


def test_perfect_scorer():
    r = compute_metrics([0, 1, 0, 1], [0.1, 0.9, 0.2, 0.6])
    assert (r.accuracy, r.recall, r.f1) == (1.0, 1.0, 1.0)


def test_hand_confusion():
    r = MetricsReport.from_confusion(tp=40, fp=10, tn=40, fn=10)
    assert r.accuracy == pytest.approx(0.8) and r.recall == pytest.approx(0.8) and r.f1 == pytest.approx(0.8)
    assert r.tp + r.fp + r.tn + r.fn == r.n_pairs == 100


def test_threshold_boundary_counts_as_different():
    assert compute_metrics([1], [0.5]).tp == 1


def test_f1_is_harmonic_mean():
    r = MetricsReport.from_confusion(tp=30, fp=5, tn=45, fn=20)
    assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))


# ----------------------------------------------------------------- config

def test_run_config_covers_model_fields():
    names = set(RunConfig.field_types())
    assert {f.name for f in fields(SiameseConfig)} <= names
    assert {"lr", "batch_size", "max_epochs", "patience", "seed", "threshold", "corpus"} <= names


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nd = 32\nn_heads = 4\ndisable_mhsa = yes\nlr = 6e-5  # fine-tune\n"
                    "[synth]\nn_drivers = 7\n")
    cfg = load_config(path, {"d": "16"})
    assert (cfg.d, cfg.n_heads, cfg.disable_mhsa, cfg.lr) == (16, 4, True, 6e-5)
    assert read_config_file(path, "synth") == {"n_drivers": "7"}


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nope": "1"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"lr": "0"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"disable_mhsa": "maybe"})
    (tmp_path / "bad.cfg").write_text("just words\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.cfg")


def test_config_digest_tracks_values():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig().digest() != RunConfig(seed=1).digest()


def test_every_field_has_a_cli_flag():
    parser = cli.build_parser()
    args = parser.parse_args(["train"] + [f"--{n.replace('_', '-')}=1" for n in RunConfig.field_types()])
    assert all(getattr(args, "cfg_" + n) == "1" for n in RunConfig.field_types())


def test_ablation_flags_are_independent():
    a = RunConfig(disable_mhsa=True).model_config()
    b = RunConfig(disable_aggregation=True).model_config()
    assert a.disable_mhsa and not a.disable_aggregation and b.disable_aggregation and not b.disable_mhsa


# ------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip_bytes(tmp_path, rng):
    params = init_siamese(SiameseConfig(d=8, n_heads=2, n_blocks=1, kernel_size=3), rng)
    save_checkpoint(tmp_path / "a.ckpt", params, {"d": 8}, {"norm.mean": rng.normal(size=12)})
    p2, cfg, buf = load_checkpoint(tmp_path / "a.ckpt")
    assert cfg == {"d": 8} and list(p2) == list(params)
    for k in params:
        assert np.array_equal(params[k].data, p2[k].data) and params[k].shape == p2[k].shape
    save_checkpoint(tmp_path / "b.ckpt", p2, cfg, buf)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
    save_checkpoint(tmp_path / "y.ckpt", {"w": Tensor(np.ones(3))}, {})
    (tmp_path / "y.ckpt").write_bytes((tmp_path / "y.ckpt").read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "y.ckpt")


# ------------------------------------------------------------------ train

def test_split_is_driver_disjoint():
    drivers = [f"d{i:02d}" for i in range(20)]
    s = split_drivers(drivers, 0.3, 0.15, seed=2)
    assert len(s.test) == 6 and not set(s.test) & (set(s.train) | set(s.val))
    assert sorted(s.train + s.val + s.test) == drivers
    assert split_drivers(drivers, 0.3, 0.15, seed=2) == s


def test_seed_determinism(tmp_path, tiny_corpus):
    cfg = RunConfig(**TINY)
    train_model(tiny_corpus, cfg, tmp_path / "a")
    train_model(tiny_corpus, cfg, tmp_path / "b")
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()


def test_log_has_required_columns(tmp_path, tiny_corpus):
    train_model(tiny_corpus, RunConfig(**TINY), tmp_path)
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_accuracy,val_recall,val_f1"


def test_nan_loss_aborts(monkeypatch, tiny_corpus):
    import matcn.train as train_mod
    monkeypatch.setattr(train_mod, "pair_loss", lambda p, c, b: Tensor(np.array(np.nan)))
    with pytest.raises(NumericalError, match="non-finite"):
        train_model(tiny_corpus, RunConfig(**TINY))


def test_eval_reproduces_after_reload(tmp_path, tiny_corpus):
    train_model(tiny_corpus, RunConfig(**TINY), tmp_path)
    r1, s1, _ = evaluate_checkpoint(tmp_path / "best.ckpt", tiny_corpus)
    r2, s2, _ = evaluate_checkpoint(tmp_path / "best.ckpt", tiny_corpus)
    assert r1 == r2 and np.array_equal(s1, s2)


def test_ablation_parameter_audit(tmp_path, tiny_corpus):
    full = train_model(tiny_corpus, RunConfig(**TINY)).params
    ablated = train_model(tiny_corpus, RunConfig(**TINY, disable_mhsa=True, disable_aggregation=True)).params
    removed = set(full) - set(ablated)
    assert removed and not set(ablated) - set(full)
    assert all(".mhsa." in k or ".agg" in k or ".target." in k for k in removed)
    assert sum(t.size for t in ablated.values()) < sum(t.size for t in full.values())


# -------------------------------------------------------------------- cli

def test_cli_rfs(capsys):
    assert cli.main(["rfs", "--n", "4", "--k", "10", "--b", "2"]) == 0
    assert capsys.readouterr().out.splitlines()[1] == "4,10,2,271"
    assert cli.main(["rfs", "--n", "1", "--k", "1", "--b", "2"]) == 0
    assert capsys.readouterr().out.splitlines()[1] == "1,1,2,1"


def test_cli_rfs_sweep_is_monotone(capsys):
    cli.main(["rfs", "--n", "1-4", "--k", "2-5", "--b", "1-3"])
    rows = [list(map(int, r.split(","))) for r in capsys.readouterr().out.splitlines()[1:]]
    table = {tuple(r[:3]): r[3] for r in rows}
    for (n, k, b), v in table.items():
        for nxt in ((n + 1, k, b), (n, k + 1, b), (n, k, b + 1)):
            assert table.get(nxt, v) >= v


def test_cli_exit_codes(tmp_path, capsys):
    (tmp_path / "empty.csv").write_text("")
    assert cli.main(["preprocess", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "c")]) == 2
    assert cli.main(["train", "--lr", "-1"]) == 1
    assert cli.main(["train", "--corpus", str(tmp_path / "missing")]) == 2
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["synth", "--out", str(tmp_path / "x.csv"), "--trips-per-day", "3"]) == 1


def test_cli_pipeline(tmp_path, capsys):
    raw, corpus = tmp_path / "raw.csv", tmp_path / "corpus"
    assert cli.main(["synth", "--out", str(raw), "--n-drivers", "4", "--days", "2", "--seed", "1"]) == 0
    assert cli.main(["preprocess", str(raw), "--out", str(corpus)]) == 0
    out = capsys.readouterr().out
    assert "retained,80" in out
    first = (corpus / "trajectories.jsonl").read_bytes()
    assert cli.main(["preprocess", str(raw), "--out", str(corpus)]) == 0
    assert (corpus / "trajectories.jsonl").read_bytes() == first

    flags = [f"--{k.replace('_', '-')}={v}" for k, v in TINY.items()]
    run = tmp_path / "run"
    assert cli.main(["train", "--corpus", str(corpus), "--out-dir", str(run), *flags]) == 0
    for name in ("best.ckpt", "train_log.csv", "loss_curve.svg", "test_scores.svg", "metrics.json"):
        assert (run / name).exists()
    assert (run / "loss_curve.svg").read_text().lstrip().startswith("<?xml")
    assert cli.main(["eval", "--checkpoint", str(run / "best.ckpt"), "--corpus", str(corpus),
                     "--out", str(tmp_path / "m.json")]) == 0
    trained = json.loads((run / "metrics.json").read_text())
    trained.pop("split")
    assert json.loads((tmp_path / "m.json").read_text()) == trained


def test_gradcheck_mutation_names_operation(monkeypatch):
    from matcn import tensor as T
    from matcn.checks import run_gradcheck_suite
    cfg = SiameseConfig(d=8, n_heads=2, n_blocks=1, kernel_size=3, lat_vocab=8, lon_vocab=8,
                        head_hidden1=8, head_hidden2=4)
    assert all(r.passed for r in run_gradcheck_suite(cfg=cfg, model_entries=2))
    monkeypatch.setitem(T.DERIVATIVES, "sigmoid", lambda x, y: y)
    failed = [r.label for r in run_gradcheck_suite(cfg=cfg, model_entries=2) if not r.passed]
    assert "sigmoid" in failed and "tanh" not in failed
