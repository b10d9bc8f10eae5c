import json
from dataclasses import replace

import numpy as np
import pytest

from rwce import losses, trainer
from rwce.data import SyntheticSpec, generate_synthetic, standardize
from rwce.model import IntegrityError, NumericalError, load_checkpoint, save_checkpoint
from rwce.scores import ConfigError
from rwce.trainer import TrainingConfig, checkpoint_path, epoch_batches, load_run, resume, train


def small_config(**kw):
    base = dict(hidden=[8], epochs=3, batch_size=32, milestones=[2])
    base.update(kw)
    return TrainingConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(epochs=0)
    with pytest.raises(ConfigError, match="ConfTr"):
        TrainingConfig(loss="ConfTr", batch_size=1)
    with pytest.raises(ConfigError):
        TrainingConfig(alpha=1.0)
    with pytest.raises(ConfigError):
        TrainingConfig(loss="Focal")
    with pytest.raises(ConfigError):
        TrainingConfig.from_dict({"lossy": "CE"})
    assert TrainingConfig.from_dict(TrainingConfig().to_dict()) == TrainingConfig()


def test_epoch_visits_every_example_once():
    seen = np.concatenate(list(epoch_batches(103, 10, seed=4, epoch=2)))
    assert sorted(seen.tolist()) == list(range(103))
    sizes = [len(b) for b in epoch_batches(103, 10, seed=4, epoch=2)]
    assert sizes[-1] == 3 and len(sizes) == 11


@pytest.mark.parametrize("loss", losses.LOSS_KINDS)
def test_trace_and_ledger_lengths(loss, small_data):
    run = train(small_config(loss=loss), small_data)
    assert len(run.trace) == 3 and len(run.ledger) == 3
    assert [r["epoch"] for r in run.trace] == [1, 2, 3]
    assert all(np.isfinite(r["loss"]) for r in run.trace)
    assert sorted(run.checkpoints) == [1, 2, 3]


def test_runs_are_deterministic(small_data):
    a = train(small_config(), small_data)
    b = train(small_config(), small_data)
    assert a.trace == b.trace
    assert a.model.flat_params().tobytes() == b.model.flat_params().tobytes()


def test_rwce_with_unit_ranks_matches_ce(small_data, monkeypatch):
    ce = train(small_config(loss="CE"), small_data)

    def unit_rank_objective(logits, labels):
        return losses.weighted_ce_objective(logits, labels, np.ones(len(labels)))

    monkeypatch.setattr(losses, "rwce_objective", unit_rank_objective)
    rw = train(small_config(loss="RWCE"), small_data)
    assert rw.model.flat_params().tobytes() == ce.model.flat_params().tobytes()
    assert [r["loss"] for r in rw.trace] == [r["loss"] for r in ce.trace]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_reports_step_and_batch(small_data):
    with pytest.raises(NumericalError, match=r"step \d+: .*\(batch [0-9a-f]{16}\)"):
        train(small_config(lr=1e200, momentum=0.0), small_data)


def test_separable_two_class_rank_near_one():
    ranks = []
    for seed in range(5):
        data = standardize(generate_synthetic(SyntheticSpec(seed=seed, n_classes=2, n_features=5, separation=8.0,
                                                            n_train=500, n_val=200, n_cal=50, n_test=50)))
        run = train(TrainingConfig(loss="RWCE", hidden=[8], epochs=20, batch_size=32, milestones=[],
                                   init_seed=seed, shuffle_seed=seed), data)
        ranks.append(float(run.ledger[-1]["E_rank"]))
    assert np.mean(ranks) < 1.1


def test_run_dir_layout(tmp_path, small_data):
    run = train(small_config(), small_data, tmp_path / "run")
    d = run.run_dir
    assert json.loads((d / "config.json").read_text())["epochs"] == 3
    assert (d / "trace.csv").read_text().splitlines()[0] == "epoch,loss,mean_rank,mean_ce,rwce,lr"
    assert len((d / "ledger.csv").read_text().splitlines()) == 4
    for e in (1, 2, 3):
        model, epoch = load_checkpoint(checkpoint_path(d, e))
        assert epoch == e
    final, _ = load_checkpoint(checkpoint_path(d, 3))
    assert final.flat_params().tobytes() == run.model.flat_params().tobytes()


def test_checkpoint_save_load_save_identical(tmp_path, small_data):
    run = train(small_config(epochs=1), small_data, tmp_path / "run")
    src = checkpoint_path(run.run_dir, 1)
    model, epoch = load_checkpoint(src, opt := run.config.optimizer())
    save_checkpoint(tmp_path / "again.json", model, opt, epoch)
    assert src.read_bytes() == (tmp_path / "again.json").read_bytes()


def test_checkpoint_cadence(small_data):
    run = train(small_config(epochs=5, checkpoint_every=2), small_data)
    assert sorted(run.checkpoints) == [2, 4, 5]


def test_resume_matches_straight_run(tmp_path, small_data):
    cfg = small_config(epochs=20, milestones=[15])
    straight = train(cfg, small_data, tmp_path / "a")
    train(replace(cfg, epochs=10), small_data, tmp_path / "b")
    resumed = resume(tmp_path / "b", small_data, 10)
    assert resumed.model.flat_params().tobytes() == straight.model.flat_params().tobytes()
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    assert (tmp_path / "a" / "ledger.csv").read_bytes() == (tmp_path / "b" / "ledger.csv").read_bytes()


def test_resume_zero_epochs_is_noop(tmp_path, small_data):
    run = train(small_config(), small_data, tmp_path / "r")
    before = {p.name: p.read_bytes() for p in (tmp_path / "r").rglob("*") if p.is_file()}
    again = resume(tmp_path / "r", small_data, 0)
    after = {p.name: p.read_bytes() for p in (tmp_path / "r").rglob("*") if p.is_file()}
    assert before == after
    assert again.model.flat_params().tobytes() == run.model.flat_params().tobytes()


def test_resume_architecture_mismatch(tmp_path, small_data):
    train(small_config(), small_data, tmp_path / "r")
    cfg = json.loads((tmp_path / "r" / "config.json").read_text())
    cfg["hidden"] = [16]
    (tmp_path / "r" / "config.json").write_text(json.dumps(cfg))
    with pytest.raises(IntegrityError):
        resume(tmp_path / "r", small_data, 1)


def test_resume_dataset_mismatch(tmp_path, small_data):
    train(small_config(), small_data, tmp_path / "r")
    other = generate_synthetic(SyntheticSpec(seed=0, n_classes=3, n_features=2, n_train=20, n_val=5,
                                             n_cal=5, n_test=5))
    with pytest.raises(IntegrityError):
        resume(tmp_path / "r", other, 1)


def test_resume_corrupt_checkpoint(tmp_path, small_data):
    train(small_config(), small_data, tmp_path / "r")
    path = checkpoint_path(tmp_path / "r", 3)
    path.write_text(path.read_text().replace('"epoch": 3', '"epoch": 4'))
    with pytest.raises(IntegrityError):
        resume(tmp_path / "r", small_data, 1)


def test_load_run_without_checkpoints(tmp_path):
    (tmp_path / "config.json").write_text(json.dumps(TrainingConfig().to_dict()))
    with pytest.raises(FileNotFoundError):
        load_run(tmp_path)


def test_select_best_uses_smallest_val_sets(small_data):
    run = train(small_config(epochs=4, select_best=True), small_data)
    best = min(run.ledger, key=lambda r: r["E_set_size"])
    assert run.model.flat_params().tobytes() == run.checkpoints[best["epoch"]].flat_params().tobytes()


def test_conftr_and_cut_use_conformal_term(small_data):
    ce = train(small_config(loss="CE"), small_data)
    for loss in ("ConfTr", "CUT"):
        run = train(small_config(loss=loss), small_data)
        assert run.model.flat_params().tobytes() != ce.model.flat_params().tobytes()
        assert run.trace[0]["loss"] > run.trace[0]["mean_ce"] - 1e-12
