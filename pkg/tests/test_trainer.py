from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from dentage import trainer
from dentage.augment import AugmentationConfig
from dentage.backbones import truncate_inception
from dentage.dataset import DatasetSplit, PreprocessSpec, load_manifest, split_dataset
from dentage.errors import EmptySplit, NonFiniteLoss
from dentage.regressor import assemble, load_checkpoint
from dentage.trainer import TrainingConfig, TrainingState, read_history, should_stop, simulate_schedule, step_scheduler

# --- scheduler contract (no model) -----------------------------------------


def test_constant_loss_schedule():
    state = simulate_schedule([1.0] * 100, TrainingConfig(initial_lr=1e-3))
    assert state.reductions == [8, 15, 22]
    assert state.current_lr == pytest.approx(5.12e-4, rel=1e-12)
    assert state.epoch == 26 and state.stop_reason == "early_stop"
    assert state.best_epoch == 1


def test_improving_loss_never_reduces_and_hits_cap():
    state = simulate_schedule([100.0 - 0.1 * i for i in range(600)], TrainingConfig())
    assert state.reductions == [] and state.current_lr == 1e-3
    assert state.epoch == 500 and state.stop_reason == "max_epochs"


def test_improvement_resets_counter():
    losses = [1.0] * 5 + [0.5] + [0.5] * 20
    state = TrainingState(1e-3)
    cfg = TrainingConfig()
    for i, loss in enumerate(losses, start=1):
        state.record(0.0, loss)
        step_scheduler(state, cfg)
        if i == 6:
            assert state.reductions == [] and state.epochs_since_best == 0
    assert state.reductions[0] == 13


def test_late_improvement_capped_by_max_epochs():
    losses = [1000.0 - i for i in range(489)] + [0.0] + [1.0] * 50
    state = simulate_schedule(losses, TrainingConfig())
    assert state.epoch == 500 and state.stop_reason == "max_epochs" and state.best_epoch == 490


def test_lr_algebra_has_no_drift():
    cfg = TrainingConfig(initial_lr=3e-4, plateau_patience=1, early_stop_patience=1000, max_epochs=1000)
    state = simulate_schedule([1.0] * 200, cfg)
    assert len(state.reductions) > 100
    assert state.current_lr == 3e-4 * 0.8 ** len(state.reductions)


def test_best_loss_invariants():
    rng = np.random.default_rng(0)
    state = simulate_schedule(list(rng.uniform(1, 2, 40)), TrainingConfig())
    vals = [r.val_loss for r in state.history]
    assert state.best_val_loss == min(vals)
    assert state.epochs_since_best == state.epoch - state.best_epoch


@pytest.mark.parametrize("kwargs", [
    dict(plateau_factor=1.0), dict(plateau_factor=0.0), dict(plateau_patience=25),
    dict(max_epochs=10), dict(batch_size=0), dict(initial_lr=-1.0),
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainingConfig(**kwargs)


def test_should_stop_only_at_end_conditions():
    state = TrainingState(1e-3, epoch=10, best_epoch=10)
    assert not should_stop(state, TrainingConfig())


def test_history_round_trip(tmp_path):
    state = simulate_schedule([3.0, 2.0, 2.5], TrainingConfig())
    path = trainer.write_history(state, tmp_path / "history.csv")
    assert path.read_text().splitlines()[0] == "epoch,train_loss,val_loss,train_mae,val_mae,lr"
    rows = read_history(path)
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert [r["val_loss"] for r in rows] == [3.0, 2.0, 2.5]


# --- real training on a tiny model -----------------------------------------

TINY = dict(plateau_patience=1, early_stop_patience=2, max_epochs=3, batch_size=8)


@pytest.fixture(scope="module")
def tiny_split(tiny_synth_dir):
    return split_dataset(load_manifest(tiny_synth_dir / "manifest.csv"), (24, 8, 8), seed=0)


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return assemble(truncate_inception(3, pretrained=False, input_shape=(96, 96, 3)))


@pytest.fixture(scope="module")
def trained(tiny_split, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    model = tiny_model()
    ckpt, state = trainer.train(model, tiny_split, TrainingConfig(**TINY, initial_lr=1e-2), out_dir=out)
    return model, ckpt, state


def test_train_writes_checkpoint_and_history(trained, tiny_split):
    model, ckpt, state = trained
    assert (ckpt / "weights.pt").is_file() and (ckpt / "model.json").is_file()
    rows = read_history(ckpt / "history.csv")
    assert len(rows) == state.epoch == len(state.history)
    for prev, cur in zip(rows, rows[1:]):
        if prev["epoch"] in state.reductions:
            assert cur["lr"] == pytest.approx(prev["lr"] * 0.8, rel=1e-12)
        else:
            assert cur["lr"] == prev["lr"]
    assert all(math.isfinite(r["train_loss"]) for r in rows)


def test_checkpoint_reproduces_best_val_loss(trained, tiny_split):
    _, ckpt, state = trained
    loaded, meta = load_checkpoint(ckpt)
    bank = trainer.ImageBank(tiny_split.val, PreprocessSpec(96, 96, normalization=loaded.normalization))
    val_loss, _, _ = trainer.evaluate_loss(loaded, bank)
    assert val_loss == pytest.approx(state.best_val_loss, rel=1e-5)
    assert meta["best_epoch"] == state.best_epoch


def test_model_holds_best_weights_after_training(trained, tiny_split):
    model, _, state = trained
    bank = trainer.ImageBank(tiny_split.val, PreprocessSpec(96, 96))
    assert trainer.evaluate_loss(model, bank)[0] == pytest.approx(state.best_val_loss, rel=1e-5)


def test_zero_lr_keeps_train_loss(tiny_split):
    cfg = TrainingConfig(**TINY, initial_lr=0.0, shuffle=False)
    _, state = trainer.train(tiny_model(), tiny_split, cfg, aug=AugmentationConfig.identity())
    losses = [r.train_loss for r in state.history]
    assert max(losses) - min(losses) <= 1e-9 * max(1.0, abs(losses[0]))


def test_deterministic_runs_repeat(tiny_split):
    cfg = TrainingConfig(plateau_patience=1, early_stop_patience=2, max_epochs=2, batch_size=8, deterministic=True)
    runs = [trainer.train(tiny_model(), tiny_split, cfg)[1].history for _ in range(2)]
    assert runs[0] == runs[1]


def test_empty_split_rejected(tiny_split):
    empty = DatasetSplit(tiny_split.train, [], tiny_split.test, 0)
    with pytest.raises(EmptySplit):
        trainer.train(tiny_model(), empty, TrainingConfig(**TINY))


def test_non_finite_loss_aborts_with_checkpoint(tiny_split, tmp_path):
    model = tiny_model()
    with torch.no_grad():
        model.fc.weight.fill_(float("inf"))
    cfg = TrainingConfig(**TINY, init_head_bias=False)
    with pytest.raises(NonFiniteLoss):
        trainer.train(model, tiny_split, cfg, out_dir=tmp_path)
    assert (tmp_path / "weights.pt").is_file()


def test_augmentation_is_keyed_by_seed_epoch_index(tiny_split):
    bank = trainer.ImageBank(tiny_split.train[:4], PreprocessSpec(96, 96))
    aug = AugmentationConfig()
    a = bank.batch([0, 1, 2], aug, seed=1, epoch=3)
    b = bank.batch([2, 1, 0], aug, seed=1, epoch=3)
    assert torch.equal(a[0], b[2]) and torch.equal(a[2], b[0])
    assert not torch.equal(a, bank.batch([0, 1, 2], aug, seed=1, epoch=4))


# --- opt-in: early-epoch convergence over seeds (about 45 CPU-minutes) ------


@pytest.mark.opt_in
def test_val_mae_decreases_over_first_epochs_in_most_seeds(tmp_path_factory):
    from dentage import synth

    out = tmp_path_factory.mktemp("seeds")
    synth.generate(synth.SynthConfig(count=400, seed=11, image_size=(128, 128)), out)
    split = split_dataset(load_manifest(out / "manifest.csv"), (300, 50, 50), seed=0)
    monotone = 0
    for seed in range(5):
        torch.manual_seed(seed)
        model = assemble(truncate_inception(4, pretrained=False, input_shape=(128, 128, 3)))
        cfg = TrainingConfig(max_epochs=5, early_stop_patience=5, seed=seed)
        _, state = trainer.train(model, split, cfg)
        maes = [r.val_mae for r in state.history]
        monotone += all(b < a for a, b in zip(maes, maes[1:]))
    assert monotone >= 4
