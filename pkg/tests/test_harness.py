import numpy as np
import pytest

from eunets import harness
from eunets.data_io import SyntheticConfig, generate_synthetic, kfold
from eunets.exceptions import ContractViolation, DivergenceError
from eunets.harness import (
    Adam,
    PlateauSchedule,
    TrainConfig,
    cross_validate,
    dice_score,
    evaluate,
    format_score,
    split_train_val,
    train,
)
from eunets.models import ModelConfig, build_model
from eunets.tensor import Tensor

TINY = ModelConfig(base_width=4, mhex_hidden=4, seed=0)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticConfig(image_size=16, sample_count=12, seed=0))


def simulate(losses, lr_patience=5, stop_patience=10):
    """Independent counter simulation of the plateau rules."""
    best, wait_lr, wait_stop, lr, reductions = float("inf"), 0, 0, 1.0, []
    for epoch, loss in enumerate(losses, start=1):
        if loss < best - 1e-6:
            best, wait_lr, wait_stop = loss, 0, 0
            continue
        wait_lr += 1
        wait_stop += 1
        if wait_lr == lr_patience:
            lr, wait_lr = lr / 2, 0
            reductions.append(epoch)
        if wait_stop == stop_patience:
            return reductions, epoch
    return reductions, len(losses)


def run_schedule(losses):
    sched = PlateauSchedule(1.0)
    for loss in losses:
        sched.step(loss)
        if sched.should_stop:
            break
    return sched.reductions, sched.epoch, sched.lr


def test_frozen_loss_schedule():
    reductions, stop, lr = run_schedule([1.0] * 50)
    assert (reductions, stop) == ([6, 11], 11) == simulate([1.0] * 50)
    assert lr == 0.25


def test_improving_loss_runs_all_epochs():
    reductions, stop, lr = run_schedule([1.0 - 0.01 * i for i in range(50)])
    assert (reductions, stop, lr) == ([], 50, 1.0)


def test_sub_threshold_improvements_count_as_plateau():
    losses = [1.0 - 1e-7 * i for i in range(50)]
    assert run_schedule(losses)[:2] == ([6, 11], 11)


@pytest.mark.parametrize("seed", range(20))
def test_schedule_matches_simulation(seed):
    rng = np.random.default_rng(seed)
    losses = list(np.minimum.accumulate(rng.random(50)) + rng.integers(0, 2, 50) * 0.5)
    assert run_schedule(losses)[:2] == simulate(losses)


def test_adam_first_step_is_sign_times_lr():
    params = {"w": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
    grads = {params["w"].node_id: np.array([0.5, -4.0, 0.0])}

    class G(dict):
        def get(self, t):
            return dict.get(self, t.node_id)

    new = Adam(["w"]).step(params, G(grads), lr=0.1)["w"]
    np.testing.assert_allclose(new, [0.9, -1.9, 3.0], atol=1e-7)


def test_dice_score_cases():
    a = np.array([[1, 1, 0, 0]])
    b = np.array([[1, 0, 1, 0]])
    assert dice_score(a, b) == 0.5
    assert dice_score(a, a) == 1.0
    assert dice_score(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert dice_score(a, 1 - a) == 0.0
    with pytest.raises(ContractViolation):
        dice_score(np.zeros((2, 2)), np.zeros((2, 3)))


def test_format_score():
    assert format_score(0.912345, 0.01234) == "91.23 ± 1.23"


def test_split_train_val():
    train_ids, val_ids = split_train_val(range(25))
    assert val_ids == [0, 10, 20]
    assert len(train_ids) == 22 and not set(train_ids) & set(val_ids)


@pytest.mark.parametrize("kwargs", [dict(lr=0), dict(lr_factor=1.0), dict(early_stop_patience=0), dict(loss_kind="l2")])
def test_train_config_invariants(kwargs):
    with pytest.raises(ContractViolation):
        TrainConfig(**kwargs)


def test_train_history_and_determinism(data):
    cfg = TrainConfig(max_epochs=3, seed=1)
    _, h1 = train(build_model(TINY), data[:8], data[8:], cfg)
    model, h2 = train(build_model(TINY), data[:8], data[8:], cfg)
    assert h1.to_dict() == h2.to_dict()
    assert h1.stop_epoch == 3 and len(h1.val_loss) == 3
    assert all(a >= b for a, b in zip(h1.lr, h1.lr[1:]))
    assert h1.best_epoch == int(np.argmin(h1.val_loss)) + 1
    x = np.stack([s.image for s in data[8:]])
    y = np.stack([s.mask for s in data[8:]])
    assert evaluate(model, x, y)[0] == pytest.approx(min(h1.val_loss), abs=1e-12)


def test_train_reduces_loss(data):
    _, hist = train(build_model(TINY), data[:8], data[8:], TrainConfig(max_epochs=4, lr=3e-3))
    assert hist.train_loss[-1] < hist.train_loss[0]


@pytest.mark.parametrize("loss_kind", ["ce", "dice"])
def test_train_baseline_and_loss_kinds(data, loss_kind):
    plain = ModelConfig(with_mhex=False, base_width=4)
    _, hist = train(build_model(plain), data[:4], data[8:], TrainConfig(max_epochs=1, loss_kind=loss_kind))
    assert np.isfinite(hist.val_loss[0])


def test_train_frozen_validation_follows_schedule(data, monkeypatch):
    monkeypatch.setattr(harness, "evaluate", lambda *a, **k: (1.0, 0.5))
    _, hist = train(build_model(TINY), data[:2], data[8:], TrainConfig(max_epochs=50, batch_size=2))
    assert hist.lr_reductions == [6, 11] and hist.stop_epoch == 11
    assert hist.lr[5] == 1e-3 and hist.lr[6] == 5e-4


def test_history_csv(data, tmp_path):
    _, hist = train(build_model(TINY), data[:4], data[8:], TrainConfig(max_epochs=2))
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_dice,lr" and len(lines) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(data):
    with pytest.raises(DivergenceError) as info:
        train(build_model(TINY), data[:4], data[8:], TrainConfig(max_epochs=3, lr=1e300))
    assert info.value.epoch == 1


def test_empty_split_rejected(data):
    with pytest.raises(ContractViolation):
        train(build_model(TINY), data[:4], [], TrainConfig(max_epochs=1))


def test_cross_validate_small(data):
    plan = kfold([s.id for s in data], k=3, seed=0)
    result = cross_validate(TINY, TrainConfig(max_epochs=1), data, plan)
    assert sorted(result.fold_scores) == [0, 1, 2]
    assert all(0 <= v <= 1 for v in result.fold_scores.values())
    vals = np.array(list(result.fold_scores.values()))
    assert result.mean == pytest.approx(vals.mean()) and result.std == pytest.approx(vals.std(ddof=1))
    assert result.formatted() == format_score(result.mean, result.std)
    with pytest.raises(ContractViolation):
        cross_validate(TINY, TrainConfig(max_epochs=1), data[:5], plan)
