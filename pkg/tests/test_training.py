import numpy as np
import pytest

from percept_age import tensor as T
from percept_age import training
from percept_age.architecture import BACKBONE, ForwardOutput, build, forward, load_params, save_params
from percept_age.dataset import AnnotationRecord, Gender, Happiness, Makeup, Race, Split, SyntheticSpec, \
    by_split, generate_synthetic
from percept_age.tensor import Tensor
from percept_age.training import (
    EarlyStopping, TargetLabel, TrainConfig, TrainingError, ValidationResult, compute_loss, config_for,
    make_arrays, run_case, train_stage, validate,
)


def rec(real=40.0, app=50.0):
    return AnnotationRecord("r", real, app, 1.0, Gender.MALE, Race.ASIAN, Happiness.NEUTRAL, Makeup.NO_MAKEUP)


@pytest.fixture(scope="module")
def small():
    spec = SyntheticSpec(sample_count=96, seed=11, split_weights=(2, 1, 0))
    return by_split(generate_synthetic(spec))


def quick(**kw):
    base = dict(lr_stage1=1e-3, max_epochs_stage1=2, max_epochs_stage2=2, patience=5, batch_size=16)
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------------ loss


def test_perfect_prediction_zero_loss():
    out = ForwardOutput(Tensor([0.5]), Tensor([0.4]))
    assert compute_loss(out, rec(), TrainConfig(target_label="dual")).item() == 0.0


def test_dual_loss_example():
    out = ForwardOutput(Tensor([0.6]), Tensor([0.6]))  # errors 0.1 and 0.2
    loss = compute_loss(out, rec(), TrainConfig(target_label="dual"))
    assert loss.item() == pytest.approx(0.05, abs=1e-15)


def test_single_head_targets():
    out = ForwardOutput(Tensor([0.5]))
    assert compute_loss(out, rec(), TrainConfig(target_label="apparent"), "case2").item() == 0.0
    assert compute_loss(out, rec(), TrainConfig(target_label="real"), "case2").item() == pytest.approx(0.01)


def test_missing_observer_label():
    out = ForwardOutput(Tensor([0.5]), Tensor([0.4]))
    with pytest.raises(TrainingError):
        compute_loss(out, rec(), TrainConfig(target_label="dual"), "case3observer", observer="female")


def _head_grads(weights, rng, cut_cascade=False):
    _, params = build("case3", "desk", seed=0)
    if cut_cascade:
        params.tensors["fc3.weight"].data[0] = 0.0  # row fed by the apparent output
    for t in params.tensors.values():
        t.requires_grad = True
    attrs = np.zeros(13)
    attrs[[0, 2, 5, 9]] = 1
    T.reset_tape()
    out = forward(params, rng.uniform(0, 1, (32, 32, 1)), attrs)
    T.backward(compute_loss(out, rec(), TrainConfig(target_label="dual", loss_weights=weights)))
    norm = lambda g: 0.0 if g is None else float(np.abs(g).max())
    return norm(params.tensors["predict_app.weight"].grad), norm(params.tensors["predict_real.weight"].grad)


def test_loss_weight_swap(rng):
    app, real = _head_grads((1, 0), rng)
    assert app > 0 and real == 0
    # the real head reads the apparent output, so its loss also reaches the
    # apparent head unless that link is cut
    app, real = _head_grads((0, 1), rng, cut_cascade=True)
    assert app == 0 and real > 0
    app, real = _head_grads((0, 1), rng)
    assert app > 0 and real > 0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_stage1=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_weights=(0, 0))
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    assert config_for("case1").lr_stage1 == 1e-6
    assert config_for("case3").lr_stage1 == 1e-4 and config_for("case3").target_label is TargetLabel.DUAL
    c = TrainConfig()
    assert (c.max_epochs_stage1, c.max_epochs_stage2, c.loss_weights) == (3000, 1500, (1.0, 1.0))
    assert c.lr(2) == c.lr_stage1
    assert TrainConfig.from_dict(c.to_dict()) == c


# ----------------------------------------------------------- early stopping


def test_early_stopping_trace():
    es = EarlyStopping(patience=3)
    stops = [es.update(v) for v in [5, 4, 4.5, 4.6, 4.7]]
    assert stops == [False, False, False, False, True]
    assert es.best_epoch == 2 and es.best == 4


def test_early_stopping_min_delta():
    es = EarlyStopping(patience=1)
    es.update(1.0)
    assert es.update(1.0 - 1e-7)  # below min_delta does not count


def test_train_stage_scripted_validation(monkeypatch, small):
    values = iter([10.0, 5.0, 4.0, 4.5, 4.6, 4.7, 1.0, 1.0])

    def scripted(params, data, config):
        v = next(values)
        return ValidationResult(v, v, None, v, None, v)

    monkeypatch.setattr(training, "validate", scripted)
    _, params = build("case2", "desk", seed=0)
    cfg = quick(patience=3, max_epochs_stage1=50)
    _, tlog, best = train_stage(params, 1, small[Split.TRAIN], small[Split.VALIDATION], cfg)
    assert [r.epoch for r in tlog.records] == [1, 2, 3, 4, 5]
    assert best.epoch == 2 and best.val_mae == 4.0
    assert tlog.stopped_early[1]


# ---------------------------------------------------------------- stages


def test_stage1_freezes_backbone_stage2_moves_it(small):
    _, params = build("case3", "desk", seed=0)
    before = {k: t.data.copy() for k, t in params.tensors.items()}
    cfg = quick(target_label="dual")
    p1, _, _ = train_stage(params, 1, small[Split.TRAIN], small[Split.VALIDATION], cfg)
    groups = params.spec.param_groups()
    for name, g in groups.items():
        same = p1.tensors[name].data.tobytes() == before[name].tobytes()
        assert same == (g == BACKBONE), name
    p2, _, _ = train_stage(p1, 2, small[Split.TRAIN], small[Split.VALIDATION], cfg)
    for lay in params.spec.layers:
        if lay.group == BACKBONE:
            assert not np.array_equal(p2.tensors[f"{lay.name}.weight"].data, p1.tensors[f"{lay.name}.weight"].data)


def test_input_params_untouched(small):
    _, params = build("case2", "desk", seed=0)
    snap = {k: t.data.copy() for k, t in params.tensors.items()}
    train_stage(params, 2, small[Split.TRAIN], small[Split.VALIDATION], quick())
    assert all(np.array_equal(snap[k], t.data) for k, t in params.tensors.items())


def test_run_case_deterministic(small):
    cfg = quick(target_label="dual", seed=3)
    a, la = run_case("case3", small, cfg)
    b, lb = run_case("case3", small, cfg)
    assert all(a.params.tensors[k].data.tobytes() == b.params.tensors[k].data.tobytes() for k in a.params.tensors)
    strip = lambda log: [(r.stage, r.epoch, r.train_loss, r.val_loss, r.val_mae_real) for r in log.records]
    assert strip(la) == strip(lb)


def test_epoch_counts_within_budget(small):
    cfg = quick(max_epochs_stage1=3, max_epochs_stage2=2, patience=50)
    _, tlog = run_case("case2", small, cfg)
    assert len(tlog.stage(1)) == 3 and len(tlog.stage(2)) == 2
    for s in (1, 2):
        epochs = [r.epoch for r in tlog.stage(s)]
        assert epochs == sorted(set(epochs))


def test_checkpoint_restore_reproduces_mae(small, tmp_path):
    cfg = quick(target_label="dual")
    ckpt, _ = run_case("case3", small, cfg)
    save_params(ckpt.params, tmp_path / "ck", ckpt.metadata())
    restored, meta = load_params(tmp_path / "ck")
    val = make_arrays(small[Split.VALIDATION], restored.variant)
    assert abs(validate(restored, val, cfg).selection_mae - meta["val_mae"]) < 1e-9


def test_selection_head_for_dual_is_real(small):
    cfg = quick(target_label="dual")
    ckpt, _ = run_case("case3", small, cfg)
    val = make_arrays(small[Split.VALIDATION], ckpt.params.variant)
    assert ckpt.val_mae == validate(ckpt.params, val, cfg).mae_real


def test_observer_arrays_double_samples(small):
    data = make_arrays(small[Split.TRAIN], "case3observer")
    assert len(data) == 2 * len(small[Split.TRAIN]) and data.attrs.shape[1] == 15


def test_empty_dataset():
    with pytest.raises(TrainingError):
        make_arrays([], "case2")


def test_divergence_reports_epoch(small):
    cfg = quick(lr_stage1=1e300)
    _, params = build("case2", "desk", seed=0)
    with pytest.raises(TrainingError, match="epoch 1"):
        train_stage(params, 2, small[Split.TRAIN], small[Split.VALIDATION], cfg)


def test_train_log_csv(small, tmp_path):
    _, tlog = run_case("case2", small, quick())
    tlog.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].startswith("stage,epoch,train_loss")
    assert len(lines) == 1 + len(tlog.records)
    assert "np." not in "".join(lines)


def test_loss_non_increasing_first_epochs_default_lr():
    hits = 0
    for seed in range(5):
        spec = SyntheticSpec(sample_count=400, seed=seed, bias_table={}, noise_std=0.0)
        splits = by_split(generate_synthetic(spec))
        cfg = config_for("case2", max_epochs_stage2=5, seed=seed)
        _, params = build("case2", "desk", seed=seed)
        _, tlog, _ = train_stage(params, 2, splits[Split.TRAIN], splits[Split.VALIDATION], cfg)
        losses = [r.train_loss for r in tlog.records]
        hits += all(b <= a for a, b in zip(losses, losses[1:]))
    assert hits >= 4
