"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""
import hashlib
import itertools
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from percept_age import tensor as T
from percept_age.architecture import BACKBONE, build, build_spec, count_trainable_params, forward
from percept_age.cli import main as cli_main
from percept_age.dataset import (
    AnnotationRecord, Gender, Happiness, Makeup, Observer, Race, Split, SyntheticSpec, by_split,
    encode_attributes, generate_synthetic,
)
from percept_age.evaluation import PredictionSet, age_histogram, error_by_age_window, mae, observer_eval, stratify
from percept_age.experiments import desk_config, predict_samples, run_case_ordering, run_observer_study
from percept_age.tensor import Tensor
from percept_age.training import TrainConfig, run_case, train_stage

sys.path.insert(0, str(Path(__file__).parent))
from oracles import central_diff, rel_error  # noqa: E402

FD_H = 1e-6
GRAD_TOL = 1e-4
GRAD_SEEDS = 20
SEEDS = (0, 1, 2, 3, 4)
REQUIRED = 4


def report(capsys, number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)


# ------------------------------------------------------------------ 1


def test_criterion_1_parameter_counts(capsys):
    t0 = time.perf_counter()
    c1 = count_trainable_params(build_spec("case1", "full"))
    c2 = count_trainable_params(build_spec("case2", "full"))
    c3 = count_trainable_params(build_spec("case3", "full"))
    elapsed = time.perf_counter() - t0
    ok = (c1 == 134_264_641 and c2 == 27_694_541 and c3 == 27_694_660
          and c3 - 27_694_645 == 15 and abs(c3 - 27_694_645) <= 20 and elapsed < 1.0)
    report(capsys, 1, ok, f"case1={c1} case2={c2} case3={c3} (gap to 27694645: {c3 - 27_694_645}) "
                          f"in {elapsed:.3f}s")
    assert ok


# ------------------------------------------------------------------ 2


def _op_builders(rng):
    """(name, build fn, input arrays) for one seeded instance of each op."""
    relu_x = rng.standard_normal(12)
    relu_x = np.where(np.abs(relu_x) < 1e-3, 1e-3 + np.abs(relu_x), relu_x)
    return [
        ("dense", lambda x, w, b: T.dense(x, w, b),
         [rng.standard_normal((3, 7)), rng.standard_normal((7, 4)), rng.standard_normal(4)]),
        ("conv2d", lambda x, k, b: T.conv2d(x, k, b, padding="same"),
         [rng.standard_normal((6, 6, 2)), rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)]),
        ("maxpool2", T.maxpool2, [rng.permutation(6 * 6 * 2).reshape(6, 6, 2) * 0.01]),
        ("relu", T.relu, [relu_x]),
        ("sigmoid", T.sigmoid, [3 * rng.standard_normal(10)]),
        ("concat", lambda *xs: T.concat(xs), [rng.standard_normal(3), rng.standard_normal(5)]),
        ("mse", T.mse, [rng.standard_normal(6), rng.standard_normal(6)]),
    ]


def _op_error(fn, arrays, rng):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    T.reset_tape()
    out = fn(*leaves)
    weights = rng.standard_normal(out.shape)
    T.backward(T.dense(T.flatten(out), Tensor(weights.reshape(-1, 1))))

    def f():
        with T.no_grad():
            return float(np.sum(weights * fn(*leaves).data))

    return max(rel_error(t.grad, central_diff(f, t.data, FD_H)) for t in leaves)


def _network_error(seed):
    rng = np.random.default_rng(seed)
    _, params = build("case3", "desk", seed=seed)
    for t in params.tensors.values():
        if t.data.ndim == 1:
            t.data[:] = rng.uniform(-0.1, 0.1, t.data.shape)  # generic biases
        t.requires_grad = True
    imgs = rng.uniform(0, 1, (2, 32, 32, 1))
    attrs = np.zeros((2, 13))
    for i in range(2):
        attrs[i, [rng.integers(0, 2), 2 + rng.integers(0, 3), 5 + rng.integers(0, 4), 9 + rng.integers(0, 4)]] = 1
    y = rng.uniform(0, 1, (2, 1))

    def loss():
        out = forward(params, imgs, attrs)
        return T.add(T.mse(out.apparent, y), T.mse(out.real, y))

    T.reset_tape()
    T.backward(loss())
    analytic, numeric = [], []
    for t in params.tensors.values():
        coords = rng.choice(t.data.size, size=min(3, t.data.size), replace=False)

        def f():
            with T.no_grad():
                return loss().item()

        fd = central_diff(f, t.data, FD_H, coords)
        analytic.append(t.grad.reshape(-1)[coords])
        numeric.append(fd.reshape(-1)[coords])
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


def test_criterion_2_gradient_correctness(capsys):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(GRAD_SEEDS):
        rng = np.random.default_rng(10_000 + seed)
        for name, fn, arrays in _op_builders(rng):
            worst[name] = max(worst.get(name, 0.0), _op_error(fn, arrays, rng))
        worst["case3_desk"] = max(worst.get("case3_desk", 0.0), _network_error(seed))
    elapsed = time.perf_counter() - t0
    ok = all(v < GRAD_TOL for v in worst.values()) and elapsed < 120
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(capsys, 2, ok, f"max rel err over {GRAD_SEEDS} seeds: {detail}; {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_3_case_ordering(capsys):
    t0 = time.perf_counter()
    result = run_case_ordering(SEEDS, desk_config())
    elapsed = time.perf_counter() - t0
    passed = result.passed()
    ok = all(passed.values()) and elapsed < 30 * 60
    tally = result.tally()
    detail = ", ".join(f"({k}) {tally[k]}/{len(SEEDS)}" for k in tally)
    if capsys is not None:
        with capsys.disabled():
            print("\n" + result.table())
    else:
        print(result.table())
    report(capsys, 3, ok, f"{detail} (need {REQUIRED}); {elapsed / 60:.1f} min")
    assert ok


# ------------------------------------------------------------------ 4


def test_criterion_4_learning_sanity(capsys):
    t0 = time.perf_counter()
    maes = []
    for seed in SEEDS:
        spec = SyntheticSpec(sample_count=3000, seed=seed, bias_table={}, noise_std=0.0)
        splits = by_split(generate_synthetic(spec))
        cfg = desk_config(seed=seed, target_label="apparent")
        ckpt, _ = run_case("case2", splits, cfg)
        test = splits[Split.TEST]
        preds = predict_samples(ckpt.params, test)
        maes.append(mae(preds.apparent_pred, [s.record.apparent_mean for s in test]))
    elapsed = time.perf_counter() - t0
    hits = sum(m < 3.0 for m in maes)
    ok = hits >= REQUIRED and elapsed < 10 * 60
    report(capsys, 4, ok, f"test apparent MAE per seed {[round(m, 3) for m in maes]}; "
                          f"{hits}/{len(SEEDS)} below 3y; {elapsed / 60:.1f} min")
    assert ok


# ------------------------------------------------------------------ 5


def test_criterion_5_two_stage_contract(capsys):
    t0 = time.perf_counter()
    splits = by_split(generate_synthetic(SyntheticSpec(sample_count=300, seed=9)))
    cfg = TrainConfig(lr_stage1=1e-3, max_epochs_stage1=2, max_epochs_stage2=2, batch_size=32,
                      target_label="dual")
    _, params = build("case3", "desk", seed=9)
    start = {k: t.data.copy() for k, t in params.tensors.items()}
    p1, _, _ = train_stage(params, 1, splits[Split.TRAIN], splits[Split.VALIDATION], cfg)
    p2, _, _ = train_stage(p1, 2, splits[Split.TRAIN], splits[Split.VALIDATION], cfg)
    backbone = [lay for lay in params.spec.layers if lay.group == BACKBONE]
    frozen_ok = all(p1.tensors[k].data.tobytes() == start[k].tobytes()
                    for k, g in params.spec.param_groups().items() if g == BACKBONE)
    moved = [any(not np.array_equal(p2.tensors[f"{lay.name}.{kind}"].data, p1.tensors[f"{lay.name}.{kind}"].data)
                 for kind in ("weight", "bias") if f"{lay.name}.{kind}" in p1.tensors) for lay in backbone]
    elapsed = time.perf_counter() - t0
    ok = frozen_ok and all(moved) and elapsed < 120
    report(capsys, 5, ok, f"stage-1 backbone bitwise frozen={frozen_ok}; stage-2 changed "
                          f"{sum(moved)}/{len(backbone)} backbone layers; {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 6


def _brute_mae(p, t):
    return sum(abs(a - b) for a, b in zip(p, t)) / len(p)


def test_criterion_6_evaluation_exactness(capsys):
    recs = [s.record for s in generate_synthetic(SyntheticSpec(sample_count=500, seed=17))]
    rng = np.random.default_rng(17)
    n = len(recs)
    app = np.array([r.apparent_mean for r in recs]) + rng.normal(0, 5, n)
    real = np.array([r.real_age for r in recs]) + rng.normal(0, 5, n)
    preds = PredictionSet([r.image_id for r in recs], app, real)
    real_true = [r.real_age for r in recs]
    app_true = [r.apparent_mean for r in recs]
    worst = {"mae": 0.0, "stratify": 0.0, "window": 0.0, "histogram": 0.0, "observer": 0.0, "identity": 0.0}

    for _ in range(5):
        p, t = rng.uniform(0, 100, 100), rng.uniform(0, 100, 100)
        worst["mae"] = max(worst["mae"], abs(mae(p, t) - _brute_mae(p, t)))

    for attr in ("gender", "race", "happiness", "makeup"):
        rows = stratify(preds, recs, attr)
        for row in rows:
            idx = [i for i, r in enumerate(recs) if r.attribute(attr).value == row.category]
            if not idx:
                continue
            worst["stratify"] = max(worst["stratify"],
                                    abs(row.mae_real - _brute_mae(real[idx], [real_true[i] for i in idx])),
                                    abs(row.mae_apparent - _brute_mae(app[idx], [app_true[i] for i in idx])))
        total = sum(r.n for r in rows)
        worst["identity"] = max(worst["identity"],
                                abs(sum(r.n * r.mae_real for r in rows) / total - mae(real, real_true)),
                                abs(sum(r.n * r.mae_apparent for r in rows) / total - mae(app, app_true)))

    for head, pv, tv in (("real", real, real_true), ("apparent", app, app_true)):
        curve = {pt.center: pt for pt in error_by_age_window(preds, recs, head, 5.0)}
        for c in range(101):
            errs = [abs(pv[i] - tv[i]) for i in range(n) if c - 2.5 <= tv[i] <= c + 2.5]
            if errs:
                worst["window"] = max(worst["window"], abs(curve[float(c)].mean_abs_error - sum(errs) / len(errs)))
                assert curve[float(c)].count == len(errs)
            else:
                assert float(c) not in curve

    for label, tv in (("real", real_true), ("apparent", app_true)):
        counts = {}
        for a in tv:
            counts[float(math.floor(a))] = counts.get(float(math.floor(a)), 0) + 1
        if age_histogram(recs, label) != counts:
            worst["histogram"] = float("inf")

    pf, pm = rng.uniform(0, 100, n), rng.uniform(0, 100, n)
    rep = observer_eval({Observer.FEMALE: pf, Observer.MALE: pm}, recs)
    lf = [r.apparent_by_observer[Observer.FEMALE] for r in recs]
    lm = [r.apparent_by_observer[Observer.MALE] for r in recs]
    worst["observer"] = max(abs(rep.matched["female"] - _brute_mae(pf, lf)),
                            abs(rep.matched["male"] - _brute_mae(pm, lm)),
                            abs(rep.cross["female"] - _brute_mae(pf, lm)),
                            abs(rep.cross["male"] - _brute_mae(pm, lf)))

    ok = all(v < 1e-12 for k, v in worst.items() if k != "identity") and worst["identity"] < 1e-9
    report(capsys, 6, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert ok


# ------------------------------------------------------------------ 7


def test_criterion_7_encoding_contract(capsys):
    def rec(g, r, h, m):
        return AnnotationRecord("q", 30.0, 30.0, 0.0, g, r, h, m)

    combos = list(itertools.product(Gender, Race, Happiness, Makeup))
    base = [encode_attributes(rec(*c)) for c in combos]
    blocks = (2, 3, 4, 4)

    def valid(v, sizes):
        i = 0
        for s in sizes:
            b = v[i:i + s]
            if not (set(b.tolist()) <= {0.0, 1.0} and b.sum() == 1):
                return False
            i += s
        return i == len(v)

    base_ok = (len(base) == 96 and len({v.tobytes() for v in base}) == 96
               and all(len(v) == 13 and valid(v, blocks) for v in base))
    gender_ok = all(encode_attributes(rec(g, Race.ASIAN, Happiness.HAPPY, Makeup.MAKEUP))[:2].tolist() == want
                    for g, want in ((Gender.MALE, [0, 1]), (Gender.FEMALE, [1, 0])))
    obs = [encode_attributes(rec(*c), o) for c in combos for o in Observer]
    obs_ok = (len({v.tobytes() for v in obs}) == 192
              and all(len(v) == 15 and valid(v, blocks + (2,)) for v in obs))
    ok = base_ok and gender_ok and obs_ok
    report(capsys, 7, ok, f"96 distinct 13-D={base_ok}; gender block male=[0,1] female=[1,0]: {gender_ok}; "
                          f"192 distinct 15-D={obs_ok}")
    assert ok


# ------------------------------------------------------------------ 8


def test_criterion_8_observer_gender(capsys):
    t0 = time.perf_counter()
    results = run_observer_study(SEEDS, desk_config())
    elapsed = time.perf_counter() - t0
    hits = sum(r.holds() for r in results)
    ok = hits >= REQUIRED and elapsed < 15 * 60
    per_seed = "; ".join(
        f"seed {r.seed}: " + ", ".join(f"{g} {r.report.matched[g]:.2f}<{r.report.cross[g]:.2f}"
                                      for g in r.report.matched) for r in results)
    report(capsys, 8, ok, f"matched<cross for both observers in {hits}/{len(SEEDS)} seeds "
                          f"({per_seed}); {elapsed / 60:.1f} min")
    assert ok


# ------------------------------------------------------------------ 9


def _hash_tree(root: Path, skip=()) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_9_determinism(tmp_path, capsys):
    if tmp_path is None:
        import tempfile
        tmp_path = Path(tempfile.mkdtemp())
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "synthetic": {"sample_count": 120, "seed": 3},
        "variant": "case3",
        "train": {"lr_stage1": 1e-3, "max_epochs_stage1": 2, "max_epochs_stage2": 2, "batch_size": 16, "seed": 3},
    }))
    hashes = {"synth": [], "train": [], "eval": []}
    for run in ("a", "b"):
        base = tmp_path / run
        data, out, ev = base / "data", base / "train", base / "eval"
        # both runs use the same relative layout so echoed paths match
        assert cli_main(["synth", "--config", str(cfg), "--out", str(data)]) == 0
        assert cli_main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
        assert cli_main(["eval", "--checkpoint", str(out / "checkpoint"), "--data", str(data), "--out", str(ev)]) == 0
        hashes["synth"].append(_hash_tree(data))
        # train_log.csv carries per-epoch wall time and resolved_config.json echoes the output path
        hashes["train"].append(_hash_tree(out, skip=("train_log.csv", "resolved_config.json")))
        log_rows = [line.rsplit(",", 1)[0] for line in (out / "train_log.csv").read_text().splitlines()]
        hashes["train"][-1] += hashlib.sha256("\n".join(log_rows).encode()).hexdigest()
        hashes["eval"].append(_hash_tree(ev))
    same = {k: v[0] == v[1] for k, v in hashes.items()}
    ok = all(same.values())
    report(capsys, 9, ok, " ".join(f"{k}:{'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok


if __name__ == "__main__":
    failures = 0
    for name, fn in sorted((k, v) for k, v in globals().items() if k.startswith("test_criterion_")):
        try:
            fn(*[None] * fn.__code__.co_argcount)
        except AssertionError:
            failures += 1
    sys.exit(1 if failures else 0)
