from __future__ import annotations

import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from attnpot import diffcore as dc
from attnpot.dataio import Dataset, LabeledFrame, generate_lj_dataset, lennard_jones
from attnpot.geometry import AtomicSystem
from attnpot.model import ModelConfig, Potential
from attnpot.training import (
    AdamW,
    TrainConfig,
    TrainingDivergence,
    _batch_gradients,
    compute_loss,
    evaluate,
    fit_energy_statistics,
    learning_rate,
    random_rotation,
    rotate_frame,
    run_ablation_grid,
    train,
)


def tiny(**changes) -> ModelConfig:
    base = dict(hidden_size=16, num_layers=1, num_heads=2, k=6, rbf_size=8, num_freq=4, lmax=1,
                ffn_multiplier=1, output_hidden_layers=1, r_cut=5.0)
    return ModelConfig(**{**base, **changes})


@pytest.fixture(scope="module")
def lj():
    return generate_lj_dataset(10, 6, seed=0)


def test_loss_matches_hand_computation():
    s1 = AtomicSystem(np.zeros((2, 3)) + [[0, 0, 0], [2, 0, 0]], [1, 1])
    s2 = AtomicSystem(np.zeros((1, 3)), [1])
    frames = [LabeledFrame(s1, 1.0, np.zeros((2, 3))), LabeledFrame(s2, -2.0, np.ones((1, 3)))]
    pe = np.array([1.5, -1.0])
    pf = np.full((3, 3), 0.5)
    loss, rep = compute_loss(pe, pf, frames, lambda_e=2.0, lambda_f=3.0)
    e_term = (0.5 / 2 + 1.0 / 1) / 2
    f_term = 0.5
    assert float(loss.data) == pytest.approx(2.0 * e_term + 3.0 * f_term)
    assert rep.energy_mae == pytest.approx(1000 * e_term)
    assert rep.force_mae == pytest.approx(1000 * f_term)


def test_learning_rate_schedule():
    lrs = [learning_rate(s, 100, 1e-3, 1e-6, 0.05) for s in range(100)]
    assert lrs[0] == pytest.approx(2e-4)
    assert max(lrs) == pytest.approx(1e-3)
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))
    assert learning_rate(100, 100, 1e-3, 1e-6, 0.05) == pytest.approx(1e-6)


def test_adamw_step_clip_decay_and_freeze():
    store = dc.ParameterStore()
    store.add("w", np.ones((2, 2)))
    store.add("b", np.ones(2))
    store.add("f", np.ones(2))
    for k in store:
        store.grads[k][...] = 100.0
    opt = AdamW(store, weight_decay=0.1, clip=1.0, frozen={"f"})
    gnorm = opt.step(0.01)
    assert gnorm == pytest.approx(math.sqrt(6 * 100.0**2))  # frozen entries excluded
    # first Adam step moves every free entry by lr (sign of gradient), decay only on matrices
    np.testing.assert_allclose(store["b"], 1.0 - 0.01, rtol=1e-6)
    np.testing.assert_allclose(store["w"], 1.0 - 0.01 * 0.1 - 0.01, rtol=1e-6)
    np.testing.assert_array_equal(store["f"], 1.0)


def test_energy_statistics_recover_species_energies(rng):
    frames = []
    for _ in range(8):
        z = rng.integers(1, 3, size=rng.integers(2, 6))
        s = AtomicSystem(rng.normal(size=(len(z), 3)) * 3, z)
        frames.append(LabeledFrame(s, float(np.sum(np.where(z == 1, -1.5, -4.0))), np.zeros((len(z), 3))))
    ref, e_scale, f_scale = fit_energy_statistics(frames, 10)
    np.testing.assert_allclose(ref[[1, 2]], [-1.5, -4.0], atol=1e-10)
    assert e_scale == 1e-3 and f_scale == 1e-3


def test_rotated_labels_match_oracle(lj):
    frame = lj.frames[0]
    rot = random_rotation(np.random.default_rng(0))
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(rot) == pytest.approx(1.0)
    rf = rotate_frame(frame, rot)
    e, f, s = lennard_jones(rf.system)
    assert e == pytest.approx(frame.energy, abs=1e-10)
    np.testing.assert_allclose(rf.forces, f, atol=1e-10)
    np.testing.assert_allclose(rf.stress, s, atol=1e-12)


def loss_value(pot, frames, mode, tcfg):
    return evaluate(pot, frames, mode, 8, tcfg.lambda_e, tcfg.lambda_f).loss


@pytest.mark.parametrize("mode", ["direct", "conservative"])
def test_parameter_gradients_match_finite_differences(lj, mode):
    pot = Potential(tiny(force_mode=mode), seed=1)
    frames = lj.frames[:2]
    tcfg = TrainConfig(force_mode=mode)
    pot.params.zero_grad()
    _batch_gradients(pot, frames, None, tcfg, mode)
    rng = np.random.default_rng(0)
    checked = 0
    for name in ("head.out.w", "layer0.nbr_attn.out.q.w", "embed.rbf.w"):
        if name not in pot.params:
            continue
        arr = pot.params.arrays[name]
        for flat in rng.choice(arr.size, size=3, replace=False):
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            eps = 1e-6
            arr[idx] = old + eps
            lp = loss_value(pot, frames, mode, tcfg)
            arr[idx] = old - eps
            lm = loss_value(pot, frames, mode, tcfg)
            arr[idx] = old
            fd = (lp - lm) / (2 * eps)
            assert pot.params.grads[name][idx] == pytest.approx(fd, rel=2e-3, abs=1e-6)
            checked += 1
    assert checked == 9


def test_train_improves_and_writes_outputs(lj, tmp_path):
    pot = Potential(tiny(), seed=0)
    tcfg = TrainConfig(epochs=4, lr=3e-3, batch_size=4)
    before = evaluate(pot, lj.subset("val"))
    pot, hist = train(pot, lj, tcfg, out_dir=tmp_path)
    assert [r.split for r in hist] == ["train", "val"] * 4
    assert (tmp_path / "best").exists()
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert len(rows) == 8
    val = [r for r in hist if r.split == "val"]
    best = min(range(len(val)), key=lambda i: val[i].loss)
    assert val[best].loss < before.loss
    loaded = Potential.load(tmp_path / "best")
    again = evaluate(loaded, lj.subset("val"))
    assert again.loss == pytest.approx(val[best].loss, rel=1e-12)


def test_training_is_deterministic(lj):
    tcfg = TrainConfig(epochs=1, lr=1e-3)
    a = train(Potential(tiny(), seed=0), lj, tcfg)[1]
    b = train(Potential(tiny(), seed=0), lj, tcfg)[1]
    assert [r.loss for r in a] == [r.loss for r in b]


def test_divergence_and_validation(lj):
    with pytest.raises(TrainingDivergence):
        train(Potential(tiny(), seed=0), lj, TrainConfig(epochs=1, divergence_threshold=1e-12))
    with pytest.raises(ValueError):
        train(Potential(tiny(knn_soft=False)), lj, TrainConfig(epochs=1, force_mode="conservative"))
    with pytest.raises(ValueError):
        TrainConfig(lambda_e=0, lambda_f=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ValueError):
        train(Potential(tiny()), Dataset(lj.frames[:1], ["val"]), TrainConfig(epochs=1))


def test_ablation_grid_rows(lj, tmp_path):
    grid = [{"lae": True, "node_attention": True, "erope": True}, {"lae": False}]
    rows = run_ablation_grid(lj, tiny(), TrainConfig(epochs=1), grid, out_csv=tmp_path / "a.csv")
    assert [r["config"] for r in rows] == ["neighbor+lae+node_attention+erope", "neighbor"]
    assert rows[1]["LAE"] == "off" and rows[0]["LAE"] == "on"
    assert (tmp_path / "a.csv").read_text().splitlines()[0].startswith("config,")
    with pytest.raises(ValueError):
        run_ablation_grid(lj, tiny(), TrainConfig(epochs=1), [{"neighbor": False}])
