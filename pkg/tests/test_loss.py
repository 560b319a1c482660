import math
import random

import mpmath
import numpy as np
import pytest

from neggen.assembly import TextPiece, TrainingRegion, TrainingSample, build_assignment_matrix, shuffle_and_concat
from neggen.grounding import BoundingBox, PhraseSpan
from neggen.loss import (FocalParams, ParamVector, Prediction, cost_matrix, ensemble_average, focal_loss,
                         gradient_check, gradient_step_demo, grounding_loss, hungarian_match, load_predictions,
                         matching_cost)

from helpers import brute_force_assignment, mp_focal

B = BoundingBox
mpmath.mp.dps = 40


def _sample(text="a dog and a cat", spans=((2, 5), (12, 15)), extra=()):
    regions = tuple(TrainingRegion(B(10 * i, 10 * i, 10 * i + 20, 10 * i + 20), PhraseSpan(*s))
                    for i, s in enumerate(spans))
    pieces = [TextPiece(text, "positive", regions)] + [TextPiece(t, "negative:x") for t in extra]
    full, segs, regs = shuffle_and_concat(pieces, order=list(range(len(pieces))))
    return TrainingSample("t", [], (100, 100), full, segs, regs, build_assignment_matrix(full, regs))


# ------------------------------------------------------------------ focal loss

def test_focal_closed_form():
    loss, _ = focal_loss(0.0, 1, FocalParams(0.25, 2.0))
    assert abs(loss - 0.25 * 0.25 * math.log(2)) <= 1e-9
    assert loss == pytest.approx(0.043321, abs=1e-6)


def test_focal_gamma0_alpha_half_is_half_bce():
    p = FocalParams(0.5, 0.0)
    for x in (-3.0, -0.2, 0.0, 1.7, 6.0):
        s = 1 / (1 + math.exp(-x))
        assert focal_loss(x, 1, p)[0] == pytest.approx(-0.5 * math.log(s), rel=1e-12)
        assert focal_loss(x, 0, p)[0] == pytest.approx(-0.5 * math.log(1 - s), rel=1e-12)


def test_focal_gradient_vs_mpmath_finite_differences():
    rng = random.Random(0)
    for _ in range(150):
        x = rng.uniform(-12, 12)
        t = rng.randint(0, 1)
        alpha, gamma = rng.uniform(0.05, 0.95), rng.choice([0.0, 0.5, 1.0, 2.0, 3.0])
        _, g = focal_loss(x, t, FocalParams(alpha, gamma))
        h = mpmath.mpf("1e-12")
        fd = (mp_focal(x + h, t, alpha, gamma) - mp_focal(x - h, t, alpha, gamma)) / (2 * h)
        loss, _ = focal_loss(x, t, FocalParams(alpha, gamma))
        assert abs(loss - float(mp_focal(x, t, alpha, gamma))) <= 1e-12 + 1e-9 * loss
        assert abs(g - float(fd)) <= 1e-6 * max(abs(float(fd)), 1e-300) or abs(g - float(fd)) < 1e-18


def test_focal_monotone_signal():
    rng = random.Random(1)
    for _ in range(100):
        x = rng.uniform(-10, 10)
        assert focal_loss(x, 1)[1] < 0 < focal_loss(x, 0)[1]


def test_focal_log_floor():
    loss, _ = focal_loss(-80.0, 1)
    assert math.isfinite(loss) and loss == pytest.approx(0.25 * 1.0 * -math.log(1e-12), rel=1e-9)


def test_focal_params_validation():
    with pytest.raises(ValueError):
        FocalParams(alpha=1.5)
    with pytest.raises(ValueError):
        FocalParams(gamma=-1)
    with pytest.raises(ValueError):
        Prediction(B(0, 0, 1, 1), [float("inf")])


# ------------------------------------------------------------------ matching

def test_hungarian_examples():
    m = hungarian_match([[1, 2], [2, 1]])
    assert m.assignment == (0, 1) and m.total_cost == 2
    assert hungarian_match([[5]]).pairs == [(0, 0)]
    m = hungarian_match(np.zeros((0, 3)))
    assert m.assignment == () and m.total_cost == 0


def test_hungarian_brute_force_200():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n, l = rng.integers(1, 7, size=2)
        cost = rng.integers(0, 20, size=(n, l)).astype(float) if rng.random() < 0.5 else rng.random((n, l))
        m = hungarian_match(cost)
        assert m.total_cost == pytest.approx(brute_force_assignment(cost.tolist()), abs=1e-12)
        matched = [c for c in m.assignment if c is not None]
        assert len(matched) == min(n, l) == len(set(matched))


def test_matching_cost_closed_form_at_zero_logits():
    s = _sample()
    a = s.matrix.dense()
    t = a.shape[1]
    pred = Prediction(B(0, 0, 20, 20), np.zeros(t))
    params = FocalParams(w_box=0.0)
    k = int(a[0].sum())
    fl1 = 0.25 * 0.25 * math.log(2)
    fl0 = 0.75 * 0.25 * math.log(2)
    expected = (k * fl1 + (t - k) * fl0) / t
    assert matching_cost(pred, 0, a, s.regions[0].box, 1.0, params) == pytest.approx(expected, rel=1e-12)


def test_matching_cost_symmetry_and_saturation():
    s = _sample(spans=((2, 5), (2, 5)))
    s.regions[1] = s.regions[0]
    c = cost_matrix([Prediction(B(1, 1, 5, 5), np.linspace(-1, 1, s.matrix.cols))], s)
    assert c[0, 0] == c[0, 1]
    a = s.matrix.dense()
    pred = Prediction(s.regions[0].box, np.where(a[0] == 1, 40.0, -40.0))
    assert matching_cost(pred, 0, a, s.regions[0].box, 1.0) < 1e-12


# ------------------------------------------------------------------ grounding loss

def test_zero_predictions():
    res = grounding_loss([], _sample())
    assert res.loss == 0.0 and res.grads.shape == (0, _sample().matrix.cols)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        grounding_loss([Prediction(B(0, 0, 1, 1), [0.0])], _sample())


def test_saturated_single_prediction():
    s = _sample(spans=((2, 5),))
    a = s.matrix.dense()[0]
    res = grounding_loss([Prediction(s.regions[0].box, np.where(a == 1, 40.0, -40.0))], s)
    assert res.loss < 1e-12


def test_target_contract_and_permutation_invariance():
    s = _sample()
    rng = np.random.default_rng(4)
    preds = [Prediction(B(*rng.uniform(0, 50, 2), *rng.uniform(50, 100, 2)), rng.normal(size=s.matrix.cols))
             for _ in range(4)]
    res = grounding_loss(preds, s)
    a = s.matrix.dense()
    assert len(res.match.pairs) == 2
    for i in range(4):
        l = res.match.assignment[i]
        assert (res.targets[i] == (a[l] if l is not None else 0)).all()
    perm = grounding_loss(preds[::-1], s)
    assert perm.loss == pytest.approx(res.loss, rel=1e-12)
    swapped = TrainingSample(s.id, s.images, s.canvas, s.text, s.segments, s.regions[::-1],
                             build_assignment_matrix(s.text, s.regions[::-1]))
    assert grounding_loss(preds, swapped).loss == pytest.approx(res.loss, rel=1e-12)


def test_column_decomposition_with_negative_segment():
    base = _sample()
    ext = _sample(extra=("a red bird",))
    t0, t1 = base.matrix.cols, ext.matrix.cols
    assert t1 > t0 and not ext.matrix.dense()[:, t0:].any()
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(2, t0))
    preds0 = [Prediction(r.box, logits[i]) for i, r in enumerate(base.regions)]
    preds1 = [Prediction(r.box, np.concatenate([logits[i], np.full(t1 - t0, -30.0)])) for i, r in enumerate(ext.regions)]
    s0 = grounding_loss(preds0, base, reduction="sum").loss
    s1 = grounding_loss(preds1, ext, reduction="sum").loss
    assert 0 <= s1 - s0 < 1e-10


def test_grounding_gradients_vs_finite_differences():
    s = _sample()
    rng = np.random.default_rng(6)
    for _ in range(5):
        pred = Prediction(s.regions[0].box, rng.normal(size=s.matrix.cols))
        assert gradient_check(pred, s)


# ------------------------------------------------------------------ demo and ensemble

def test_gradient_step_demo():
    s = _sample()
    traj = gradient_step_demo(s, steps=50, lr=0.5, seed=0)
    assert len(traj) == 51
    assert all(b <= a + 1e-15 for a, b in zip(traj, traj[1:])) and traj[-1] < traj[0]
    assert len(set(gradient_step_demo(s, steps=5, lr=0.0))) == 1
    assert len(gradient_step_demo(s, steps=0)) == 1


def test_ensemble():
    man = (("w", (2, 2)), ("b", (2,)))
    a = ParamVector(np.arange(6.0), man)
    b = ParamVector(np.array([1.0, -2, 3, 0.5, 7, 9]), man)
    assert (ensemble_average(a, a).values == a.values).all()
    assert (ensemble_average(ParamVector(np.zeros(6), man), b).values == b.values / 2).all()
    assert (ensemble_average(a, b).values == ensemble_average(b, a).values).all()
    assert ensemble_average(a, b).tensors()["w"].shape == (2, 2)
    with pytest.raises(ValueError):
        ensemble_average(a, ParamVector(np.arange(6.0), (("w", (6,)),)))
    with pytest.raises(ValueError):
        ParamVector(np.arange(5.0), man)


def test_load_predictions(tmp_path):
    p = tmp_path / "p.jsonl"
    p.write_text('{"sample_id": "a", "preds": [{"box": [0,0,1,1], "logits": [0.5]}]}\n\n')
    got = load_predictions(p)
    assert list(got) == ["a"] and got["a"][0].logits.tolist() == [0.5]
    p.write_text('{"sample_id": "a"}\n')
    with pytest.raises(ValueError, match="line 1"):
        load_predictions(p)
