import math

import numpy as np
import pytest

from sslegad import autograd as ag
from sslegad import losses
from sslegad.autograd import Tensor
from sslegad.errors import ConfigError, ContractError, DataError, ShapeError

from gradcheck import assert_grad_matches

LN2 = math.log(2.0)


def one_hot_map(idx: np.ndarray) -> np.ndarray:
    """(B,H,W) int class map -> (B,2,H,W) one-hot."""
    out = np.zeros((idx.shape[0], 2) + idx.shape[1:])
    np.put_along_axis(out, idx[:, None], 1.0, axis=1)
    return out


# ---------------------------------------------------------------------------
# independent scalar oracles (plain python loops)


def ce_oracle(logits: np.ndarray, target: np.ndarray) -> float:
    b, c, h, w = logits.shape
    acc = 0.0
    for bi in range(b):
        for y in range(h):
            for x in range(w):
                z = [logits[bi, ci, y, x] for ci in range(c)]
                m = max(z)
                exps = [math.exp(v - m) for v in z]
                s = sum(exps)
                for ci in range(c):
                    p = max(exps[ci] / s, 1e-12)
                    acc -= target[bi, ci, y, x] * math.log(p)
    return acc / (b * h * w)


def dice_oracle(probs: np.ndarray, target: np.ndarray, smooth: float = 1e-5) -> float:
    b, c, h, w = probs.shape
    total = 0.0
    for bi in range(b):
        for ci in range(c):
            inter = p_sum = t_sum = 0.0
            for y in range(h):
                for x in range(w):
                    inter += probs[bi, ci, y, x] * target[bi, ci, y, x]
                    p_sum += probs[bi, ci, y, x]
                    t_sum += target[bi, ci, y, x]
            total += (2.0 * inter + smooth) / (p_sum + t_sum + smooth)
    return 1.0 - total / (b * c)


def consistency_oracle(la: np.ndarray, lb: np.ndarray, ds: int, eps: float) -> float:
    def branch(logits):
        b, c, h, w = logits.shape
        probs = np.empty_like(logits)
        for bi in range(b):
            for y in range(h):
                for x in range(w):
                    z = logits[bi, :, y, x]
                    e = np.exp(z - z.max())
                    probs[bi, :, y, x] = e / e.sum()
        k = h // ds
        pooled = np.empty((b, c, ds, ds))
        for bi in range(b):
            for ci in range(c):
                for i in range(ds):
                    for j in range(ds):
                        pooled[bi, ci, i, j] = probs[bi, ci, i * k:(i + 1) * k,
                                                     j * k:(j + 1) * k].mean()
        normed = np.empty_like(pooled)
        for bi in range(b):
            for i in range(ds):
                for j in range(ds):
                    v = pooled[bi, :, i, j]
                    normed[bi, :, i, j] = v / max(np.sqrt((v * v).sum()), eps)
        return normed
    na, nb = branch(la), branch(lb)
    return float(((na - nb) ** 2).mean())


# ---------------------------------------------------------------------------
# cross entropy


def test_ce_uniform_prediction_is_ln2():
    rng = np.random.default_rng(0)
    target = one_hot_map(rng.integers(0, 2, (2, 3, 3)))
    out = losses.cross_entropy(Tensor(np.zeros((2, 2, 3, 3))), Tensor(target))
    assert abs(out.item() - LN2) < 1e-12


def test_ce_saturated_prediction_vanishes():
    idx = np.random.default_rng(1).integers(0, 2, (1, 4, 4))
    target = one_hot_map(idx)
    logits = np.where(target > 0, 30.0, -30.0)  # margin 60 >> 30
    out = losses.cross_entropy(Tensor(logits), Tensor(target))
    assert out.item() <= 1e-12


def test_ce_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((1, 2, 2, 2)) * 3
    target = one_hot_map(rng.integers(0, 2, (1, 2, 2)))
    out = losses.cross_entropy(Tensor(logits), Tensor(target))
    assert abs(out.item() - ce_oracle(logits, target)) < 1e-12


def test_ce_soft_targets_match_oracle():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((2, 2, 2, 2))
    raw = rng.uniform(0.1, 0.9, (2, 1, 2, 2))
    target = np.concatenate([raw, 1.0 - raw], axis=1)
    out = losses.cross_entropy(Tensor(logits), Tensor(target))
    assert abs(out.item() - ce_oracle(logits, target)) < 1e-12


def test_ce_one_hot_equals_neg_log_prob_of_true_class():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((2, 2, 3, 3)) * 2
    idx = rng.integers(0, 2, (2, 3, 3))
    target = one_hot_map(idx)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    ref = -np.log(np.take_along_axis(p, idx[:, None], axis=1)).mean()
    out = losses.cross_entropy(Tensor(logits), Tensor(target))
    assert abs(out.item() - ref) < 1e-12


def test_ce_rejects_unnormalized_target():
    with pytest.raises(DataError):
        losses.cross_entropy(Tensor(np.zeros((1, 2, 2, 2))),
                             Tensor(np.full((1, 2, 2, 2), 0.75)))


# ---------------------------------------------------------------------------
# dice


def test_dice_perfect_match_is_near_zero():
    target = one_hot_map(np.random.default_rng(5).integers(0, 2, (1, 4, 4)))
    out = losses.dice_loss(Tensor(target.copy()), Tensor(target))
    assert 0.0 <= out.item() <= 1e-5


def test_dice_total_disagreement_is_near_one():
    idx = np.random.default_rng(6).integers(0, 2, (1, 4, 4))
    target = one_hot_map(idx)
    flipped = one_hot_map(1 - idx)
    out = losses.dice_loss(Tensor(flipped), Tensor(target))
    assert out.item() > 1.0 - 1e-4


def test_dice_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    probs = rng.uniform(0, 1, (1, 2, 4, 4))
    target = one_hot_map(rng.integers(0, 2, (1, 4, 4)))
    out = losses.dice_loss(Tensor(probs), Tensor(target))
    assert abs(out.item() - dice_oracle(probs, target)) < 1e-12


# ---------------------------------------------------------------------------
# supervised / pseudo / semi


def test_supervised_perfect_prediction_near_zero():
    idx = np.random.default_rng(8).integers(0, 2, (1, 4, 4))
    target = one_hot_map(idx)
    logits = np.where(target > 0, 40.0, -40.0)
    out = losses.supervised_loss(Tensor(logits), Tensor(target))
    assert out.item() < 1e-4


def test_supervised_is_ce_plus_dice():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((2, 2, 3, 3))
    target = one_hot_map(rng.integers(0, 2, (2, 3, 3)))
    combined = losses.supervised_loss(Tensor(logits), Tensor(target)).item()
    ce = losses.cross_entropy(Tensor(logits), Tensor(target)).item()
    dl = losses.dice_loss(ag.softmax(Tensor(logits), 1), Tensor(target)).item()
    assert abs(combined - (ce + dl)) < 1e-15


def test_supervised_uniform_prediction_value():
    idx = np.random.default_rng(10).integers(0, 2, (1, 4, 4))
    target = one_hot_map(idx)
    out = losses.supervised_loss(Tensor(np.zeros((1, 2, 4, 4))), Tensor(target))
    half = np.full((1, 2, 4, 4), 0.5)
    expected = LN2 + dice_oracle(half, target)
    assert abs(out.item() - expected) < 1e-12


def test_pseudo_label_argmax_and_ties():
    logits = np.zeros((1, 2, 2, 2))
    logits[0, 0, 0, 0] = 2.0
    logits[0, 1, 0, 0] = 1.0   # class 0 wins
    logits[0, 0, 0, 1] = -1.0
    logits[0, 1, 0, 1] = 3.0   # class 1 wins
    # (1,0) and (1,1) exact ties -> class 0
    pl = losses.make_pseudo_label(Tensor(logits))
    assert pl.data[0, 0, 0, 0] == 1.0 and pl.data[0, 1, 0, 1] == 1.0
    assert pl.data[0, 0, 1, 0] == 1.0 and pl.data[0, 0, 1, 1] == 1.0
    assert np.array_equal(pl.data.sum(axis=1), np.ones((1, 2, 2)))


def test_pseudo_label_gradient_isolation():
    rng = np.random.default_rng(11)
    w = Tensor(rng.standard_normal((2, 2, 1, 1)), requires_grad=True)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    producer_logits = ag.conv2d(x, w)  # "producing network"
    pseudo = losses.make_pseudo_label(producer_logits)
    other = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    ag.backward(losses.semi_supervised_loss(other, pseudo))
    assert w.grad is None
    assert other.grad is not None


def test_semi_rejects_attached_pseudo():
    rng = np.random.default_rng(12)
    logits = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
    attached = ag.softmax(logits, 1)
    with pytest.raises(ContractError):
        losses.semi_supervised_loss(logits, attached)


def test_semi_equals_supervised_structure():
    rng = np.random.default_rng(13)
    la = rng.standard_normal((1, 2, 3, 3))
    lb = rng.standard_normal((1, 2, 3, 3))
    pseudo = losses.make_pseudo_label(Tensor(lb))
    semi = losses.semi_supervised_loss(Tensor(la), pseudo).item()
    sup = losses.supervised_loss(Tensor(la), pseudo).item()
    assert semi == sup
    ce = ce_oracle(la, pseudo.data)
    dl = dice_oracle(np.exp(la) / np.exp(la).sum(1, keepdims=True), pseudo.data)
    assert abs(semi - (ce + dl)) < 1e-12


def test_semi_perfect_agreement_near_zero():
    idx = np.random.default_rng(14).integers(0, 2, (1, 4, 4))
    logits = np.where(one_hot_map(idx) > 0, 40.0, -40.0)
    pseudo = losses.make_pseudo_label(Tensor(logits))
    out = losses.semi_supervised_loss(Tensor(logits), pseudo)
    assert out.item() < 1e-4


# ---------------------------------------------------------------------------
# perturbation


def test_perturb_sigma_zero_is_identity():
    x = Tensor(np.random.default_rng(15).random((2, 1, 4, 4)))
    out = losses.perturb(x, 0.0, seed=3)
    assert np.array_equal(out.data, x.data)


def test_perturb_deterministic_under_seed():
    x = Tensor(np.random.default_rng(16).random((1, 1, 8, 8)))
    a = losses.perturb(x, 0.2, seed=42)
    b = losses.perturb(x, 0.2, seed=42)
    assert np.array_equal(a.data, b.data)
    c = losses.perturb(x, 0.2, seed=43)
    assert not np.array_equal(a.data, c.data)


def test_perturb_noise_statistics():
    sigma = 0.2
    n = 1_000_000
    x = Tensor(np.zeros((1, 1, 1000, 1000)))
    noise = losses.perturb(x, sigma, seed=7).data
    assert abs(noise.mean()) < 3 * sigma / 1000.0
    assert abs(noise.std() - sigma) / sigma < 0.01
    assert noise.size == n


# ---------------------------------------------------------------------------
# consistency


def _params(ds=2, sigma=0.2):
    return losses.ConsistencyParams(noise_sigma=sigma, ds_out=ds)


def test_consistency_identical_inputs_zero():
    logits = np.random.default_rng(17).standard_normal((2, 2, 8, 8))
    out = losses.consistency_loss(Tensor(logits), Tensor(logits.copy()), _params())
    assert out.item() == 0.0


def test_consistency_degenerate_pooling_equals_plain_mse():
    rng = np.random.default_rng(18)
    la, lb = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 2, 4, 4))
    out = losses.consistency_loss(Tensor(la), Tensor(lb), _params(ds=4))
    def normed(l):
        p = np.exp(l) / np.exp(l).sum(1, keepdims=True)
        return p / np.sqrt((p * p).sum(1, keepdims=True))
    ref = ((normed(la) - normed(lb)) ** 2).mean()
    assert abs(out.item() - ref) < 1e-12


def test_consistency_matches_step_oracle():
    rng = np.random.default_rng(19)
    la, lb = rng.standard_normal((1, 2, 8, 8)), rng.standard_normal((1, 2, 8, 8))
    out = losses.consistency_loss(Tensor(la), Tensor(lb), _params(ds=2))
    ref = consistency_oracle(la, lb, ds=2, eps=1e-8)
    assert abs(out.item() - ref) < 1e-12


def test_consistency_symmetric():
    rng = np.random.default_rng(20)
    la, lb = rng.standard_normal((2, 2, 8, 8)), rng.standard_normal((2, 2, 8, 8))
    ab = losses.consistency_loss(Tensor(la), Tensor(lb), _params())
    ba = losses.consistency_loss(Tensor(lb), Tensor(la), _params())
    assert abs(ab.item() - ba.item()) < 1e-15


def test_consistency_ds_larger_than_input_rejected():
    with pytest.raises(ConfigError):
        losses.consistency_loss(Tensor(np.zeros((1, 2, 4, 4))),
                                Tensor(np.zeros((1, 2, 4, 4))), _params(ds=8))


def test_consistency_stop_teacher_grad_flag():
    rng = np.random.default_rng(21)
    la = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    lb = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    ag.backward(losses.consistency_loss(la, lb, losses.ConsistencyParams(
        ds_out=2, stop_teacher_grad=True)))
    assert la.grad is not None and lb.grad is None


# ---------------------------------------------------------------------------
# ramp-up schedule


def test_ramp_endpoints():
    assert losses.ramp_up_weight(100, 100) == 1.0
    assert abs(losses.ramp_up_weight(0, 100) - math.exp(-5)) < 1e-12
    assert abs(losses.ramp_up_weight(50, 100) - math.exp(-1.25)) < 1e-12


def test_ramp_clamps_past_max():
    assert losses.ramp_up_weight(150, 100) == 1.0


def test_ramp_monotone_and_bounded():
    vals = [losses.ramp_up_weight(i, 200) for i in range(0, 201)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert min(vals) >= math.exp(-5) - 1e-15
    assert max(vals) <= 1.0


def test_ramp_rejects_bad_args():
    with pytest.raises(ConfigError):
        losses.ramp_up_weight(0, 0)
    with pytest.raises(ContractError):
        losses.ramp_up_weight(-1, 10)


# ---------------------------------------------------------------------------
# total loss assembly


def test_total_loss_arithmetic():
    parts = [Tensor(float(v)) for v in (1.0, 2.0, 3.0, 4.0, 5.0)]
    total, bd = losses.total_loss(*parts, lambda_t=0.5)
    assert abs(total.item() - 11.5) < 1e-15
    assert bd.identity_gap() < 1e-15


def test_total_loss_lambda_zero_drops_semi():
    parts = [Tensor(float(v)) for v in (1.0, 2.0, 100.0, 200.0, 5.0)]
    total, _ = losses.total_loss(*parts, lambda_t=0.0)
    assert abs(total.item() - 8.0) < 1e-15


def test_total_loss_all_zero():
    parts = [Tensor(0.0) for _ in range(5)]
    total, bd = losses.total_loss(*parts, lambda_t=0.7)
    assert total.item() == 0.0 and bd.total == 0.0


def test_loss_csv_row_format():
    bd = losses.LossBreakdown(1.0, 2.0, 3.0, 4.0, 5.0, 0.5, 11.5)
    row = bd.csv_row(1, 2, 3)
    assert row.startswith("1,2,3,")
    assert len(row.split(",")) == len(losses.LOSS_CSV_HEADER.split(","))


# ---------------------------------------------------------------------------
# gradients: finite differences through every loss


def _rand_logits_target(seed, shape=(1, 2, 4, 4)):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal(shape), requires_grad=True)
    target = Tensor(one_hot_map(rng.integers(0, 2, (shape[0],) + shape[2:])))
    return logits, target


@pytest.mark.parametrize("seed", range(10))
def test_grad_cross_entropy(seed):
    logits, target = _rand_logits_target(seed)
    assert_grad_matches(lambda: losses.cross_entropy(logits, target), [logits])


@pytest.mark.parametrize("seed", range(10))
def test_grad_dice(seed):
    rng = np.random.default_rng(seed)
    probs = Tensor(rng.uniform(0.05, 0.95, (1, 2, 4, 4)), requires_grad=True)
    target = Tensor(one_hot_map(rng.integers(0, 2, (1, 4, 4))))
    assert_grad_matches(lambda: losses.dice_loss(probs, target), [probs])


@pytest.mark.parametrize("seed", range(10))
def test_grad_supervised(seed):
    logits, target = _rand_logits_target(seed)
    assert_grad_matches(lambda: losses.supervised_loss(logits, target), [logits])


@pytest.mark.parametrize("seed", range(10))
def test_grad_semi(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    pseudo = losses.make_pseudo_label(Tensor(rng.standard_normal((1, 2, 4, 4))))
    assert_grad_matches(lambda: losses.semi_supervised_loss(logits, pseudo), [logits])


@pytest.mark.parametrize("seed", range(10))
def test_grad_consistency(seed):
    rng = np.random.default_rng(seed)
    la = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    lb = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    params = losses.ConsistencyParams(ds_out=2)
    assert_grad_matches(lambda: losses.consistency_loss(la, lb, params), [la, lb])


@pytest.mark.parametrize("seed", range(10))
def test_grad_total(seed):
    rng = np.random.default_rng(seed)
    logits_s = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    logits_t = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    target = Tensor(one_hot_map(rng.integers(0, 2, (1, 4, 4))))
    pseudo_s = losses.make_pseudo_label(Tensor(logits_s.data))
    pseudo_t = losses.make_pseudo_label(Tensor(logits_t.data))
    params = losses.ConsistencyParams(ds_out=2)

    def build():
        sup1 = losses.supervised_loss(logits_s, target)
        sup2 = losses.supervised_loss(logits_t, target)
        semi1 = losses.semi_supervised_loss(logits_s, pseudo_t)
        semi2 = losses.semi_supervised_loss(logits_t, pseudo_s)
        con = losses.consistency_loss(logits_s, logits_t, params)
        return losses.total_loss(sup1, sup2, semi1, semi2, con, 0.37)[0]

    assert_grad_matches(build, [logits_s, logits_t])
