"""Central finite-difference gradient oracle plus the per-op case catalog.

The oracle only ever calls an op's forward path, so it stays independent of
the backward rules it is checking. Inputs are drawn away from kinks (relu at
zero, the log clamp, pooling ties) so the two-sided difference is valid.
"""

from __future__ import annotations

import numpy as np

from sslegad import autograd as ag

FD_STEP = 1e-3
FD_TOL = 1e-4


def numeric_grad(build, param: ag.Tensor, h: float = FD_STEP) -> np.ndarray:
    """d build().item() / d param by central differences, one element at a time."""
    flat = param.data.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = build().item()
        flat[i] = orig - h
        fm = build().item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(param.shape)


def assert_grad_matches(build, params, tol: float = FD_TOL) -> None:
    """Run backward once and compare every param's grad against the oracle."""
    for p in params:
        p.grad = None
    loss = build()
    ag.backward(loss)
    for p in params:
        num = numeric_grad(build, p)
        ana = p.grad
        assert ana is not None, "no gradient accumulated"
        denom = np.maximum(1.0, np.maximum(np.abs(num), np.abs(ana)))
        rel = np.abs(ana - num) / denom
        assert rel.max() <= tol, f"rel err {rel.max():.3e} exceeds {tol}"


def _proj_loss(out: ag.Tensor, rng: np.random.Generator) -> ag.Tensor:
    """Scalarize via a fixed random projection so the full Jacobian is exercised."""
    r = ag.Tensor(rng.uniform(0.5, 1.5, size=out.shape))
    return ag.sum(ag.mul(out, r))


def _t(rng, shape, lo=-1.0, hi=1.0, grad=True):
    return ag.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=grad)


def _t_away_from_zero(rng, shape, grad=True):
    mag = rng.uniform(0.2, 1.0, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return ag.Tensor(mag * sign, requires_grad=grad)


def _t_distinct(rng, shape, grad=True):
    """Values pairwise separated by >= 0.05 so pooling maxima are stable
    under the +-1e-3 finite-difference probe."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * 0.05
    return ag.Tensor(vals.reshape(shape), requires_grad=grad)


def case_add(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, (2, 3)), _t(rng, (2, 3))
    return lambda: _proj_loss(ag.add(a, b), np.random.default_rng(seed + 1)), [a, b]


def case_add_broadcast(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, (2, 3, 4)), _t(rng, (3, 1))
    return lambda: _proj_loss(ag.add(a, b), np.random.default_rng(seed + 1)), [a, b]


def case_sub(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, (3, 2)), _t(rng, (3, 2))
    return lambda: _proj_loss(ag.sub(a, b), np.random.default_rng(seed + 1)), [a, b]


def case_mul(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, (2, 4)), _t(rng, (2, 4))
    return lambda: _proj_loss(ag.mul(a, b), np.random.default_rng(seed + 1)), [a, b]


def case_div(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, (2, 4)), _t_away_from_zero(rng, (2, 4))
    return lambda: _proj_loss(ag.div(a, b), np.random.default_rng(seed + 1)), [a, b]


def case_scalar_mul(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (3, 3))
    return lambda: _proj_loss(ag.scalar_mul(a, -1.7), np.random.default_rng(seed + 1)), [a]


def case_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, (2, 3)), _t(rng, (3, 4))
    return lambda: _proj_loss(ag.matmul(a, b), np.random.default_rng(seed + 1)), [a, b]


def case_conv2d(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, (2, 2, 5, 5)), _t(rng, (3, 2, 3, 3)), _t(rng, (3,))
    return (
        lambda: _proj_loss(ag.conv2d(x, w, b, stride=1, pad=1), np.random.default_rng(seed + 1)),
        [x, w, b],
    )


def case_conv2d_strided(seed):
    rng = np.random.default_rng(seed)
    x, w = _t(rng, (1, 3, 6, 6)), _t(rng, (2, 3, 2, 2))
    return (
        lambda: _proj_loss(ag.conv2d(x, w, stride=2, pad=0), np.random.default_rng(seed + 1)),
        [x, w],
    )


def case_relu(seed):
    rng = np.random.default_rng(seed)
    a = _t_away_from_zero(rng, (3, 4))
    return lambda: _proj_loss(ag.relu(a), np.random.default_rng(seed + 1)), [a]


def case_max_pool2d(seed):
    rng = np.random.default_rng(seed)
    a = _t_distinct(rng, (1, 2, 4, 4))
    return lambda: _proj_loss(ag.max_pool2d(a, 2), np.random.default_rng(seed + 1)), [a]


def case_avg_pool2d(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (2, 2, 4, 4))
    return lambda: _proj_loss(ag.avg_pool2d(a, 2), np.random.default_rng(seed + 1)), [a]


def case_adaptive_avg_pool2d(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (1, 2, 4, 4))
    return lambda: _proj_loss(ag.adaptive_avg_pool2d(a, 2), np.random.default_rng(seed + 1)), [a]


def case_adaptive_avg_pool2d_uneven(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (1, 2, 5, 5))
    return lambda: _proj_loss(ag.adaptive_avg_pool2d(a, 3), np.random.default_rng(seed + 1)), [a]


def case_upsample_nearest(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (1, 3, 3, 3))
    return lambda: _proj_loss(ag.upsample_nearest(a, 2), np.random.default_rng(seed + 1)), [a]


def case_softmax(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (2, 3, 4), lo=-2.0, hi=2.0)
    return lambda: _proj_loss(ag.softmax(a, 1), np.random.default_rng(seed + 1)), [a]


def case_log(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (3, 3), lo=0.1, hi=2.0)
    return lambda: _proj_loss(ag.log(a), np.random.default_rng(seed + 1)), [a]


def case_exp(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (3, 3))
    return lambda: _proj_loss(ag.exp(a), np.random.default_rng(seed + 1)), [a]


def case_sum(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (2, 3, 4))
    return lambda: _proj_loss(ag.sum(a, axes=(0, 2)), np.random.default_rng(seed + 1)), [a]


def case_sum_all(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (3, 4))
    return lambda: ag.sum(a), [a]


def case_mean(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (2, 3, 4))
    return lambda: _proj_loss(ag.mean(a, axes=1), np.random.default_rng(seed + 1)), [a]


def case_l2_normalize(seed):
    rng = np.random.default_rng(seed)
    a = ag.Tensor(rng.uniform(0.3, 1.0, (3, 4)) * np.where(rng.random((3, 4)) < 0.5, -1, 1),
                  requires_grad=True)
    return lambda: _proj_loss(ag.l2_normalize(a, 1, eps=1e-8), np.random.default_rng(seed + 1)), [a]


def case_mse(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, (2, 3)), _t(rng, (2, 3))
    return lambda: ag.mse(a, b), [a, b]


def case_square(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (3, 3))
    return lambda: _proj_loss(ag.square(a), np.random.default_rng(seed + 1)), [a]


def case_concat(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, (2, 2, 3)), _t(rng, (2, 4, 3))
    return lambda: _proj_loss(ag.concat([a, b], axis=1), np.random.default_rng(seed + 1)), [a, b]


def case_permute(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (2, 3, 4, 5))
    return lambda: _proj_loss(ag.permute(a, (0, 2, 3, 1)), np.random.default_rng(seed + 1)), [a]


def case_conv2d_channels_last(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, (2, 5, 5, 2)), _t(rng, (3, 2, 3, 3)), _t(rng, (3,))
    return (
        lambda: _proj_loss(ag.conv2d(x, w, b, stride=1, pad=1, channels_last=True),
                           np.random.default_rng(seed + 1)),
        [x, w, b],
    )


def case_conv2d_channels_last_strided(seed):
    rng = np.random.default_rng(seed)
    x, w = _t(rng, (1, 7, 7, 3)), _t(rng, (2, 3, 3, 3))
    return (
        lambda: _proj_loss(ag.conv2d(x, w, stride=2, pad=0, channels_last=True),
                           np.random.default_rng(seed + 1)),
        [x, w],
    )


def case_conv2d_pointwise_channels_last(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, (2, 4, 4, 5)), _t(rng, (3, 5, 1, 1)), _t(rng, (3,))
    return (
        lambda: _proj_loss(ag.conv2d(x, w, b, channels_last=True),
                           np.random.default_rng(seed + 1)),
        [x, w, b],
    )


def case_max_pool2d_channels_last(seed):
    rng = np.random.default_rng(seed)
    a = _t_distinct(rng, (2, 4, 4, 3))
    return lambda: _proj_loss(ag.max_pool2d(a, 2, channels_last=True),
                              np.random.default_rng(seed + 1)), [a]


def case_max_pool2d_k3(seed):
    rng = np.random.default_rng(seed)
    a = _t_distinct(rng, (1, 6, 6, 2))
    return lambda: _proj_loss(ag.max_pool2d(a, 3, channels_last=True),
                              np.random.default_rng(seed + 1)), [a]


def case_avg_pool2d_channels_last(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (2, 4, 4, 3))
    return lambda: _proj_loss(ag.avg_pool2d(a, 2, channels_last=True),
                              np.random.default_rng(seed + 1)), [a]


def case_adaptive_avg_pool2d_channels_last(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (1, 6, 6, 2))
    return lambda: _proj_loss(ag.adaptive_avg_pool2d(a, 2, channels_last=True),
                              np.random.default_rng(seed + 1)), [a]


def case_upsample_channels_last(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (1, 3, 3, 2))
    return lambda: _proj_loss(ag.upsample_nearest(a, 2, channels_last=True),
                              np.random.default_rng(seed + 1)), [a]


def case_softmax_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = _t(rng, (1, 2, 3, 3), lo=-2.0, hi=2.0)
    idx = rng.integers(0, 2, (1, 3, 3))
    onehot = np.zeros((1, 2, 3, 3))
    np.put_along_axis(onehot, idx[:, None], 1.0, axis=1)
    target = ag.Tensor(onehot)
    return lambda: ag.softmax_cross_entropy(logits, target, axis=1), [logits]


def case_softmax_cross_entropy_soft_target(seed):
    rng = np.random.default_rng(seed)
    logits = _t(rng, (1, 2, 2, 2), lo=-2.0, hi=2.0)
    raw = rng.uniform(0.2, 0.8, (1, 1, 2, 2))
    target = ag.Tensor(np.concatenate([raw, 1.0 - raw], axis=1), requires_grad=True)
    return lambda: ag.softmax_cross_entropy(logits, target, axis=1), [logits, target]


def case_narrow(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (3, 5))
    return lambda: _proj_loss(ag.narrow(a, 1, 1, 3), np.random.default_rng(seed + 1)), [a]


def case_reshape(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, (2, 6))
    return lambda: _proj_loss(ag.reshape(a, (3, 4)), np.random.default_rng(seed + 1)), [a]


OP_CASES = {
    "add": case_add,
    "add_broadcast": case_add_broadcast,
    "sub": case_sub,
    "mul": case_mul,
    "div": case_div,
    "scalar_mul": case_scalar_mul,
    "matmul": case_matmul,
    "conv2d": case_conv2d,
    "conv2d_strided": case_conv2d_strided,
    "conv2d_channels_last": case_conv2d_channels_last,
    "conv2d_channels_last_strided": case_conv2d_channels_last_strided,
    "conv2d_pointwise_channels_last": case_conv2d_pointwise_channels_last,
    "relu": case_relu,
    "max_pool2d": case_max_pool2d,
    "max_pool2d_channels_last": case_max_pool2d_channels_last,
    "max_pool2d_k3": case_max_pool2d_k3,
    "avg_pool2d": case_avg_pool2d,
    "avg_pool2d_channels_last": case_avg_pool2d_channels_last,
    "adaptive_avg_pool2d": case_adaptive_avg_pool2d,
    "adaptive_avg_pool2d_uneven": case_adaptive_avg_pool2d_uneven,
    "adaptive_avg_pool2d_channels_last": case_adaptive_avg_pool2d_channels_last,
    "upsample_nearest": case_upsample_nearest,
    "upsample_channels_last": case_upsample_channels_last,
    "permute": case_permute,
    "softmax": case_softmax,
    "softmax_cross_entropy": case_softmax_cross_entropy,
    "softmax_cross_entropy_soft_target": case_softmax_cross_entropy_soft_target,
    "log": case_log,
    "exp": case_exp,
    "sum": case_sum,
    "sum_all": case_sum_all,
    "mean": case_mean,
    "l2_normalize": case_l2_normalize,
    "mse": case_mse,
    "square": case_square,
    "concat": case_concat,
    "narrow": case_narrow,
    "reshape": case_reshape,
}
