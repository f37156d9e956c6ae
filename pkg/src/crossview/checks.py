"""Finite-difference verification of every differentiable building block.

Each check builds a scalar-valued function from one primitive (plus fixed
random constants), runs the central-difference comparison, and reports the
max relative error.  Draws sit in [-2, 2]; entries too close to a kink
(relu/max/clamp) are nudged away so the two-sided difference is valid.
"""

from __future__ import annotations

import numpy as np

from . import losses as L
from . import tensor as T
from .model import CrossViewModel, ModelConfig, l2_normalize
from .tensor import Tensor

_KINK_GAP = 1e-3


def _draw(rng, shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _away_from(x, value=0.0, gap=_KINK_GAP):
    x = x.copy()
    near = np.abs(x - value) < gap
    x[near] += np.where(x[near] >= value, gap, -gap)
    return x


def primitive_checks(seed: int, h: float = 1e-5) -> dict:
    """name -> max relative gradient error, one entry per primitive."""
    rng = np.random.default_rng([seed, 31])
    out = {}

    x = _draw(rng, (3, 4))
    c = Tensor(_draw(rng, (3, 4)))
    out["add"] = T.grad_check(lambda t: T.tsum(t + c), x, h)
    out["sub"] = T.grad_check(lambda t: T.tsum(c - t), x, h)
    out["mul"] = T.grad_check(lambda t: T.tsum(t * c), x, h)
    d = Tensor(np.sign(_draw(rng, (3, 4))) * (0.5 + np.abs(_draw(rng, (3, 4)))))
    out["div"] = T.grad_check(lambda t: T.tsum(t / d), x, h)
    out["neg"] = T.grad_check(lambda t: T.tsum(T.neg(t) * c), x, h)

    m = Tensor(_draw(rng, (4, 5)))
    mm_w = Tensor(_draw(rng, (3, 5)))
    out["matmul"] = T.grad_check(lambda t: T.tsum(T.matmul(t, m) * mm_w), x, h)

    x3 = _draw(rng, (2, 3, 4))
    c3 = Tensor(_draw(rng, (4, 2, 3)))
    out["permute"] = T.grad_check(lambda t: T.tsum(T.permute(t, (2, 0, 1)) * c3), x3, h)
    inv_w = Tensor(_draw(rng, (3, 4, 2)))
    out["inverse_permute"] = T.grad_check(lambda t: T.tsum(T.inverse_permute(t, (2, 0, 1)) * inv_w), x3, h)
    rs_w = Tensor(_draw(rng, (6, 4)))
    out["reshape"] = T.grad_check(lambda t: T.tsum(T.reshape(t, (6, 4)) * rs_w), x3, h)
    cat_c = Tensor(_draw(rng, (2, 4)))
    cat_w = Tensor(_draw(rng, (5, 4)))
    out["concat"] = T.grad_check(lambda t: T.tsum(T.concat([t, cat_c], axis=0) * cat_w), x, h)

    sum_w = Tensor(_draw(rng, (3,)))
    out["sum"] = T.grad_check(lambda t: T.tsum(T.tsum(t, axis=1) * sum_w), x, h)
    mean_w = Tensor(_draw(rng, (4,)))
    out["mean"] = T.grad_check(lambda t: T.tsum(T.tmean(t, axis=0) * mean_w), x, h)
    out["max"] = T.grad_check(lambda t: T.tsum(T.tmax(t, axis=1) * sum_w), x, h)

    out["relu"] = T.grad_check(lambda t: T.tsum(T.relu(t) * c), _away_from(x), h)
    out["sigmoid"] = T.grad_check(lambda t: T.tsum(T.sigmoid(t) * c), x, h)
    out["exp"] = T.grad_check(lambda t: T.tsum(T.exp(t) * c), x, h)
    pos = np.abs(x) + 0.5
    out["log"] = T.grad_check(lambda t: T.tsum(T.log(t) * c), pos, h)
    out["sqrt"] = T.grad_check(lambda t: T.tsum(T.sqrt(t) * c), pos, h)
    out["clamp_min"] = T.grad_check(lambda t: T.tsum(T.clamp_min(t, 0.25) * c), _away_from(x, 0.25), h)

    out["softmax"] = T.grad_check(lambda t: T.tsum(T.softmax(t) * c), x, h)
    out["log_softmax"] = T.grad_check(lambda t: T.tsum(T.log_softmax(t) * c), x, h)
    labels = rng.integers(0, 4, size=3)
    out["pick"] = T.grad_check(lambda t: T.tsum(T.pick(t, labels)), x, h)

    xc = _draw(rng, (2, 5, 6))
    gap_w = Tensor(_draw(rng, (2,)))
    pool_w = Tensor(_draw(rng, (1, 5, 6)))
    out["global_avg_pool"] = T.grad_check(lambda t: T.tsum(T.global_avg_pool(t) * gap_w), xc, h)
    out["channel_avg_pool"] = T.grad_check(lambda t: T.tsum(T.channel_avg_pool(t) * pool_w), xc, h)
    out["channel_max_pool"] = T.grad_check(lambda t: T.tsum(T.channel_max_pool(t) * pool_w), xc, h)

    img = _draw(rng, (2, 3, 6, 6))
    kern = Tensor(_draw(rng, (4, 3, 3, 3)) * 0.3)
    bias = Tensor(_draw(rng, (4,)) * 0.3)
    cw = Tensor(_draw(rng, (2, 4, 3, 3)))
    out["conv2d"] = T.grad_check(lambda t: T.tsum(T.conv2d(t, kern, bias, stride=2, padding=1) * cw), img, h)
    img_c = Tensor(_draw(rng, (2, 3, 6, 6)))
    cw_full = Tensor(_draw(rng, (2, 4, 6, 6)))
    out["conv2d_weight"] = T.grad_check(
        lambda t: T.tsum(T.conv2d(img_c, t, bias, stride=1, padding=1) * cw_full), kern.data, h
    )
    return out


def _small_model(seed: int, reduction: int = 2) -> CrossViewModel:
    cfg = ModelConfig(
        n_classes=3,
        in_channels=2,
        input_hw=(4, 4),
        widths=(4,),
        bottleneck=6,
        caci_reduction=reduction,
        spatial_kernel=3,
    )
    return CrossViewModel.init(cfg, seed=seed)


def caci_check(seed: int, h: float = 1e-5) -> float:
    """Full channel+spatial gate, checked against the input map."""
    rng = np.random.default_rng([seed, 32])
    model = _small_model(seed, reduction=2)
    x = rng.uniform(-2.0, 2.0, size=(4, 5, 6))
    weights = Tensor(rng.uniform(-1.0, 1.0, size=(4, 5, 6)))
    return T.grad_check(lambda t: T.tsum(model.caci_forward(t, "CHW")[0] * weights), x, h)


def rca_check(seed: int, h: float = 1e-5) -> float:
    """All four permutation branches plus fusion, input (3, 4, 4)."""
    rng = np.random.default_rng([seed, 33])
    cfg = ModelConfig(
        n_classes=3,
        in_channels=3,
        input_hw=(8, 8),
        widths=(3,),
        bottleneck=4,
        caci_reduction=1,
        spatial_kernel=3,
    )
    model = CrossViewModel.init(cfg, seed=seed)
    x = rng.uniform(-2.0, 2.0, size=(3, 4, 4))
    return T.grad_check(lambda t: T.tsum(model.rca_forward(t)[0]), x, h)


def composite_loss_check(seed: int, h: float = 1e-5) -> float:
    """End-to-end graph: encoder, attention, head, and all three loss terms."""
    rng = np.random.default_rng([seed, 34])
    model = _small_model(seed)
    labels = np.array([0, 1])
    xd = rng.uniform(-1.5, 1.5, size=(2, 2, 4, 4))
    xs = Tensor(rng.uniform(-1.5, 1.5, size=(2, 2, 4, 4)))

    def f(t):
        out_d = model.forward(t)
        out_s = model.forward(xs)
        l_rpt = (L.cross_entropy(out_d.logits, labels) + L.cross_entropy(out_s.logits, labels)) * 0.5
        pooled = T.concat([T.global_avg_pool(out_d.fused), T.global_avg_pool(out_s.fused)], axis=0)
        l_mtc = L.hard_mining_triplet(l2_normalize(pooled), np.concatenate([labels, labels]))
        l_kl = L.mutual_kl(out_d.logits, out_s.logits)
        return l_rpt + l_mtc + l_kl

    return T.grad_check(f, xd, h)


def full_battery(seeds, h: float = 1e-5) -> dict:
    """Worst error per check name across all seeds."""
    worst = {}
    for seed in seeds:
        results = dict(primitive_checks(seed, h))
        results["caci"] = caci_check(seed, h)
        results["rca"] = rca_check(seed, h)
        results["composite_loss"] = composite_loss_check(seed, h)
        for name, err in results.items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
