import math

import numpy as np
import pytest

from crossview import losses as L
from crossview import tensor as T
from crossview.errors import ContractError, RangeError
from crossview.tensor import Tensor

LN4 = 1.3862943611198906
KL_HAND = 0.8788898309344878  # ln(5/3) + 0.9 ln 1.8 + 0.1 ln 0.2


def oracle_cross_entropy(logits: np.ndarray, label: int) -> float:
    """log-sum-exp route, independent of the library's softmax."""
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[label])


def oracle_batch_hard_triplet(emb: np.ndarray, labels: np.ndarray, margin: float) -> float:
    """Exhaustive per-anchor enumeration of every (a, p, n) triplet."""
    b = len(labels)
    values = []
    for a in range(b):
        d_ap = max(
            1.0 - float(emb[a] @ emb[p]) for p in range(b) if p != a and labels[p] == labels[a]
        )
        d_an = min(1.0 - float(emb[a] @ emb[n]) for n in range(b) if labels[n] != labels[a])
        values.append(max(0.0, d_ap - d_an + margin))
    return sum(values) / b


def unit_rows(rng, shape):
    m = rng.normal(size=shape)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = [Tensor(np.zeros(4)) for _ in range(5)]
        assert L.cross_entropy(logits, 2).item() == pytest.approx(LN4, abs=1e-12)

    def test_dominant_logit_limit(self):
        logits = [Tensor(np.array([500.0, 0.0, 0.0, 0.0])) for _ in range(5)]
        assert L.cross_entropy(logits, 0).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_log_sum_exp_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            raw = [rng.normal(size=6) for _ in range(5)]
            label = int(rng.integers(0, 6))
            expected = sum(oracle_cross_entropy(lg, label) for lg in raw) / 5
            got = L.cross_entropy([Tensor(lg) for lg in raw], label).item()
            assert got == pytest.approx(expected, abs=1e-10)

    def test_invalid_label(self):
        logits = [Tensor(np.zeros(4)) for _ in range(5)]
        with pytest.raises(RangeError):
            L.cross_entropy(logits, 4)

    def test_strictly_decreasing_in_true_logit(self):
        base = np.array([0.3, -0.2, 0.8])
        prev = math.inf
        for bump in (0.0, 0.5, 1.0, 2.0):
            logits = base.copy()
            logits[1] += bump
            value = L.cross_entropy([Tensor(logits)], 1).item()
            assert value < prev
            prev = value

    def test_batched_rows(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(3, 5))
        labels = np.array([0, 2, 4])
        expected = np.mean([oracle_cross_entropy(raw[i], labels[i]) for i in range(3)])
        got = L.cross_entropy([Tensor(raw)], labels).item()
        assert got == pytest.approx(expected, abs=1e-12)


class TestHardMiningTriplet:
    def test_anchor_equals_positive_orthogonal_negative(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 0, 1])
        # anchors 0,1: d_ap=0, d_an=1 -> 0; anchor 2: d_ap undefined
        with pytest.raises(ContractError):
            L.hard_mining_triplet(Tensor(emb), labels)
        emb4 = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        labels4 = np.array([0, 0, 1, 1])
        assert L.hard_mining_triplet(Tensor(emb4), labels4, margin=0.3).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_positive_identical_negative(self):
        # one anchor pair: a _|_ p (d=1) while n == a (d=0) -> hinge 1.3
        emb = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 0])
        extended = np.vstack([emb, [[1.0, 0.0], [1.0, 0.0]]])
        labels_ext = np.array([0, 0, 1, 1])
        per_anchor_oracle = oracle_batch_hard_triplet(extended, labels_ext, 0.3)
        got = L.hard_mining_triplet(Tensor(extended), labels_ext, margin=0.3).item()
        assert got == pytest.approx(per_anchor_oracle, abs=1e-12)
        # anchor 0: hardest positive d=1, hardest negative d=0 -> 1.3
        assert per_anchor_oracle >= 1.3 / 4

    def test_matches_exhaustive_oracle_batches_to_8(self):
        rng = np.random.default_rng(2)
        for b, n_cls in ((4, 2), (6, 3), (8, 4), (8, 2)):
            for _ in range(25):
                emb = unit_rows(rng, (b, 5))
                labels = np.repeat(np.arange(n_cls), b // n_cls)
                want = oracle_batch_hard_triplet(emb, labels, 0.3)
                got = L.hard_mining_triplet(Tensor(emb), labels, margin=0.3).item()
                assert got == pytest.approx(want, abs=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        emb = unit_rows(rng, (6, 4))
        labels = np.array([0, 0, 1, 1, 2, 2])
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        a = L.hard_mining_triplet(Tensor(emb), labels).item()
        b = L.hard_mining_triplet(Tensor(emb @ q), labels).item()
        assert a == pytest.approx(b, abs=1e-9)

    def test_range_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            emb = unit_rows(rng, (6, 3))
            labels = np.array([0, 0, 1, 1, 2, 2])
            v = L.hard_mining_triplet(Tensor(emb), labels, margin=0.3).item()
            assert 0.0 <= v <= 2.3

    def test_literal_single_max(self):
        rng = np.random.default_rng(5)
        emb = unit_rows(rng, (6, 4))
        labels = np.array([0, 0, 1, 1, 2, 2])
        per_anchor = []
        for a in range(6):
            d_ap = max(1 - emb[a] @ emb[p] for p in range(6) if p != a and labels[p] == labels[a])
            d_an = min(1 - emb[a] @ emb[n] for n in range(6) if labels[n] != labels[a])
            per_anchor.append(max(0.0, d_ap - d_an + 0.3))
        got = L.hard_mining_triplet(Tensor(emb), labels, margin=0.3, literal_max=True).item()
        assert got == pytest.approx(max(per_anchor), abs=1e-12)

    def test_gradient_flows(self):
        rng = np.random.default_rng(6)
        raw = rng.normal(size=(4, 3))
        labels = np.array([0, 0, 1, 1])

        def f(t):
            norm = T.sqrt(T.tsum(t * t, axis=-1, keepdims=True))
            return L.hard_mining_triplet(t / norm, labels, margin=0.3)

        err = T.grad_check(f, raw, h=1e-5)
        assert err < 1e-5


class TestMutualKL:
    def test_identical_distributions_zero(self):
        logits = Tensor(np.array([0.4, -1.0, 2.0]))
        assert L.mutual_kl([logits], [Tensor(logits.data.copy())]).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        # softmax inverse: logits log(p) reproduce p exactly
        ld = Tensor(np.log(np.array([0.5, 0.5])))
        ls = Tensor(np.log(np.array([0.9, 0.1])))
        got = L.mutual_kl([ld], [ls]).item()
        assert got == pytest.approx(KL_HAND, abs=1e-9)
        assert got == pytest.approx(0.510826 + 0.368064, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = [Tensor(rng.normal(size=5)) for _ in range(3)]
            b = [Tensor(rng.normal(size=5)) for _ in range(3)]
            ab = L.mutual_kl(a, b).item()
            ba = L.mutual_kl(b, a).item()
            assert ab == pytest.approx(ba, abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            a = [Tensor(rng.normal(size=4))]
            b = [Tensor(rng.normal(size=4))]
            assert L.mutual_kl(a, b).item() >= 0.0


class TestTotalLoss:
    def test_hand_sum(self):
        total, report = L.total_loss(Tensor(1.0), Tensor(0.5), Tensor(0.25))
        assert total.item() == 1.75
        assert report.total == 1.75
        assert report.total == report.l_rpt + report.l_mtc + report.l_kl

    def test_zero(self):
        total, report = L.total_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0))
        assert total.item() == 0.0 and report.total == 0.0

    def test_gradient_is_sum_of_term_gradients(self):
        rng = np.random.default_rng(9)
        x0 = rng.uniform(-1, 1, size=(4,))

        def term1(t):
            return T.tsum(T.sigmoid(t))

        def term2(t):
            return T.tsum(t * t) * 0.5

        def term3(t):
            return T.tsum(T.exp(t * 0.3))

        def combined(t):
            return L.total_loss(term1(t), term2(t), term3(t))[0]

        err = T.grad_check(combined, x0, h=1e-5)
        assert err < 1e-6
        grads = []
        for fn in (term1, term2, term3, combined):
            xt = Tensor(x0, requires_grad=True)
            T.backward(fn(xt))
            grads.append(xt.grad.copy())
        assert np.allclose(grads[0] + grads[1] + grads[2], grads[3], atol=1e-12)
