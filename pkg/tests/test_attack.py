import numpy as np
import pytest

from lipshift import tensor as T
from lipshift.attack import AttackConfig, attack_dataset, margins, pgd_l2, project, random_probe, write_attack_report
from lipshift.data import synthetic_blobs
from lipshift.exceptions import ContractError
from lipshift.model import ArchConfig, build_model
from lipshift.tensor import Tensor


class Linear:
    """Two-class linear model: logits (s, -s) with s = w.(x - 0.5)."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64).ravel()

    def parameters(self):
        return {}

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        flat = T.reshape(x, (x.shape[0], -1))
        s = T.add(T.matmul(flat, Tensor(self.w.reshape(-1, 1), dtype=x.dtype)), -0.5 * self.w.sum())
        return T.concatenate([s, T.scale(s, -1.0)], axis=1)


class Constant:
    def parameters(self):
        return {}

    def forward(self, x):
        n = x.shape[0]
        return Tensor(np.tile([1.0, 0.0], (n, 1)))


def test_config_defaults_and_errors():
    cfg = AttackConfig(eps=0.5, steps=10)
    assert cfg.step_size == pytest.approx(0.125)
    assert AttackConfig(eps=0.5, steps=1).step_size == 0.5
    with pytest.raises(ContractError):
        AttackConfig(eps=-1)
    with pytest.raises(ContractError):
        AttackConfig(eps=0.1, step_size=0.2)


def test_projection_stays_in_ball_and_box():
    rng = np.random.default_rng(0)
    x = rng.random((50, 3, 4, 4))
    far = x + rng.standard_normal(x.shape)
    p = project(far, x, 0.3)
    d = np.linalg.norm((p - x).reshape(50, -1), axis=1)
    assert np.all(d <= 0.3 + 1e-12)
    assert p.min() >= 0 and p.max() <= 1


def test_pgd_breaks_linear_model_within_ball():
    w = np.zeros((1, 2, 2))
    w[0, 0, 0] = 1.0
    x = np.full((2, 1, 2, 2), 0.5)
    x[0, 0, 0, 0] = 0.6  # margin 2 * 0.1, flips after moving 0.1
    x[1, 0, 0, 0] = 0.9  # needs 0.4, out of reach
    y = np.array([0, 0])
    with T.default_dtype(np.float64):
        adv, ok = pgd_l2(Linear(w), x, y, AttackConfig(eps=0.2, steps=20, restarts=2))
    assert ok.tolist() == [True, False]
    assert np.all(np.linalg.norm((adv - x).reshape(2, -1), axis=1) <= 0.2 + 1e-12)


def test_eps_zero_and_constant_model():
    x = np.random.default_rng(0).random((4, 1, 2, 2))
    y = np.zeros(4, dtype=int)
    adv, ok = pgd_l2(Constant(), x, y, AttackConfig(eps=0.5, steps=5, restarts=2))
    assert not ok.any()
    assert not random_probe(Constant(), x, y, 0.5, n_probes=50).any()
    m = build_model(ArchConfig(), 0)
    xb = np.random.default_rng(1).random((3, 3, 8, 8))
    adv, ok = pgd_l2(m, xb, np.array([0, 1, 0]), AttackConfig(eps=0.0, steps=5))
    np.testing.assert_array_equal(adv, xb)


def test_margins():
    np.testing.assert_allclose(margins(np.array([[2.0, 1.0, 0.5], [0.0, 3.0, 1.0]]), np.array([0, 0])), [1.0, -3.0])


def test_parameters_untouched_and_report(tmp_path):
    m = build_model(ArchConfig(), 0)
    before = {k: (p.data.copy(), p.requires_grad) for k, p in m.parameters().items()}
    ds = synthetic_blobs(4, 2, seed=0)
    res = attack_dataset(m, ds, AttackConfig(eps=0.1, steps=3, restarts=2))
    for k, p in m.parameters().items():
        np.testing.assert_array_equal(p.data, before[k][0])
        assert p.requires_grad == before[k][1]
        assert p.grad is None or not np.any(p.grad)
    assert res.robust_accuracy <= res.clean_accuracy
    write_attack_report(tmp_path / "a.csv", res)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "sample_id,clean_correct,attack_success,final_margin"
    assert len(lines) == len(ds) + 1
