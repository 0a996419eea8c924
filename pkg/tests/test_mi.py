import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from freqadapt import compute as C
from freqadapt.mi import (LOG_2PI, VariationalGaussian, init_variational, loss_likelihood, loss_mi,
                          pairwise_log_prob, q_log_prob)


def _zero_q(dim, logvar=0.0):
    """q with mu = 0 and a fixed log-variance."""
    q = init_variational(0, dim, hidden=8)
    with torch.no_grad():
        for p in q.mean_net.parameters():
            p.zero_()
        for p in q.logvar_net.parameters():
            p.zero_()
        q.logvar_net.fc2.bias.fill_(logvar)
    return q


def _identity_q(dim, logvar):
    """q with mu(z_s) = z_s exactly (leaky slope makes the 2-layer net linear on +/- halves)."""
    q = _zero_q(dim, logvar)
    with torch.no_grad():
        eye = torch.eye(dim)
        q.mean_net.fc1.weight.copy_(torch.cat([eye, -eye], dim=1)[:, :8] if dim * 2 <= 8 else eye)
    return q


def test_log_prob_examples():
    q = _zero_q(1)
    assert q_log_prob(q, torch.zeros(1), torch.zeros(1)).item() == pytest.approx(-0.918939, abs=1e-6)
    q4 = _zero_q(4)
    assert q_log_prob(q4, torch.zeros(4), torch.ones(4)).item() == pytest.approx(-3.675754, abs=1e-6)


def test_log_prob_matches_scipy():
    from scipy.stats import multivariate_normal
    q = init_variational(1, 3, hidden=16)
    zs, zt = torch.randn(3, dtype=torch.float32), torch.randn(3)
    mu, lv = q(zs)
    ref = multivariate_normal(mu.detach().double().numpy(), np.diag(np.exp(lv.detach().double().numpy()))).logpdf(
        zt.double().numpy())
    assert q_log_prob(q, zt, zs).item() == pytest.approx(ref, rel=1e-5)


def test_log_prob_is_maximal_at_mean():
    q = init_variational(2, 3, hidden=16)
    zs = torch.randn(3)
    mu, _ = q(zs)
    best = q_log_prob(q, mu.detach(), zs)
    for k in range(5):
        assert q_log_prob(q, mu.detach() + 0.1 * torch.randn(3), zs) < best


def test_logvar_is_clamped():
    q = _zero_q(2, logvar=50.0)
    assert torch.all(q(torch.zeros(1, 2))[1] == 10.0)
    q = _zero_q(2, logvar=-50.0)
    assert torch.all(q(torch.zeros(1, 2))[1] == -10.0)
    with pytest.raises(ValueError):
        VariationalGaussian(2, 4, logvar_min=1.0, logvar_max=0.0)


def test_input_checks():
    q = _zero_q(2)
    with pytest.raises(ValueError, match="dimension"):
        q_log_prob(q, torch.zeros(3), torch.zeros(2))
    with pytest.raises(ValueError, match="non-finite"):
        q_log_prob(q, torch.tensor([0.0, float("nan")]), torch.zeros(2))
    with pytest.raises(ValueError, match="empty"):
        loss_mi(q, torch.zeros(0, 2), torch.zeros(0, 2))
    with pytest.raises(ValueError):
        loss_mi(q, torch.zeros(2, 2), torch.zeros(3, 2))


def test_loss_mi_single_sample_is_exactly_zero():
    q = init_variational(0, 4, hidden=16)
    assert loss_mi(q, torch.randn(1, 4), torch.randn(1, 4)).item() == 0.0


def test_loss_mi_constant_targets_is_zero():
    q = init_variational(0, 3, hidden=16)
    zt = torch.randn(1, 3).expand(6, 3)
    assert abs(loss_mi(q, torch.randn(6, 3), zt).item()) < 1e-5


def test_loss_mi_matches_brute_force_pairs(f64):
    q = init_variational(4, 3, hidden=32).double()
    zs, zt = torch.randn(7, 3), torch.randn(7, 3)
    L = pairwise_log_prob(q, zs, zt)
    brute = (L.diagonal() - L.mean(dim=1)).mean()
    assert loss_mi(q, zs, zt).item() == pytest.approx(brute.item(), rel=1e-10, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_loss_mi_permutation_invariant(n, seed):
    g = torch.Generator().manual_seed(seed)
    q = init_variational(1, 2, hidden=8)
    zs, zt = torch.randn(n, 2, generator=g), torch.randn(n, 2, generator=g)
    perm = torch.randperm(n, generator=g)
    a, b = loss_mi(q, zs, zt).item(), loss_mi(q, zs[perm], zt[perm]).item()
    assert abs(a - b) <= 1e-5 * max(1.0, abs(a))


def test_loss_mi_freezes_q():
    q = init_variational(0, 2, hidden=8)
    zs = torch.randn(4, 2, requires_grad=True)
    zt = torch.randn(4, 2, requires_grad=True)
    C.backward(loss_mi(q, zs, zt))
    assert all(p.grad is None for p in q.parameters())
    assert zs.grad is not None and zt.grad is not None


def test_loss_mi_grad_matches_fd(f64):
    q = init_variational(3, 2, hidden=8).double()
    zs, zt = torch.randn(3, 2), torch.randn(3, 2)
    a = zs.clone().requires_grad_(True)
    C.backward(loss_mi(q, a, zt))
    assert C.relative_error(a.grad, C.numeric_grad(lambda v: loss_mi(q, v, zt), zs)) < 1e-4
    b = zt.clone().requires_grad_(True)
    C.backward(loss_mi(q, zs, b))
    assert C.relative_error(b.grad, C.numeric_grad(lambda v: loss_mi(q, zs, v), zt)) < 1e-4


def test_likelihood_examples():
    q = _zero_q(1)
    assert loss_likelihood(q, torch.zeros(3, 1), torch.zeros(3, 1)).item() == pytest.approx(0.918939, abs=1e-6)
    # a sharp q centred on z_s that sees z_t == z_s gives a strongly negative loss
    sharp = _zero_q(1, logvar=-8.0)
    with torch.no_grad():
        sharp.mean_net.fc1.weight.zero_()
        sharp.mean_net.fc1.weight[0, 0] = 1.0
        sharp.mean_net.fc2.weight[0, 0] = 1.0
    z = torch.rand(5, 1) + 0.1  # positive half: leaky is the identity there
    assert loss_likelihood(sharp, z, z).item() < -3.0


def test_likelihood_reaches_q_and_inputs():
    q = init_variational(0, 2, hidden=8)
    zs = torch.randn(4, 2, requires_grad=True)
    C.backward(loss_likelihood(q, zs, torch.randn(4, 2)))
    assert all(p.grad is not None for p in q.parameters())
    assert zs.grad is not None


def _gaussian_pairs(rho, n, seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=n)
    t = rho * s + math.sqrt(1 - rho ** 2) * rng.normal(size=n)
    return torch.tensor(s[:, None], dtype=torch.float32), torch.tensor(t[:, None], dtype=torch.float32)


def fit_q(zs, zt, steps=2000, seed=0, batch=256, lr=3e-3):
    q = init_variational(seed, 1, hidden=1024)
    opt = C.Adam([(k, p) for k, p in q.named_parameters()], lr=lr)
    g = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randint(0, len(zs), (batch,), generator=g)
        opt.zero_grad()
        C.backward(loss_likelihood(q, zs[idx], zt[idx]))
        opt.step()
    return q


def test_likelihood_decreases_under_adam():
    zs, zt = _gaussian_pairs(0.8, 2000, 0)
    q = init_variational(0, 1, hidden=64)
    opt = C.Adam(list(q.named_parameters()), lr=1e-3)
    first = None
    for k in range(200):
        opt.zero_grad()
        loss = loss_likelihood(q, zs[:256], zt[:256])
        first = float(loss) if first is None else first
        C.backward(loss)
        opt.step()
    assert float(loss_likelihood(q, zs[:256], zt[:256])) < first


@pytest.mark.parametrize("rho", [0.0, 0.5, 0.8])
def test_fitted_club_matches_its_closed_form(rho):
    # With q equal to the true conditional, the CLUB gap is rho^2 / (1 - rho^2)
    # (positive pairs minus all pairs), which upper-bounds -0.5 log(1 - rho^2).
    zs, zt = _gaussian_pairs(rho, 10_000, 1)
    q = fit_q(zs, zt)
    with torch.no_grad():
        est = loss_mi(q, zs, zt).item()
    club = rho ** 2 / (1 - rho ** 2)
    assert est == pytest.approx(club, abs=0.1)
    assert est >= -0.5 * math.log(1 - rho ** 2) - 0.05


def test_independent_pairs_average_to_zero():
    zs, zt = _gaussian_pairs(0.0, 10_000, 2)
    zt = zt[torch.randperm(len(zt), generator=torch.Generator().manual_seed(0))]
    q = fit_q(zs, zt, steps=300)
    with torch.no_grad():
        vals = [loss_mi(q, zs[k:k + 1000], zt[k:k + 1000]).item() for k in range(0, 10_000, 1000)]
    assert abs(float(np.mean(vals))) < 0.05
