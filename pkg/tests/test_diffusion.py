import json

import numpy as np
import pytest

from osmforge.diffusion import (
    DDIM,
    DDPM,
    Condition,
    ConstantDenoiser,
    GaussianDenoiser,
    GuidedDenoiser,
    SigmaPolicy,
    analytic_gaussian_denoiser,
    cfg_combine,
    ddim_invert,
    ddim_step,
    ddim_update,
    ddpm_sigma,
    forward_marginal,
    make_schedule,
    make_timesteps,
    posterior_variance,
    predict_x0,
    redenoise,
    relative_error,
    sample,
    write_trajectory,
)
from osmforge.errors import PolicyError, ScheduleError, ShapeError

# reference values computed once with mpmath at 50 digits
ALPHA_BAR_1000 = 4.035829765375676e-05
SIGMA2_T2 = 0.07142857142857142
MARGINAL = 1.1131032685303161  # x0 = 1, eps = 0.5, alpha_bar = 0.72
X0_HAT = 0.8667065197464174    # x_t = 1, eps = 0.5, alpha_bar = 0.72
DDIM_X1 = 0.98034388260333301
DDPM_X1 = 0.97356073554587180  # z = 0.25

S2 = make_schedule(2, [0.1, 0.2])
C = Condition("c")


def test_default_schedule():
    s = make_schedule()
    assert s.T == 1000 and s.alpha_bar[0] == 1.0
    assert s.alpha_bar[1000] == pytest.approx(ALPHA_BAR_1000, rel=1e-12)
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("T,spec", [(0, (1e-4, 0.02)), (3, [0.1, 0.2]), (2, [0.1, 1.0]),
                                    (2, [0.0, 0.1]), (3, ("linear", 0.02, 1e-4))])
def test_bad_schedules(T, spec):
    with pytest.raises(ScheduleError):
        make_schedule(T, spec)


def test_schedule_is_read_only():
    with pytest.raises(ValueError):
        S2.alpha_bar[1] = 0.5


def test_closed_forms():
    assert float(forward_marginal(1.0, 2, 0.5, S2)) == pytest.approx(MARGINAL, rel=1e-14)
    assert float(predict_x0(1.0, 0.5, 2, S2)) == pytest.approx(X0_HAT, rel=1e-14)
    x0 = np.array([0.3, -1.2])
    eps = np.array([0.7, 0.1])
    assert np.allclose(predict_x0(forward_marginal(x0, 2, eps, S2), eps, 2, S2), x0)
    with pytest.raises(ShapeError):
        forward_marginal(np.zeros(2), 1, np.zeros(3), S2)
    with pytest.raises(ScheduleError):
        forward_marginal(1.0, 3, 0.5, S2)


def test_ddpm_sigma_is_posterior_variance():
    assert ddpm_sigma(S2, 2) ** 2 == pytest.approx(SIGMA2_T2, rel=1e-14)
    s = make_schedule(100)
    for t in (1, 2, 50, 100):
        assert ddpm_sigma(s, t) ** 2 == pytest.approx(posterior_variance(s, t), rel=1e-10)


def test_single_steps():
    d = ConstantDenoiser(0.5)
    assert float(ddim_step(1.0, 2, C, d, S2)) == pytest.approx(DDIM_X1, rel=1e-14)
    assert float(ddim_step(1.0, 2, C, d, S2, DDPM, noise=0.25)) == pytest.approx(DDPM_X1, rel=1e-14)


def test_policies():
    assert DDIM.sigma(S2, 2) == 0.0 and DDPM.sigma(S2, 2) == ddpm_sigma(S2, 2)
    assert SigmaPolicy.scaled(0.5).sigma(S2, 2) == pytest.approx(0.5 * ddpm_sigma(S2, 2))
    with pytest.raises(PolicyError):
        SigmaPolicy(1.5)
    with pytest.raises(PolicyError):
        ddim_step(1.0, 2, C, ConstantDenoiser(0.5), S2, DDPM)  # no noise source
    with pytest.raises(PolicyError):
        ddim_update(1.0, 0.5, 2, 1, S2, sigma=0.5, noise=0.0)  # sigma^2 > 1 - alpha_bar


def test_step_bounds():
    with pytest.raises(ScheduleError):
        ddim_step(1.0, 0, C, ConstantDenoiser(), S2)
    with pytest.raises(ScheduleError):
        ddim_step(1.0, 1, C, ConstantDenoiser(), S2, t_prev=1)


def test_cfg():
    assert np.allclose(cfg_combine([1.0, 2.0], [0.0, 1.0], 3.0), [3.0, 4.0])
    assert np.allclose(cfg_combine([1.0], [0.0], 0.0), [0.0])
    base = GaussianDenoiser(S2, 0.25, {C: np.ones(2)}, default_mean=np.zeros(2))
    x = np.array([0.4, -0.2])
    g = GuidedDenoiser(base, 2.0)
    assert np.allclose(g.eps_predict(x, 2, C),
                       cfg_combine(base.eps_predict(x, 2, C), base.eps_predict(x, 2, Condition.null()), 2.0))
    assert np.array_equal(GuidedDenoiser(base).eps_predict(x, 2, C), base.eps_predict(x, 2, C))


def test_gaussian_eps_matches_posterior_mean():
    s = make_schedule(20)
    d = analytic_gaussian_denoiser(np.array([1.0, -2.0]), 0.3, s)
    x = np.array([0.5, 0.1])
    for t in (1, 7, 20):
        expected = (x - np.sqrt(s.alpha_bar[t]) * d.posterior_mean(x, t, C)) / np.sqrt(1 - s.alpha_bar[t])
        assert np.allclose(d.eps_predict(x, t, C), expected)
    assert np.allclose(d.eps_predict(x, 0, C), 0.0)  # finite at alpha_bar = 1


def test_unknown_condition():
    with pytest.raises(KeyError):
        GaussianDenoiser(S2, 1.0, {C: 0.0}).eps_predict(np.zeros(1), 1, Condition("other"))


def test_inversion_at_zero_is_identity():
    s = make_schedule(10)
    x = np.array([0.3, -0.7])
    st, _ = ddim_invert(x, C, 0, analytic_gaussian_denoiser(0.0, 0.25, s), s)
    assert np.array_equal(st.x, x)
    assert np.array_equal(redenoise(st, C, analytic_gaussian_denoiser(5.0, 0.25, s), s), x)


def test_constant_denoiser_round_trip_is_exact():
    s = make_schedule(100)
    x = np.random.default_rng(1).normal(size=16)
    d = ConstantDenoiser(0.3)
    for t_star in (1, 40, 100):
        st, _ = ddim_invert(x, C, t_star, d, s)
        assert relative_error(redenoise(st, C, d, s), x) < 1e-10


def test_analytic_round_trip_regression():
    # frozen from the current implementation; a drift here means the step math changed
    s = make_schedule(50)
    d = analytic_gaussian_denoiser(np.zeros(8), 0.25, s)
    x = np.random.default_rng(0).normal(0, 0.5, 8)
    st, _ = ddim_invert(x, C, 50, d, s)
    assert relative_error(redenoise(st, C, d, s), x) == pytest.approx(0.02202439533644337, rel=1e-6)


def test_schedule_and_grid_mismatch():
    s = make_schedule(100)
    d = ConstantDenoiser(0.1)
    st, _ = ddim_invert(np.zeros(3), C, 40, d, s, timesteps=make_timesteps(s, 10))
    with pytest.raises(ScheduleError):
        redenoise(st, C, d, make_schedule(100, ("linear", 1e-4, 0.03)))
    with pytest.raises(ScheduleError):
        redenoise(st, C, d, s, timesteps=make_timesteps(s, 20))
    with pytest.raises(ScheduleError):
        ddim_invert(np.zeros(3), C, 45, d, s, timesteps=make_timesteps(s, 10))


def test_conditional_redenoise_moves_towards_new_mean():
    s = make_schedule(200)
    mu, mu_new = np.zeros(4), np.full(4, 3.0)
    d = GaussianDenoiser(s, 0.25, {Condition("a"): mu, Condition("b"): mu_new})
    x = np.random.default_rng(2).normal(0, 0.5, 4)
    dist = []
    for t_star in (0, 50, 100, 200):
        st, _ = ddim_invert(x, Condition("a"), t_star, d, s)
        out = redenoise(st, Condition("b"), d, s)
        dist.append(np.linalg.norm(out - mu_new))
    assert all(a > b for a, b in zip(dist, dist[1:]))


def test_ddpm_sampling_matches_data_distribution():
    s = make_schedule()  # alpha_bar[T] ~ 4e-5, so x_T ~ N(0, I) is the right prior
    d = analytic_gaussian_denoiser(np.array([1.0, -1.0]), 0.25, s)
    xs = sample(d, C, s, (4000, 2), np.random.default_rng(3))
    assert np.allclose(xs.mean(axis=0), [1.0, -1.0], atol=0.05)
    assert np.allclose(xs.var(axis=0), 0.25, atol=0.03)


def test_seeded_sampling_is_deterministic():
    s = make_schedule(20)
    d = analytic_gaussian_denoiser(0.0, 1.0, s)
    a = sample(d, C, s, (3,), np.random.default_rng(9))
    assert np.array_equal(a, sample(d, C, s, (3,), np.random.default_rng(9)))


def test_trajectory_jsonl(tmp_path):
    s = make_schedule(10)
    d = ConstantDenoiser(0.2)
    st, inv = ddim_invert(np.ones(2), C, 10, d, s, keep_trajectory=True)
    _, den = redenoise(st, C, d, s, keep_trajectory=True)
    assert [r.t for r in inv] == list(range(11)) and [r.t for r in den] == list(range(10, -1, -1))
    write_trajectory(inv, tmp_path / "t.jsonl")
    lines = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert lines[0]["eps"] is None and lines[-1]["t"] == 10 and len(lines[1]["x"]) == 64
