import math

import numpy as np
import pytest

from mvlab.engine import (
    BrownianGrid,
    InitialLaw,
    ParticlePaths,
    RunRequest,
    coarsen,
    generate_brownian_grid,
    picard_mean_field,
    read_paths_bin,
    simulate_coupled,
    simulate_interacting_em,
    simulate_reference,
    strong_error_sup,
    sup_moment,
    time_increment_moments,
)
from mvlab.model import ModelSpec, RegularityProfile, make_builtin_model


def zero_model(s=0.0, d=1):
    prof = RegularityProfile(dimension=d, one_dim_class=d == 1, K2=0.0)
    if d == 1:
        sigma = lambda x: np.full_like(x, s)  # noqa: E731
    else:
        sigma = lambda x: np.broadcast_to(s * np.eye(d), (len(x), d, d))  # noqa: E731
    return ModelSpec("zero", prof, sigma=sigma)


LINEAR = {"a": -1.0, "c": 0.5, "s": 1.0}


# ---- Brownian grids -------------------------------------------------------


def test_grid_deterministic_and_prefix_stable():
    g = generate_brownian_grid(2, 8, 1.0, 256, seed=11)
    a, b = g.increments(), generate_brownian_grid(2, 8, 1.0, 256, seed=11).increments()
    assert np.array_equal(a, b)
    big = generate_brownian_grid(2, 32, 1.0, 256, seed=11).increments()
    assert np.array_equal(big[:8], a)
    other = generate_brownian_grid(2, 8, 1.0, 256, seed=12).increments()
    assert not np.array_equal(a, other)


def test_grid_requires_power_of_two():
    with pytest.raises(ValueError):
        generate_brownian_grid(1, 4, 1.0, 100, seed=0)
    with pytest.raises(ValueError):
        generate_brownian_grid(1, 0, 1.0, 64, seed=0)


def test_grid_mean_within_clt_bound():
    T, M = 1.0, 1024
    g = generate_brownian_grid(1, 1000, T, M, seed=5)
    inc = g.increments()
    assert inc.size >= 10**6
    sd = math.sqrt(T / M)
    # 5 standard errors of a mean over 10^6 draws
    assert abs(inc.mean()) <= 5 * sd * 1e-3
    assert inc.var() == pytest.approx(T / M, rel=0.01)


def test_coarsen_identity_and_total():
    g = generate_brownian_grid(1, 5, 2.0, 256, seed=3)
    fine = g.increments()
    assert np.array_equal(coarsen(g, 1).as_array(), fine)
    total = coarsen(g, 256).as_array()
    assert total.shape == (5, 1, 1)
    np.testing.assert_allclose(total[:, 0], fine.sum(axis=1), rtol=0, atol=1e-13)
    mid = coarsen(g, 128).as_array()
    assert mid.shape == (5, 2, 1)
    with pytest.raises(ValueError):
        coarsen(g, 3)


def test_coarsen_across_blocks_matches_left_fold():
    g = generate_brownian_grid(1, 3, 1.0, 512, seed=9)
    fine = g.increments()
    c = coarsen(g, 128).as_array()
    for j in range(4):
        acc = np.zeros((3, 1))
        for i in range(128):
            acc = acc + fine[:, 128 * j + i]
        assert np.array_equal(c[:, j], acc)


def test_initial_law_prefix_stable():
    law = InitialLaw("gaussian", mean=1.0, std=2.0)
    assert np.array_equal(law.sample(10, 2, 4)[:3], law.sample(3, 2, 4))
    assert np.all(InitialLaw("point", loc=2.5).sample(4, 1, 0) == 2.5)
    with pytest.raises(ValueError):
        InitialLaw("uniform", low=1, high=0)


# ---- EM scheme ------------------------------------------------------------


def test_zero_coefficients_keep_paths_constant():
    g = generate_brownian_grid(1, 6, 1.0, 64, seed=1)
    x0 = np.linspace(-1, 1, 6)[:, None]
    p = simulate_interacting_em(zero_model(0.0), g, 1, x0)
    assert np.all(p.states == x0[:, None, :])


def test_pure_noise_integrates_increments():
    g = generate_brownian_grid(1, 4, 1.0, 128, seed=2)
    x0 = np.arange(4.0)[:, None]
    p = simulate_interacting_em(zero_model(1.0), g, 1, x0)
    expected = x0[:, None, :] + np.concatenate([np.zeros((4, 1, 1)), np.cumsum(g.increments(), axis=1)], axis=1)
    np.testing.assert_allclose(p.states, expected, rtol=0, atol=1e-12)


def test_deterministic_linear_is_explicit_euler():
    model = make_builtin_model("linear_mf", {"a": -1, "c": 0.5, "s": 0})
    M = 1024
    g = generate_brownian_grid(1, 5, 1.0, M, seed=0)
    p = simulate_interacting_em(model, g, 1, np.ones((5, 1)))
    euler = (1 - 0.5 / M) ** np.arange(M + 1)
    np.testing.assert_allclose(p.states[:, :, 0], np.broadcast_to(euler, (5, M + 1)), rtol=1e-12)
    assert p.states[0, -1, 0] == pytest.approx(math.exp(-0.5), abs=2e-4)


def test_particles_are_exchangeable():
    model = make_builtin_model("linear_mf", LINEAR)
    g = generate_brownian_grid(1, 16, 1.0, 128, seed=4)
    x0 = InitialLaw("gaussian").sample(16, 1, 4)
    perm = np.random.default_rng(0).permutation(16)
    base = simulate_interacting_em(model, g, 2, x0)
    # permuting initial values and noise together permutes the paths
    class Permuted(BrownianGrid):
        def block(self, k, n=None):
            return super().block(k, n)[perm]

    pg = Permuted(g.dim, g.n_particles, g.horizon, g.n_steps, g.seed, g.stream)
    moved = simulate_interacting_em(model, pg, 2, x0[perm])
    np.testing.assert_allclose(moved.states, base.states[perm], rtol=1e-12, atol=1e-12)


def test_reference_with_no_extra_equals_em():
    model = make_builtin_model("linear_mf", LINEAR)
    g = generate_brownian_grid(1, 32, 1.0, 256, seed=6)
    x0 = InitialLaw("gaussian").sample(32, 1, 6)
    ref = simulate_reference(model, g, 0, 4, 0, x0)
    em = simulate_interacting_em(model, g, 4, x0)
    assert np.array_equal(ref.states, em.states)


def test_coupled_runs_equal_separate_runs():
    model = make_builtin_model("holder_diffusion_1d", {"alpha": 0.75})
    g = generate_brownian_grid(1, 16, 1.0, 512, seed=8)
    x0 = InitialLaw("gaussian").sample(16, 1, 8)
    runs = [RunRequest(f, x0) for f in (1, 4, 16, 128)]
    together = simulate_coupled(model, g, runs)
    for r, p in zip(runs, together):
        alone = simulate_interacting_em(model, g, r.factor, x0)
        assert np.array_equal(alone.states, p.states)


def test_reference_extra_particles_change_the_run():
    model = make_builtin_model("linear_mf", LINEAR)
    g = generate_brownian_grid(1, 8, 1.0, 128, seed=1)
    x0 = InitialLaw("gaussian").sample(8, 1, 1)
    xe = InitialLaw("gaussian").sample(24, 1, 2)
    a = simulate_reference(model, g, 24, 1, 99, x0, xe)
    b = simulate_reference(model, g, 24, 1, 99, x0, xe)
    assert a.n == 8 and np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, simulate_reference(model, g, 0, 1, 0, x0).states)
    with pytest.raises(ValueError):
        simulate_reference(model, g, 24, 1, 99, x0)


def test_chaos_error_shrinks_with_more_extra_particles():
    # the interacting N-system drifts away from a bigger reference less when
    # N grows; averaged over seeds the sup error decreases with N
    model = make_builtin_model("linear_mf", LINEAR)
    errs = []
    for N in (16, 256):
        vals = []
        for rep in range(6):
            g = generate_brownian_grid(1, N, 1.0, 128, seed=100 + rep)
            x0 = InitialLaw("gaussian").sample(N, 1, 100 + rep)
            xe = InitialLaw("gaussian").sample(3 * 256, 1, 200 + rep)
            ref = simulate_reference(model, g, 3 * 256, 4, 300 + rep, x0, xe)
            em = simulate_interacting_em(model, g, 4, x0)
            vals.append(strong_error_sup(ref, em, 2))
        errs.append(np.mean(vals))
    assert errs[1] < errs[0]


def test_step_warning():
    model = make_builtin_model("linear_mf", LINEAR)
    g = generate_brownian_grid(1, 2, 1.0, 2, seed=0)
    with pytest.warns(RuntimeWarning):
        simulate_interacting_em(model, g, 1, np.zeros((2, 1)))


def test_divergence_is_flagged_not_raised():
    prof = RegularityProfile(K1=1.0)
    blow = ModelSpec("blow", prof, b2=lambda x, m: 1e200 * x**2, sigma=lambda x: np.zeros_like(x))
    g = generate_brownian_grid(1, 2, 1.0, 64, seed=0)
    p = simulate_interacting_em(blow, g, 1, np.ones((2, 1)))
    assert p.diverged and p.divergence_step >= 1
    back = read_paths_bin(p.to_bytes())
    assert back.diverged


def test_multid_shapes_and_moments():
    model = make_builtin_model("bounded_holder_multid", {"d": 3})
    g = generate_brownian_grid(3, 64, 1.0, 256, seed=0)
    x0 = InitialLaw("gaussian").sample(64, 3, 0)
    p = simulate_interacting_em(model, g, 2, x0, record_every=4)
    assert p.states.shape == (64, 128 // 4 + 1, 3)
    assert np.all(np.isfinite(p.states))
    # bounded drift, diffusion of norm <= 1.3: second moment stays moderate
    assert sup_moment(p, 2) < 3 * (3 + 2 * 3 + 3 * 1.3**2 * 3)


def test_time_increment_scaling():
    model = zero_model(1.0)
    for factor in (1, 4):
        g = generate_brownian_grid(1, 2000, 1.0, 256, seed=3)
        p = simulate_interacting_em(model, g, factor, np.zeros((2000, 1)))
        delta = factor / 256
        assert time_increment_moments(p, 2) == pytest.approx(delta, rel=0.03)


def test_time_increment_multid():
    g = generate_brownian_grid(3, 500, 1.0, 128, seed=4)
    p = simulate_interacting_em(zero_model(1.0, d=3), g, 1, np.zeros((500, 3)))
    assert time_increment_moments(p, 2) == pytest.approx(3 / 128, rel=0.03)


def test_coupled_noise_reduces_error_variance():
    # matched noise makes the EM error small; independent noise makes it O(1)
    model = make_builtin_model("holder_diffusion_1d", {"alpha": 1.0})
    x0 = InitialLaw("gaussian").sample(128, 1, 1)
    g = generate_brownian_grid(1, 128, 1.0, 512, seed=1)
    fine = simulate_interacting_em(model, g, 1, x0)
    coarse = simulate_interacting_em(model, g, 8, x0)
    other = simulate_interacting_em(model, generate_brownian_grid(1, 128, 1.0, 512, seed=2), 8, x0)
    assert strong_error_sup(fine, coarse) < 0.05 * strong_error_sup(fine, other)


# ---- error functionals ----------------------------------------------------


def _paths(states, delta=0.5):
    states = np.asarray(states, float)
    return ParticlePaths(delta * np.arange(states.shape[1]), states, delta)


def test_strong_error_examples():
    a = _paths(np.random.default_rng(0).normal(size=(3, 3, 2)))
    assert strong_error_sup(a, a) == 0.0
    v = np.array([0.3, -0.4])
    b = _paths(a.states + v)
    assert strong_error_sup(a, b, q=3) == pytest.approx(0.5**3)
    # two particles, two steps, by hand
    x = _paths([[[0.0], [1.0], [2.0]], [[0.0], [0.5], [0.0]]])
    y = _paths([[[0.0], [1.5], [1.0]], [[0.0], [0.0], [0.0]]])
    # particle 0: max(|0|,|0.5|,|1|)=1 ; particle 1: max(0,0.5,0)=0.5
    assert strong_error_sup(x, y, q=2) == pytest.approx((1.0 + 0.25) / 2)


def test_strong_error_on_coarser_grid():
    fine = _paths(np.arange(5.0)[None, :, None], delta=0.25)
    coarse = _paths(np.array([[[0.0], [2.0], [5.0]]]), delta=0.5)
    assert strong_error_sup(fine, coarse, q=1) == 1.0
    with pytest.raises(ValueError):
        strong_error_sup(coarse, fine)


def test_increment_moment_of_constant_paths():
    assert time_increment_moments(_paths(np.ones((4, 5, 2)))) == 0.0


def test_paths_binary_and_csv_roundtrip():
    model = make_builtin_model("linear_mf", LINEAR)
    g = generate_brownian_grid(1, 5, 1.0, 64, seed=7)
    p = simulate_interacting_em(model, g, 4, InitialLaw("gaussian").sample(5, 1, 7))
    q = read_paths_bin(p.to_bytes())
    assert np.array_equal(p.states, q.states) and np.array_equal(p.times, q.times)
    assert (q.delta, q.model_name, q.seed, q.diverged) == (p.delta, p.model_name, p.seed, False)
    lines = p.to_csv().splitlines()
    assert lines[0] == "t,particle,x0"
    assert len(lines) == 1 + 5 * 17
    t, i, x = lines[-1].split(",")
    assert float(t) == 1.0 and int(i) == 4 and float(x) == p.states[4, -1, 0]


# ---- distribution iteration -----------------------------------------------


def test_picard_without_measure_dependence_is_fixed_after_one_step():
    model = make_builtin_model("holder_drift_1d", {"K1": 0.0})
    g = generate_brownian_grid(1, 64, 1.0, 64, seed=0)
    x0 = InitialLaw("gaussian").sample(64, 1, 0)
    flows, d = picard_mean_field(model, 64, g, 1, 3, x0)
    assert len(flows) == 4 and len(d) == 3
    assert d[0] > 0 and d[1] == 0.0 and d[2] == 0.0


def test_picard_contracts_and_k_max_one():
    model = make_builtin_model("linear_mf", LINEAR)
    g = generate_brownian_grid(1, 256, 1.0, 128, seed=1)
    x0 = InitialLaw("gaussian").sample(256, 1, 1)
    _, d = picard_mean_field(model, 256, g, 2, 6, x0)
    assert all(d[k + 1] < d[k] for k in range(1, 5))
    _, d1 = picard_mean_field(model, 256, g, 2, 1, x0)
    assert len(d1) == 1 and d1[0] == d[0]
    with pytest.raises(ValueError):
        picard_mean_field(model, 256, g, 2, 0, x0)


def test_picard_multid_runs():
    model = make_builtin_model("bounded_holder_multid", {"d": 2})
    g = generate_brownian_grid(2, 32, 1.0, 64, seed=2)
    x0 = InitialLaw("gaussian").sample(32, 2, 2)
    _, d = picard_mean_field(model, 32, g, 1, 4, x0)
    assert d[-1] < d[1]
