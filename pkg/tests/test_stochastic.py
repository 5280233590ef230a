import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbe_lab.errors import EnsembleError, MeanModeDiverges, UnstableNoiseProfile
from mbe_lab.nonlinearity import ModelParams
from mbe_lab.semigroup import apply_semigroup
from mbe_lab.solver import SolverConfig, solve_deterministic
from mbe_lab.spectral import Field, make_grid, random_field
from mbe_lab.stochastic import (
    EnsembleJob,
    Functional,
    NoiseSpec,
    StochState,
    derive_seed,
    expected_z_l2_squared,
    hs_norm_of_phi,
    mc_ensemble,
    mode_variance,
    orthonormal_coefficients,
    sample_z_step,
    solve_stochastic,
    splitmix64,
)

TWO_PI = 2 * np.pi
BAND2 = NoiseSpec.flat_bandlimited(2.0)


def draw_modes(spec, grid, dt, steps, count, seed, z0=None):
    """Orthonormal coefficients of ``count`` independent ``z`` after ``steps`` steps."""
    rng = np.random.default_rng(seed)
    start = Field.zeros(grid) if z0 is None else z0
    out = []
    for _ in range(count):
        state = StochState(start, Field.zeros(grid), 0.0, rng)
        for _ in range(steps):
            state = sample_z_step(state, spec, dt)
        out.append(orthonormal_coefficients(state.z))
    return np.array(out)


class TestNoiseSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            NoiseSpec("pink", 1.0)
        with pytest.raises(ValueError):
            NoiseSpec.gaussian(0.0)
        with pytest.raises(ValueError):
            NoiseSpec.sobolev(2.0, amplitude=-1.0)

    def test_seed_is_64_bit(self):
        assert NoiseSpec.gaussian(1.0, seed=-1).seed == 2**64 - 1

    def test_profiles(self):
        k = np.array([0.0, 1.0, 2.0, 3.0])
        assert np.allclose(NoiseSpec.gaussian(1.0).profile_values(k), [0, np.exp(-0.5), np.exp(-2), np.exp(-4.5)])
        assert np.allclose(NoiseSpec.sobolev(2.0).profile_values(k), [0, 0.5, 0.2, 0.1])
        assert np.allclose(NoiseSpec.flat_bandlimited(2.0).profile_values(k), [0, 1, 1, 0])
        assert NoiseSpec.flat_bandlimited(2.0, mean_mode=True).profile_values(k)[0] == 1

    @pytest.mark.parametrize("spec", [NoiseSpec.flat_bandlimited(100.0), NoiseSpec.sobolev(0.5)])
    def test_unstable_profiles(self, spec):
        with pytest.raises(UnstableNoiseProfile):
            spec.check_grid(make_grid(1, 32, TWO_PI))

    def test_stable_profiles(self):
        g = make_grid(2, 32, TWO_PI)
        for spec in (BAND2, NoiseSpec.gaussian(0.5), NoiseSpec.sobolev(3.0)):
            spec.check_grid(g)


class TestHsNorm:
    def test_zero_amplitude(self, grid1):
        assert hs_norm_of_phi(NoiseSpec.gaussian(1.0, amplitude=0.0), grid1, 2.0) == 0

    def test_counting(self, grid2):
        # k_cut = 2 on the 2pi torus keeps the 12 nonzero lattice points with |m| <= 2
        assert hs_norm_of_phi(NoiseSpec.flat_bandlimited(2.0, amplitude=3.0), grid2, 0) == pytest.approx(3 * np.sqrt(12))

    def test_gaussian_direct_sum(self):
        g = make_grid(1, 64, TWO_PI)
        total = sum(np.exp(-(m**2)) for m in range(-31, 33) if m != 0)
        assert hs_norm_of_phi(NoiseSpec.gaussian(1.0), g, 0) == pytest.approx(np.sqrt(total), rel=1e-14)

    def test_sobolev_weight(self, grid1):
        # modes +-1, +-2 with weights (1+k^2)^s
        assert hs_norm_of_phi(BAND2, grid1, 1.0) == pytest.approx(np.sqrt(2 * 2 + 2 * 5))


class TestSampling:
    def test_zero_amplitude_is_semigroup(self, grid1, rng):
        z0 = random_field(grid1, rng)
        state = StochState(z0, Field.zeros(grid1), 0.0, rng)
        out = sample_z_step(state, NoiseSpec.gaussian(1.0, amplitude=0.0), 0.01)
        assert np.array_equal(out.z.spectral, apply_semigroup(z0, 0.01).spectral)
        assert out.t == 0.01

    def test_zero_mode_variance_is_brownian(self, grid1):
        spec = NoiseSpec.flat_bandlimited(2.0, amplitude=2.0, mean_mode=True)
        assert mode_variance(spec, grid1, 0.3)[0] == pytest.approx(4 * 0.3)
        assert mode_variance(spec, grid1, 1e-9)[1] == pytest.approx(4e-9, rel=1e-8)

    def test_seed_determinism(self, grid2):
        a = draw_modes(BAND2, grid2, 0.01, 5, 3, seed=9)
        b = draw_modes(BAND2, grid2, 0.01, 5, 3, seed=9)
        assert np.array_equal(a, b)

    def test_fields_are_real_and_mean_free(self, grid2):
        state = StochState.initial(Field.zeros(grid2), 1)
        for _ in range(3):
            state = sample_z_step(state, NoiseSpec.gaussian(0.3), 0.01)
        back = Field(grid2, spectral=np.fft.rfftn(state.z.real) / grid2.size)
        assert np.allclose(back.spectral, state.z.spectral, atol=1e-15)
        assert abs(state.z.mean()) < 1e-15

    def test_per_mode_variance(self, grid1):
        t = 0.05
        d = draw_modes(BAND2, grid1, t, 1, 4000, seed=3)
        emp = np.mean(np.abs(d) ** 2, axis=0)
        se = np.std(np.abs(d) ** 2, axis=0, ddof=1) / np.sqrt(d.shape[0])
        exact = mode_variance(BAND2, grid1, t)
        active = exact > 0
        assert np.all(np.abs(emp - exact)[active] <= 5 * se[active])
        assert np.all(emp[~active] == 0)

    def test_two_half_steps_equal_one_step(self, grid1):
        z0 = Field.from_function(grid1, lambda x: np.sin(x) + 0.5 * np.cos(2 * x))
        spec = NoiseSpec.flat_bandlimited(2.0)
        two = draw_modes(spec, grid1, 0.02, 2, 10_000, seed=5, z0=z0)
        one = draw_modes(spec, grid1, 0.04, 1, 10_000, seed=6, z0=z0)
        n = two.shape[0]
        for comp in (np.real, np.imag):
            a, b = comp(two)[:, 1:3], comp(one)[:, 1:3]
            se_mean = np.sqrt((a.var(0, ddof=1) + b.var(0, ddof=1)) / n)
            assert np.all(np.abs(a.mean(0) - b.mean(0)) <= 5 * se_mean)
            va, vb = a.var(0, ddof=1), b.var(0, ddof=1)
            se_var = np.sqrt((va**2 + vb**2) * 2 / (n - 1))
            assert np.all(np.abs(va - vb) <= 5 * se_var)
        expected_mean = orthonormal_coefficients(apply_semigroup(z0, 0.04))[1:3]
        se = np.sqrt(mode_variance(spec, grid1, 0.04)[1:3] / n)
        assert np.all(np.abs(one.mean(0)[1:3] - expected_mean) <= 5 * se)

    def test_rejects_dt(self, grid1):
        with pytest.raises(ValueError):
            sample_z_step(StochState.initial(Field.zeros(grid1), 0), BAND2, 0.0)


class TestExpectedZ:
    def test_zero_time(self, grid1):
        assert expected_z_l2_squared(BAND2, grid1, 0.0) == 0

    def test_stationary_limit(self, grid1):
        # modes +-1, +-2: sum 1/(2k^4)
        assert expected_z_l2_squared(BAND2, grid1, np.inf) == pytest.approx(1.0 + 1 / 16)
        assert expected_z_l2_squared(BAND2, grid1, 200.0) == pytest.approx(1.0 + 1 / 16)

    def test_mean_mode_diverges(self, grid1):
        with pytest.raises(MeanModeDiverges):
            expected_z_l2_squared(NoiseSpec.flat_bandlimited(2.0, mean_mode=True), grid1, np.inf)

    @pytest.mark.parametrize("t", [1e-6, 1e-5, 1e-4])
    def test_small_time_slope(self, grid2, t):
        spec = NoiseSpec.gaussian(0.4)
        hs2 = hs_norm_of_phi(spec, grid2, 0) ** 2
        assert expected_z_l2_squared(spec, grid2, t) / t == pytest.approx(hs2, rel=0.01)


class TestSolveStochastic:
    def test_zero_amplitude_matches_deterministic(self, grid1):
        u0 = Field.from_function(grid1, np.sin)
        p = ModelParams(1, 0.5, 1, 0.2)
        cfg = SolverConfig(1e-3, 0.05)
        a = solve_stochastic(u0, p, NoiseSpec.gaussian(0.5, amplitude=0.0), cfg, ("C", "x0", "hs2"))
        b = solve_deterministic(u0, p, cfg, ("C", "x0", "hs2"))
        for name in b.probes:
            assert np.allclose(a[name], b[name], rtol=1e-12, atol=0)
        assert a.metadata["noise"]["amplitude"] == 0.0

    def test_same_seed_same_record(self, grid1):
        u0 = Field.from_function(grid1, np.sin)
        spec = NoiseSpec.flat_bandlimited(3.0, seed=11)
        cfg = SolverConfig(1e-3, 0.05)
        a = solve_stochastic(u0, ModelParams(1, 0, 1, 0), spec, cfg)
        b = solve_stochastic(u0, ModelParams(1, 0, 1, 0), spec, cfg)
        for name in a.probes:
            assert np.array_equal(a[name], b[name])
        c = solve_stochastic(u0, ModelParams(1, 0, 1, 0), NoiseSpec.flat_bandlimited(3.0, seed=12), cfg)
        assert not np.array_equal(a["z.l2"], c["z.l2"])

    def test_u_is_v_plus_z(self, grid2):
        u0 = Field.from_function(grid2, lambda x, y: np.sin(x) * np.cos(y))
        rec = solve_stochastic(u0, ModelParams(1, 0, 1, 0), NoiseSpec.gaussian(0.5, seed=2),
                               SolverConfig(1e-3, 0.01), ("C", "v.l2", "z.l2"))
        f = rec.fields
        assert np.allclose(f["u"].real, f["v"].real + f["z"].real, atol=1e-14)
        assert rec["z.l2"][0] == 0 and rec["z.l2"][-1] > 0

    def test_blowup_on_v(self, grid1):
        rec = solve_stochastic(Field.from_function(grid1, np.sin), ModelParams(alpha3=1, alpha4=5),
                               BAND2, SolverConfig(1e-3, 1.0, blowup_threshold=3.5))
        assert rec.status_text.startswith("blowup")


class TestSeeds:
    def test_splitmix_reference_value(self):
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    @given(st.integers(0, 2**64 - 1), st.integers(0, 10**6))
    def test_derive_seed_is_involutive_in_base(self, base, i):
        s = derive_seed(base, i)
        assert 0 <= s < 2**64
        assert derive_seed(s, i) == base


class TestEnsemble:
    def setup_method(self):
        self.grid = make_grid(1, 16, TWO_PI)
        self.job = EnsembleJob(Field.zeros(self.grid), ModelParams(), NoiseSpec.flat_bandlimited(2.0, seed=4),
                               SolverConfig(1e-3, 0.02, record_every=5), ("C", "z.l2", "z.grad_l4"),
                               (Functional("z.grad_l4", "integral", 4), Functional("C", "final", 2)))

    def test_equal_seeds_have_zero_variance(self):
        stats = mc_ensemble(self.job, 2, seeds=[7, 7])
        assert np.all(stats.var("C") == 0)
        assert stats.functional("sup(C)")[1] == 0

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            mc_ensemble(self.job, 1)

    def test_worker_count_does_not_matter(self):
        a = mc_ensemble(self.job, 6, n_workers=1)
        b = mc_ensemble(self.job, 6, n_workers=3)
        assert a.seeds == b.seeds == [derive_seed(4, i) for i in range(6)]
        for p in self.job.probes:
            assert np.array_equal(a.samples[p], b.samples[p])

    def test_functionals(self):
        stats = mc_ensemble(self.job, 4, keep_records=True)
        rec = stats.records[2]
        assert stats.functional_samples["final(C^2)"][2] == pytest.approx(rec["C"][-1] ** 2)
        assert stats.functional_samples["sup(z.l2)"][2] == pytest.approx(rec["z.l2"].max())
        y = rec["z.grad_l4"] ** 4
        integral = float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(rec.times)))
        assert stats.functional_samples["integral(z.grad_l4^4)"][2] == pytest.approx(integral)
        assert stats.mean_record().probes["C"] == pytest.approx(stats.mean("C"))

    def test_failures_carry_indices(self):
        job = EnsembleJob(Field.from_function(self.grid, np.sin), ModelParams(alpha3=1, alpha4=5),
                          NoiseSpec.flat_bandlimited(2.0, seed=4), SolverConfig(1e-3, 1.0, blowup_threshold=3.5),
                          ("C",))
        with pytest.raises(EnsembleError) as info:
            mc_ensemble(job, 3)
        failures = info.value.failures
        assert [i for i, _, _ in failures] == [0, 1, 2]
        assert failures[1][1] == derive_seed(4, 1)
        assert failures[0][2].startswith("blowup")

    def test_estimator_variance_shrinks_like_one_over_n(self):
        job = EnsembleJob(Field.zeros(self.grid), ModelParams(), NoiseSpec.flat_bandlimited(2.0, seed=8),
                          SolverConfig(1e-2, 0.05), ("C",), (Functional("C", "final", 2),))
        small = mc_ensemble(job, 100).functional("final(C^2)")[1]
        large = mc_ensemble(job, 400, seeds=[derive_seed(99, i) for i in range(400)]).functional("final(C^2)")[1]
        assert (small / large) ** 2 == pytest.approx(4.0, rel=0.4)

    def test_functional_kind(self):
        with pytest.raises(ValueError):
            Functional("C", "median")
