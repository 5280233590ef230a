import math
from decimal import Decimal, localcontext

import numpy as np
import pytest

from mbe_lab.errors import BlowUpDetected
from mbe_lab.nonlinearity import ModelParams
from mbe_lab.semigroup import apply_semigroup
from mbe_lab.solver import (
    C_CAL,
    Scheme,
    SolverConfig,
    calibrate_picard_constant,
    contracts,
    etd_step,
    phi1,
    phi2,
    picard_iterate,
    predicted_horizon,
    solve_deterministic,
)
from mbe_lab.spectral import Field, make_grid, random_field, x0_norm

TWO_PI = 2 * np.pi


def series_phi(z, order):
    """phi_1 / phi_2 in 50-digit decimal arithmetic."""
    with localcontext() as ctx:
        ctx.prec = 50
        zd = Decimal(z)
        if zd == 0:
            return 1.0 / math.factorial(order)
        e = zd.exp()
        value = (e - 1) / zd if order == 1 else (e - 1 - zd) / (zd * zd)
        return float(value)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(dt=0, t_end=1), dict(dt=2, t_end=1), dict(dt=0.1, t_end=1, blowup_threshold=0),
        dict(dt=0.1, t_end=1, record_every=0), dict(dt=0.1, t_end=1, scheme="RK4"),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)

    def test_step_times_end_exactly(self):
        cfg = SolverConfig(dt=0.3, t_end=1.0)
        t = cfg.step_times()
        assert cfg.n_steps == 4
        assert t[-1] == 1.0 and t[-2] == pytest.approx(0.9)

    def test_as_dict_is_plain(self):
        d = SolverConfig(dt=0.1, t_end=1, snapshot_times=(0.5,)).as_dict()
        assert d["scheme"] == "ETDRK2" and d["snapshot_times"] == [0.5]


class TestPhi:
    @pytest.mark.parametrize("z", [0.0, -1e-8, -9.99e-4, -1.001e-3, -0.3, -5.0, -40.0])
    def test_against_series(self, z):
        assert phi1(np.array([z]))[0] == pytest.approx(series_phi(z, 1), rel=1e-13)
        assert phi2(np.array([z]))[0] == pytest.approx(series_phi(z, 2), rel=1e-13)

    def test_large_argument(self):
        z = np.array([-1e6])
        assert phi1(z)[0] == pytest.approx(1e-6)
        assert phi2(z)[0] == pytest.approx(1e-6, rel=1e-5)


class TestEtdStep:
    @pytest.mark.parametrize("scheme", list(Scheme))
    def test_linear_is_exact(self, grid2, rng, scheme):
        u = random_field(grid2, rng)
        out = etd_step(u, ModelParams(), 0.01, scheme)
        assert np.allclose(out.real, apply_semigroup(u, 0.01).real, rtol=0, atol=1e-13)

    def test_constant_is_fixed(self, grid1):
        u = Field.constant(grid1, 2.5)
        out = etd_step(u, ModelParams(1, 1, 1, 0), 0.1)
        assert np.array_equal(out.real, u.real)

    @pytest.mark.parametrize("scheme", list(Scheme))
    @pytest.mark.parametrize("dt", [1e-4, 1e-2, 0.5])
    def test_marginal_mode(self, grid1, scheme, dt):
        # N = -lap u = u for sin x: y' = -y + y, so the mode is exactly stationary
        u = Field.from_function(grid1, lambda x: 1e-3 * np.sin(x))
        out = etd_step(u, ModelParams(alpha3=1), dt, scheme)
        assert np.allclose(out.real, u.real, rtol=0, atol=1e-16)

    def test_blowup(self, grid1):
        u = Field.from_function(grid1, np.sin)
        with pytest.raises(BlowUpDetected) as info:
            etd_step(u, ModelParams(alpha3=1), 1e-3, blowup_threshold=1.0)
        assert info.value.value > 1.0

    def test_rejects_dt(self, grid1):
        with pytest.raises(ValueError):
            etd_step(Field.zeros(grid1), ModelParams(), 0.0)


class TestSolveDeterministic:
    def test_zero_stays_zero(self, grid1):
        rec = solve_deterministic(Field.zeros(grid1), ModelParams(1, 1, 1, 1), SolverConfig(1e-3, 0.05))
        assert rec.status_text == "completed"
        assert all(np.all(v == 0) for v in rec.probes.values())

    def test_linear_decay(self, grid1):
        u0 = Field.from_function(grid1, lambda x: np.sin(2 * x))
        rec = solve_deterministic(u0, ModelParams(), SolverConfig(1e-3, 0.1), ("C",))
        assert np.allclose(rec["C"], np.sqrt(np.pi) * np.exp(-16 * rec.times), rtol=1e-10, atol=0)

    def test_records_every_kth_step_and_last(self, grid1):
        cfg = SolverConfig(1e-3, 0.0105, record_every=4, snapshot_times=(0.002, 0.0105))
        rec = solve_deterministic(Field.from_function(grid1, np.sin), ModelParams(1), cfg, ("C",))
        assert np.allclose(rec.times, [0, 0.004, 0.008, 0.0105])
        assert [(round(t, 6), name) for t, name, _ in rec.snapshots] == [(0.002, "u"), (0.0105, "u")]
        assert set(rec.fields) == {"u", "v", "z"}

    def test_blowup_is_reported(self, grid1):
        u0 = Field.from_function(grid1, np.sin)
        cfg = SolverConfig(1e-3, 1.0, blowup_threshold=3.5)
        rec = solve_deterministic(u0, ModelParams(alpha3=1, alpha4=5), cfg)
        assert rec.status_text.startswith("blowup(")
        assert 0 < rec.blowup_time < 1.0
        assert rec.times[-1] < rec.blowup_time
        assert "exceeds" in rec.metadata["message"]
        assert rec.fields == {}

    def test_metadata(self, grid1):
        rec = solve_deterministic(Field.from_function(grid1, np.sin), ModelParams(1), SolverConfig(0.01, 0.02))
        meta = rec.metadata
        assert meta["grid"] == {"dim": 1, "n": 32, "length": TWO_PI}
        assert meta["params"]["alpha1"] == 1 and meta["params"]["global_regime"] is True
        assert meta["scheme"] == "ETDRK2" and meta["noise"] is None
        assert meta["u0_l2"] == pytest.approx(np.sqrt(np.pi))

    @pytest.mark.slow
    def test_matches_fine_reference(self):
        p = ModelParams(alpha1=1, alpha3=1)
        coarse = make_grid(1, 32, TWO_PI)
        fine = coarse.with_n(64)
        a = solve_deterministic(Field.from_function(coarse, np.sin), p, SolverConfig(1e-4, 1.0, record_every=10**6), ("x0",))
        b = solve_deterministic(Field.from_function(fine, np.sin), p, SolverConfig(1e-5, 1.0, record_every=10**6), ("x0",))
        assert abs(a["x0"][-1] - b["x0"][-1]) < 1e-4
        spec = np.zeros(fine.spectral_shape, dtype=complex)
        spec[: coarse.n // 2] = a.fields["u"].spectral[: coarse.n // 2]
        assert x0_norm(Field(fine, spectral=spec) - b.fields["u"]) < 1e-4


class TestPicard:
    def setup_method(self):
        self.grid = make_grid(1, 32, TWO_PI)
        self.u0 = Field.from_function(self.grid, np.sin)
        self.params = ModelParams(alpha1=1, alpha2=1)

    def test_zero_data(self):
        rep = picard_iterate(Field.zeros(self.grid), self.params, 0.1, 8)
        assert rep.converged and rep.iterates == 1 and rep.distances == [0.0]
        assert rep.predicted_T == math.inf

    def test_linear_map_is_constant(self):
        rep = picard_iterate(self.u0, ModelParams(), 0.1, 8)
        assert rep.converged and rep.iterates == 1
        assert np.allclose(rep.final.real, apply_semigroup(self.u0, 0.1).real, atol=1e-15)

    def test_reference_contraction(self):
        rep = picard_iterate(self.u0, self.params, 1 / 16, 8)
        assert contracts(rep)
        assert rep.distances[-1] < 1e-10
        assert len(rep.trajectory) == 9

    def test_divergence_is_reported(self):
        rep = picard_iterate(5 * self.u0, self.params, 4.0, 16, max_iter=60)
        assert not rep.converged
        assert "non-finite" in rep.message

    def test_iteration_budget(self):
        rep = picard_iterate(self.u0, self.params, 1.0, 32, max_iter=3)
        assert not rep.converged and rep.iterates == 3 and "no convergence" in rep.message

    def test_validation(self):
        with pytest.raises(ValueError):
            picard_iterate(self.u0, self.params, 0.0, 8)
        with pytest.raises(ValueError):
            picard_iterate(self.u0, self.params, 0.1, 4)

    def test_predicted_horizon_formula(self):
        r = x0_norm(self.u0)
        assert predicted_horizon(self.u0, 0.5) == pytest.approx((0.5 * r * (1 + 2 * r)) ** (-8 / 3))

    def test_calibration_constant(self):
        horizon, c = calibrate_picard_constant(self.u0, self.params)
        assert c == pytest.approx(C_CAL, rel=1e-3)
        assert predicted_horizon(self.u0, c) == pytest.approx(horizon)
