"""Tests for reflected path simulation, sampling and ensemble export."""

import csv
import json

import numpy as np
import pytest

from boxbridge.core import (
    BoxDomain,
    ConfigError,
    ControlOutOfRangeError,
    DomainMismatchError,
    DriftSpec,
    Grid,
    GridDensity,
    NonPositiveError,
    OutOfDomainError,
    SolverConfig,
    density_cdf,
    inverse_cdf,
    l1_distance,
    normalize,
)
from boxbridge.kernel1d import ReflectedHeatKernel
from boxbridge.sde import (
    ControlField,
    PathEnsemble,
    empirical_marginal,
    inverse_cdf_sample,
    ks_statistic,
    simulate,
    skorokhod_step_1d,
    write_ensemble_csv,
)

INTERVAL = BoxDomain([-1.0], [1.0])


def uniform_density(grid):
    vol = np.prod(grid.domain.side_lengths())
    return GridDensity(grid, np.full(grid.shape, 1.0 / vol), normalized=True)


def cell_binned(dens, coarse):
    """Exact node-centred cell masses of a 1D density on a coarser grid."""
    ax = coarse.axes[0]
    mids = 0.5 * (ax[:-1] + ax[1:])
    edges = np.concatenate(([ax[0]], mids, [ax[-1]]))
    mass = np.diff(density_cdf(dens, edges))
    return normalize(GridDensity(coarse, mass / coarse.axis_weights[0]))


class TestSkorokhodStep:
    def test_interior_step_is_identity(self):
        x, dl, du = skorokhod_step_1d(0.2, 0.3, INTERVAL)
        assert (x, dl, du) == (0.5, 0.0, 0.0)

    def test_upper_projection(self):
        x, dl, du = skorokhod_step_1d(0.9, 0.3, INTERVAL)
        assert np.isclose(x, 1.0) and dl == 0.0 and np.isclose(du, 0.2)

    def test_lower_projection(self):
        x, dl, du = skorokhod_step_1d(-0.9, -0.3, INTERVAL)
        assert np.isclose(x, -1.0) and np.isclose(dl, 0.2) and du == 0.0

    def test_vectorized_and_complementary(self):
        rng = np.random.default_rng(3)
        x0 = rng.uniform(-1, 1, 500)
        inc = rng.normal(0, 0.5, 500)
        x, dl, du = skorokhod_step_1d(x0, inc, INTERVAL)
        assert np.all((x >= -1) & (x <= 1))
        assert np.all((dl == 0) | (du == 0))
        free = x0 + inc
        inside = (free >= -1) & (free <= 1)
        assert np.array_equal(x[inside], free[inside])
        assert np.all(x[~inside] != free[~inside])

    def test_rejects_start_outside(self):
        with pytest.raises(OutOfDomainError):
            skorokhod_step_1d(1.5, 0.0, INTERVAL)

    def test_paths_agree_until_first_crossing(self):
        rng = np.random.default_rng(12)
        inc = rng.normal(0.0, 0.25, 200)
        free = np.concatenate(([0.4], 0.4 + np.cumsum(inc)))
        refl = np.empty_like(free)
        refl[0] = 0.4
        for k, d in enumerate(inc):
            refl[k + 1], _, _ = skorokhod_step_1d(refl[k], d, INTERVAL)
        outside = (free < -1) | (free > 1)
        assert np.any(outside), "test path never crosses"
        first = int(np.argmax(outside))
        assert np.array_equal(refl[:first], free[:first])
        assert refl[first] != free[first]


class TestSimulate:
    def setup_method(self):
        self.grid = Grid(INTERVAL, 101)
        self.cfg = SolverConfig(theta=0.5, time_steps=200)

    def test_zero_temperature_paths_constant(self):
        ens = simulate(50, DriftSpec.zero(), uniform_density(self.grid),
                       self.cfg, seed=4, theta=0.0)
        assert np.array_equal(ens.states, np.repeat(
            ens.states[:, :1, :], ens.n_steps + 1, axis=1))
        assert not ens.local_time_lower.any()
        assert not ens.local_time_upper.any()

    def test_containment_and_local_time_complementarity(self):
        cfg = SolverConfig(theta=0.5, time_steps=1000)
        ens = simulate(200, DriftSpec.zero(), uniform_density(self.grid),
                       cfg, seed=5)
        s = ens.states
        assert np.all(s >= -1.0) and np.all(s <= 1.0)
        inc_l = np.diff(ens.local_time_lower, axis=1)
        inc_u = np.diff(ens.local_time_upper, axis=1)
        assert (inc_l > 0).sum() + (inc_u > 0).sum() > 0
        assert np.all(s[:, 1:, :][inc_l > 0] == -1.0)
        assert np.all(s[:, 1:, :][inc_u > 0] == 1.0)
        interior = (s[:, 1:, :] > -1.0) & (s[:, 1:, :] < 1.0)
        assert not inc_l[interior].any()
        assert not inc_u[interior].any()

    def test_seed_determinism(self):
        args = (40, DriftSpec.zero(), uniform_density(self.grid), self.cfg)
        a = simulate(*args, seed=9)
        b = simulate(*args, seed=9)
        c = simulate(*args, seed=10)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.local_time_lower, b.local_time_lower)
        assert not np.array_equal(a.states, c.states)

    def test_path_prefix_property(self):
        args = (DriftSpec.zero(), uniform_density(self.grid), self.cfg)
        big = simulate(6, *args, seed=2)
        small = simulate(3, *args, seed=2)
        assert np.array_equal(big.states[:3], small.states)

    def test_empty_ensemble(self):
        ens = simulate(0, DriftSpec.zero(), uniform_density(self.grid),
                       self.cfg, seed=1)
        assert ens.n_paths == 0
        assert ens.states.shape == (0, self.cfg.time_steps + 1, 1)

    def test_gradient_drift_pulls_toward_minimum(self):
        # V = x^2 at low temperature concentrates paths near 0
        drift = DriftSpec.from_potential(lambda x: x**2, lambda x: 2 * x)
        ens = simulate(200, drift, uniform_density(self.grid),
                       SolverConfig(theta=0.01, time_steps=500), seed=6)
        assert np.mean(np.abs(ens.states_at(1.0))) < \
            np.mean(np.abs(ens.states_at(0.0)))

    def test_validation_errors(self):
        rho = uniform_density(self.grid)
        with pytest.raises(ConfigError):
            simulate(-1, DriftSpec.zero(), rho, self.cfg, seed=0)
        with pytest.raises(ConfigError):
            simulate(1, DriftSpec.zero(), rho, self.cfg, seed=0, theta=-0.5)
        with pytest.raises(ConfigError):
            bad = GridDensity(self.grid, np.full(101, 3.0))
            simulate(1, DriftSpec.zero(), bad, self.cfg, seed=0)
        other = Grid(BoxDomain([0.0], [2.0]), 11)
        ctrl = ControlField([0.0], other, np.zeros((1, 11, 1)))
        with pytest.raises(DomainMismatchError):
            simulate(1, DriftSpec.zero(), rho, self.cfg, seed=0, control=ctrl)


class TestPathEnsembleInvariants:
    def _pieces(self):
        times = np.array([0.0, 0.5, 1.0])
        states = np.zeros((2, 3, 1))
        lt = np.zeros((2, 3, 1))
        return times, states, lt

    def test_rejects_state_outside_box(self):
        times, states, lt = self._pieces()
        states[0, 1, 0] = 1.5
        with pytest.raises(OutOfDomainError):
            PathEnsemble(INTERVAL, times, states, lt, lt.copy(), 0)

    def test_rejects_decreasing_local_time(self):
        times, states, lt = self._pieces()
        bad = lt.copy()
        bad[0, 1, 0] = 0.3
        states[0, 1, 0] = -1.0
        with pytest.raises(NonPositiveError):
            PathEnsemble(INTERVAL, times, states, bad, lt, 0)

    def test_rejects_local_time_off_boundary(self):
        times, states, lt = self._pieces()
        bad = lt.copy()
        bad[0, 1:, 0] = 0.3
        with pytest.raises(NonPositiveError):
            PathEnsemble(INTERVAL, times, states, bad, lt, 0)

    def test_rejects_shape_mismatch(self):
        times, states, lt = self._pieces()
        with pytest.raises(DomainMismatchError):
            PathEnsemble(INTERVAL, times, states[:, :2, :], lt, lt.copy(), 0)

    def test_states_at_snaps_to_nearest_step(self):
        times, states, lt = self._pieces()
        states[:, 1, 0] = 0.5
        states[:, 2, 0] = -0.5
        ens = PathEnsemble(INTERVAL, times, states, lt, lt.copy(), 0)
        assert np.array_equal(ens.states_at(0.6), states[:, 1, :])
        assert np.array_equal(ens.states_at(0.9), states[:, 2, :])
        with pytest.raises(ConfigError):
            ens.states_at(1.5)


class TestInverseCdfSample:
    def test_uniform_ks_bound(self):
        grid = Grid(INTERVAL, 101)
        n = 2000
        s = inverse_cdf_sample(uniform_density(grid), n, seed=0)
        u = np.sort((s + 1.0) / 2.0)
        i = np.arange(1, n + 1)
        ks = max(np.max(i / n - u), np.max(u - (i - 1) / n))
        assert ks <= 1.36 / np.sqrt(n)

    def test_concentrated_density_stays_in_support(self):
        grid = Grid(INTERVAL, 21)
        vals = np.zeros(21)
        vals[10] = vals[11] = 1.0
        d = normalize(GridDensity(grid, vals))
        s = inverse_cdf_sample(d, 500, seed=1)
        x = grid.axes[0]
        assert np.all(s >= x[9]) and np.all(s <= x[12])

    def test_zero_samples(self):
        grid = Grid(INTERVAL, 11)
        assert inverse_cdf_sample(uniform_density(grid), 0, 0).shape == (0,)
        g2 = Grid(BoxDomain([-1, -1], [1, 1]), (11, 11))
        assert inverse_cdf_sample(uniform_density(g2), 0, 0).shape == (0, 2)

    def test_2d_marginal_and_dependence(self):
        dom = BoxDomain([-1.0, -1.0], [1.0, 1.0])
        g2 = Grid(dom, (81, 81))
        xg, yg = g2.meshgrid()
        corr_d = normalize(GridDensity(g2, np.exp(-4.0 * (xg - yg) ** 2)))
        n = 20000
        s = inverse_cdf_sample(corr_d, n, seed=11)
        assert np.all(dom.contains(s))
        marg = GridDensity(Grid(BoxDomain([-1.0], [1.0]), 81),
                           corr_d.values @ g2.axis_weights[1])
        assert ks_statistic(s[:, 0], marg) <= 1.36 / np.sqrt(n)
        assert np.corrcoef(s[:, 0], s[:, 1])[0, 1] > 0.7

        prod = normalize(GridDensity(g2, (1.5 + xg) * (1.5 - yg)))
        sp = inverse_cdf_sample(prod, n, seed=11)
        assert abs(np.corrcoef(sp[:, 0], sp[:, 1])[0, 1]) < 0.05

    def test_deterministic_for_int_seed(self):
        grid = Grid(INTERVAL, 31)
        d = uniform_density(grid)
        assert np.array_equal(inverse_cdf_sample(d, 50, 5),
                              inverse_cdf_sample(d, 50, 5))


class TestEmpiricalMarginal:
    def test_single_path_point_mass(self):
        grid = Grid(INTERVAL, 101)
        cfg = SolverConfig(time_steps=10)
        ens = simulate(1, DriftSpec.zero(), uniform_density(grid), cfg,
                       seed=3, theta=0.0)
        coarse = Grid(INTERVAL, 21)
        m = empirical_marginal(ens, 0.7, coarse)
        assert np.isclose(m.mass, 1.0)
        assert np.count_nonzero(m.values) == 1

    def test_static_uniform_reproduced(self):
        grid = Grid(INTERVAL, 101)
        cfg = SolverConfig(time_steps=10)
        ens = simulate(5000, DriftSpec.zero(), uniform_density(grid), cfg,
                       seed=8, theta=0.0)
        coarse = Grid(INTERVAL, 21)
        m = empirical_marginal(ens, 1.0, coarse)
        assert l1_distance(m, uniform_density(coarse)) < 0.1

    def test_grid_domain_must_match(self):
        grid = Grid(INTERVAL, 11)
        cfg = SolverConfig(time_steps=5)
        ens = simulate(2, DriftSpec.zero(), uniform_density(grid), cfg, seed=0)
        with pytest.raises(DomainMismatchError):
            empirical_marginal(ens, 0.5, Grid(BoxDomain([0.0], [2.0]), 11))

    def test_weak_consistency_against_kernel_march(self):
        # theta = 0.5, f = 0: 1e4 paths at t = 1 vs the exact kernel march
        dom = BoxDomain([-4.0], [4.0])
        grid = Grid(dom, 801)
        x = grid.axes[0]
        rho0 = normalize(GridDensity(
            grid, 1.0 + (x**2 - 16.0)**2 * np.exp(-x / 2.0)))
        cfg = SolverConfig(theta=0.5, time_steps=1000)
        ens = simulate(10_000, DriftSpec.zero(), rho0, cfg, seed=0)
        kern = ReflectedHeatKernel(dom, 0.5, 100)
        marched = GridDensity(grid, kern.kernel_matrix(grid, 1.0) @ rho0.values)
        coarse = Grid(dom, 21)
        emp = empirical_marginal(ens, 1.0, coarse)
        assert l1_distance(emp, cell_binned(marched, coarse)) <= 0.05


class TestControlField:
    def test_time_interpolation_linear(self):
        grid = Grid(INTERVAL, 11)
        vals = np.stack([np.zeros((11, 1)), np.full((11, 1), 2.0)])
        f = ControlField([0.0, 1.0], grid, vals)
        pts = np.array([[0.0]])
        assert np.isclose(f.at(0.5, pts)[0, 0], 1.0)
        assert np.isclose(f.at(0.25, pts)[0, 0], 0.5)
        assert np.isclose(f.at(-1.0, pts)[0, 0], 0.0)
        assert np.isclose(f.at(2.0, pts)[0, 0], 2.0)

    def test_boundary_collar_zeroed_1d(self):
        grid = Grid(INTERVAL, 11)
        h = grid.spacing[0]
        f = ControlField([0.0], grid, np.ones((1, 11, 1)))
        a = INTERVAL.lower[0]
        q = np.array([a, a + 0.5 * h, a + h, a + 1.5 * h, a + 2.5 * h])
        out = f.at(0.0, q)
        assert np.allclose(out[:3], 0.0)
        assert np.isclose(out[3], 0.5)
        assert np.isclose(out[4], 1.0)

    def test_boundary_collar_is_per_axis_2d(self):
        dom = BoxDomain([0.0, 0.0], [1.0, 1.0])
        grid = Grid(dom, (21, 21))
        f = ControlField([0.0], grid, np.ones((1, 21, 21, 2)))
        near_x1_wall = np.array([[0.01, 0.5]])
        out = f.at(0.0, near_x1_wall)
        assert out[0, 0] == 0.0
        assert np.isclose(out[0, 1], 1.0)

    def test_bilinear_exactness_away_from_collar(self):
        dom = BoxDomain([0.0, 0.0], [1.0, 1.0])
        grid = Grid(dom, (21, 21))
        xg, yg = grid.meshgrid()
        comp0 = 2.0 + 3.0 * xg - yg + 0.5 * xg * yg
        comp1 = 1.0 - xg + 2.0 * yg
        vals = np.stack([comp0, comp1], axis=-1)[None]
        f = ControlField([0.0], grid, vals)
        rng = np.random.default_rng(0)
        pts = rng.uniform(0.2, 0.8, (50, 2))
        out = f.at(0.0, pts)
        ref0 = 2.0 + 3.0 * pts[:, 0] - pts[:, 1] + 0.5 * pts[:, 0] * pts[:, 1]
        ref1 = 1.0 - pts[:, 0] + 2.0 * pts[:, 1]
        assert np.allclose(out[:, 0], ref0, atol=1e-12)
        assert np.allclose(out[:, 1], ref1, atol=1e-12)

    def test_out_of_range_query(self):
        grid = Grid(INTERVAL, 11)
        f = ControlField([0.0], grid, np.zeros((1, 11, 1)))
        with pytest.raises(ControlOutOfRangeError):
            f.at(0.0, np.array([1.2]))

    def test_constant_control_moves_paths(self):
        dom = BoxDomain([-4.0], [4.0])
        grid = Grid(dom, 41)
        vals = np.zeros(41)
        vals[19] = vals[20] = vals[21] = 1.0
        rho0 = normalize(GridDensity(grid, vals))
        ctrl = ControlField([0.0], grid, np.full((1, 41, 1), 0.8))
        cfg = SolverConfig(time_steps=10)
        ens = simulate(20, DriftSpec.zero(), rho0, cfg, seed=1, theta=0.0,
                       control=ctrl)
        drifted = ens.states[:, 0, 0] + 0.8
        assert np.allclose(ens.states[:, -1, 0], drifted, atol=1e-12)


class TestKsStatistic:
    def test_exact_quantile_samples(self):
        grid = Grid(INTERVAL, 101)
        x = grid.axes[0]
        d = normalize(GridDensity(grid, 1.5 + np.sin(2 * x)))
        n = 200
        samples = inverse_cdf(d, (np.arange(1, n + 1) - 0.5) / n)
        assert np.isclose(ks_statistic(samples, d), 0.5 / n, atol=1e-12)

    def test_mismatch_detected(self):
        grid = Grid(INTERVAL, 101)
        d = uniform_density(grid)
        shifted = np.clip(inverse_cdf(d, np.linspace(0.01, 0.99, 300)) + 0.4,
                          -1.0, 1.0)
        assert ks_statistic(shifted, d) > 0.15


class TestEnsembleCsv:
    def test_roundtrip_and_sidecar(self, tmp_path):
        dom = BoxDomain([-1.0, 0.0], [1.0, 2.0])
        grid = Grid(dom, (11, 11))
        cfg = SolverConfig(theta=0.5, time_steps=5)
        ens = simulate(3, DriftSpec.zero(), uniform_density(grid), cfg, seed=42)
        out = tmp_path / "ensemble.csv"
        write_ensemble_csv(ens, out, config={"theta": 0.5})
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * 6
        got = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
        assert np.array_equal(got.reshape(3, 6, 2), ens.states)
        for p in range(3):
            sub = [r for r in rows if r["path_id"] == str(p)]
            dl = np.cumsum([float(r["dL"]) for r in sub])
            assert np.isclose(dl[-1], ens.local_time_lower[p, -1].sum())
        meta = json.loads((tmp_path / "ensemble.json").read_text())
        assert meta["rng_seed"] == 42
        assert meta["n_paths"] == 3
        assert meta["config"] == {"theta": 0.5}
        assert meta["columns"][:4] == ["path_id", "step", "t", "x1"]
        assert not list(tmp_path.glob("*.tmp"))

    def test_empty_ensemble_file(self, tmp_path):
        grid = Grid(INTERVAL, 11)
        cfg = SolverConfig(time_steps=5)
        ens = simulate(0, DriftSpec.zero(), uniform_density(grid), cfg, seed=0)
        out = tmp_path / "empty.csv"
        write_ensemble_csv(ens, out)
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows == [["path_id", "step", "t", "x1", "dL", "dU"]]
