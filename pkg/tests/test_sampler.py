"""Langevin chains and the replay buffer."""

import numpy as np
import pytest
from scipy.signal import lfilter

from ebm_concepts.compose import Bias, Conj, Disj, Leaf
from ebm_concepts.models import ConceptCode, ConstantModel, QuadraticModel
from ebm_concepts.sampler import (EmptyBufferError, ReplayBuffer, SamplerConfig,
                                  buffer_push, buffer_sample, langevin_step, run_chain)
from ebm_concepts.evaluation import Lattice, grid_density


@pytest.fixture
def flat_registry():
    return {"flat": ConstantModel(0.0, "flat")}


@pytest.fixture
def quad_registry():
    # E(x | c) = ||x - c||^2 / 2 so grad = x - c
    return {"quad": QuadraticModel(sigma=1.0, model_id="quad")}


FLAT = Leaf("flat", raw=())
QUAD = Leaf("quad", code=ConceptCode.position(0.0, 0.0))


class TestLangevinStep:
    def test_zero_gradient_pure_noise(self, flat_registry):
        rng = np.random.default_rng(0)
        x = np.full((4, 2), 0.5)
        x1 = langevin_step(FLAT, flat_registry, x, 0.1, 0.0, rng, clamp=(0.0, 1.0))
        np.testing.assert_array_equal(x1, x)
        x2 = langevin_step(FLAT, flat_registry, x, 0.1, 0.3, rng, clamp=(-10, 10))
        assert not np.array_equal(x2, x)

    def test_quadratic_drift(self, quad_registry):
        # hand computation: x' = x - (lam/2) x = x (1 - lam/2)
        rng = np.random.default_rng(0)
        x = np.array([[0.8, 0.4]])
        lam = 0.1
        x1 = langevin_step(QUAD, quad_registry, x, lam, 0.0, rng, clamp=(-10, 10))
        np.testing.assert_allclose(x1, x * (1 - lam / 2), atol=1e-15)

    def test_descends_convex_energy(self, quad_registry):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.2, 1.0, (8, 2))
        e0 = (x ** 2).sum(axis=1)
        x1 = langevin_step(QUAD, quad_registry, x, 0.05, 0.0, rng, clamp=(-10, 10))
        assert np.all((x1 ** 2).sum(axis=1) <= e0)

    def test_deterministic_rng_consumption(self, flat_registry, quad_registry):
        # same draw count regardless of noise scale: chains stay aligned
        r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
        x = np.full((3, 2), 0.5)
        langevin_step(FLAT, flat_registry, x, 0.1, 0.0, r1, clamp=(0, 1))
        langevin_step(FLAT, flat_registry, x, 0.1, 1.0, r2, clamp=(0, 1))
        assert r1.bit_generator.state == r2.bit_generator.state

    def test_clamp_applies(self, quad_registry):
        rng = np.random.default_rng(2)
        code = ConceptCode.position(1.0, 1.0)
        expr = Leaf("quad", code=code)
        x = np.zeros((1, 2))
        x1 = langevin_step(expr, quad_registry, x, 4.0, 0.0, rng, clamp=(0.0, 0.25))
        assert np.all(x1 <= 0.25) and np.all(x1 >= 0.0)


class TestRunChain:
    def test_k0_returns_initialization(self, flat_registry):
        cfg = SamplerConfig(steps=0, step_size=0.1, seed=3)
        samples, trace = run_chain(FLAT, flat_registry, cfg, count=16)
        rng = np.random.default_rng(3)
        expected = rng.random((16, 2))
        np.testing.assert_array_equal(samples, expected)
        assert trace.shape == (1,)

    def test_deterministic_in_seed(self, quad_registry):
        cfg = SamplerConfig(steps=25, step_size=0.05, seed=7)
        a, ta = run_chain(QUAD, quad_registry, cfg, count=10)
        b, tb = run_chain(QUAD, quad_registry, cfg, count=10)
        assert np.array_equal(a, b) and np.array_equal(ta, tb)

    def test_trace_non_increasing_without_noise(self, quad_registry):
        cfg = SamplerConfig(steps=40, step_size=0.05, noise_scale=0.0, seed=1)
        _, trace = run_chain(QUAD, quad_registry, cfg, count=32)
        assert np.all(np.diff(trace) <= 1e-12)

    def test_stationary_variance_matches_scalar_recursion(self):
        # oracle: 1e6-step scalar simulation of x' = (1 - lam/2) x + sqrt(lam) w
        lam = 0.05
        rng = np.random.default_rng(42)
        noise = np.sqrt(lam) * rng.standard_normal(1_000_000)
        path = lfilter([1.0], [1.0, -(1.0 - lam / 2)], noise)
        oracle_var = path[2000:].var()

        registry = {"q1": QuadraticModel(sigma=1.0, model_id="q1", input_kind="point1d")}
        expr = Leaf("q1", code=ConceptCode.size(0.5))
        cfg = SamplerConfig(steps=5000, step_size=lam, seed=8, clamp=(-20.0, 21.0))
        samples, _ = run_chain(expr, registry, cfg, count=2000)
        var = samples[:, 0].var()
        assert var == pytest.approx(oracle_var, rel=0.15)

    def test_conjunction_power_shrinks_variance(self):
        # Conj of n identical leaves targets e^{-nE}: variance ~ 1/n
        registry = {"q1": QuadraticModel(sigma=1.0, model_id="q1", input_kind="point1d")}
        leaf = Leaf("q1", code=ConceptCode.size(0.5))
        lam = 0.02
        v = {}
        for n in (1, 2):
            cfg = SamplerConfig(steps=4000, step_size=lam / n, seed=13, clamp=(-20.0, 21.0))
            samples, _ = run_chain(Conj([leaf] * n), registry, cfg, count=1500)
            v[n] = samples[:, 0].var()
        assert v[2] / v[1] == pytest.approx(0.5, rel=0.15)

    def test_double_well_occupancy_matches_grid_boltzmann(self):
        registry = {"q": QuadraticModel(sigma=0.09, model_id="q", input_kind="point1d")}
        left = Leaf("q", code=ConceptCode.size(0.35))
        right = Leaf("q", code=ConceptCode.size(0.65))
        expr = Disj([Bias(left, 0.6), right])
        lattice = Lattice(((0.0, 1.0),), (200,))
        grid = grid_density(expr, registry, lattice)
        p_left = grid.probs[:100].sum()
        cfg = SamplerConfig(steps=4000, step_size=0.01, seed=21, clamp=(0.0, 1.0))
        samples, _ = run_chain(expr, registry, cfg, count=800)
        frac_left = float((samples[:, 0] < 0.5).mean())
        assert frac_left == pytest.approx(p_left, rel=0.10)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_gradient_names_node(self):
        class ExplodingModel(QuadraticModel):
            def energy_batch(self, xs, cs, trainable=False):
                from ebm_concepts import tensor as T
                scaled = T.multiply(xs if isinstance(xs, T.Tensor) else T.Tensor(xs), 1e200)
                return T.sum_reduce(T.square(scaled), axis=1)

        registry = {"boom": ExplodingModel(model_id="boom")}
        cfg = SamplerConfig(steps=3, step_size=0.1, seed=0)
        from ebm_concepts.sampler import SamplerError
        with pytest.raises(SamplerError, match="boom"):
            run_chain(Leaf("boom", code=ConceptCode.position(0.5, 0.5)), registry,
                      cfg, count=4)


class TestReplayBuffer:
    def test_capacity_eviction(self):
        buf = ReplayBuffer(capacity=2, seed=0)
        buffer_push(buf, np.zeros((3, 2)))
        assert len(buf) == 2

    def test_sample_from_empty_errors(self):
        buf = ReplayBuffer(capacity=4)
        with pytest.raises(EmptyBufferError):
            buffer_sample(buf, 2, np.random.default_rng(0))

    def test_all_values_reachable(self):
        n = 20
        buf = ReplayBuffer(capacity=n, seed=0)
        values = np.arange(n, dtype=np.float64).reshape(n, 1)
        buffer_push(buf, values)
        drawn = buffer_sample(buf, 10 * n, np.random.default_rng(3))
        assert set(drawn[:, 0].astype(int)) == set(range(n))

    def test_replacement_rate_one_never_reads_buffer(self, flat_registry):
        buf = ReplayBuffer(capacity=8, replacement_rate=1.0, seed=0)
        buffer_push(buf, np.full((8, 2), 77.0))
        cfg = SamplerConfig(steps=0, step_size=0.1, seed=5, init="buffer")
        samples, _ = run_chain(FLAT, flat_registry, cfg, count=16, buffer=buf)
        assert np.all(samples <= 1.0)  # uniform init over [0, 1], never 77

    def test_buffer_init_mixes_uniform_fraction(self, flat_registry):
        buf = ReplayBuffer(capacity=64, replacement_rate=0.25, seed=1)
        buffer_push(buf, np.full((64, 2), 0.25))
        cfg = SamplerConfig(steps=0, step_size=0.1, seed=6, init="buffer")
        samples, _ = run_chain(FLAT, flat_registry, cfg, count=400, buffer=buf)
        from_buffer = np.all(samples == 0.25, axis=1).mean()
        assert from_buffer == pytest.approx(0.75, abs=0.08)

    def test_finals_pushed_to_buffer(self, quad_registry):
        buf = ReplayBuffer(capacity=100, seed=2)
        cfg = SamplerConfig(steps=2, step_size=0.05, seed=9)
        run_chain(QUAD, quad_registry, cfg, count=10, buffer=buf)
        assert len(buf) == 10


class TestConfigValidation:
    def test_bad_values(self):
        with pytest.raises(ValueError):
            SamplerConfig(steps=-1)
        with pytest.raises(ValueError):
            SamplerConfig(step_size=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(clamp=(1.0, 0.0))
        with pytest.raises(ValueError):
            SamplerConfig(noise_scale=-0.1)

    def test_default_noise_is_sqrt_lambda(self):
        cfg = SamplerConfig(step_size=0.04)
        assert cfg.noise == pytest.approx(0.2)
        assert SamplerConfig(step_size=0.04, noise_scale=0.5).noise == 0.5
