"""MAP inference and energy maps against analytic oracles."""

import numpy as np
import pytest

from ebm_concepts import tensor as T
from ebm_concepts.inference import (InferenceError, energy_map, infer_error,
                                    local_minima, map_infer)
from ebm_concepts.models import Arch, ConceptCode, QuadraticModel
from ebm_concepts.tensor import Tensor


class ImageQuadratic:
    """Analytic test model: E(image | c) = ||mean-code(image) - c||^2.

    The 'image' is just a 2-vector carrying the true position, so MAP
    inference has a closed-form answer.
    """

    def __init__(self, model_id="imgquad"):
        self.arch = Arch("point2d", "position", 2)
        self.model_id = model_id

    def energy_batch(self, xs, cs, trainable=False):
        xs_t = xs if isinstance(xs, Tensor) else Tensor(xs)
        cs_t = cs if isinstance(cs, Tensor) else Tensor(cs)
        return T.sum_reduce(T.square(T.subtract(xs_t, cs_t)), axis=1)


class TwoSiteModel:
    """E(image | c) = softmin(||c - p1||^2, ||c - p2||^2), ignoring the image.

    A hard min of two quadratics up to an exponentially small blend, so the
    energy surface over c has exactly two local minima at p1 and p2.
    """

    def __init__(self, p1, p2, model_id="twosite"):
        self.arch = Arch("point2d", "position", 2)
        self.p1, self.p2 = np.asarray(p1), np.asarray(p2)
        self.model_id = model_id

    def energy_batch(self, xs, cs, trainable=False):
        cs_t = cs if isinstance(cs, Tensor) else Tensor(cs)
        e1 = T.sum_reduce(T.square(T.subtract(cs_t, Tensor(np.broadcast_to(
            self.p1, cs_t.data.shape)))), axis=1)
        e2 = T.sum_reduce(T.square(T.subtract(cs_t, Tensor(np.broadcast_to(
            self.p2, cs_t.data.shape)))), axis=1)
        sharp = 200.0
        stacked = T.stack([T.multiply(e1, -sharp), T.multiply(e2, -sharp)], axis=0)
        return T.multiply(T.logsumexp(stacked, axis=0), -1.0 / sharp)


class TestMapInfer:
    def test_single_image_recovers_position(self):
        model = ImageQuadratic()
        x0 = np.array([0.32, 0.68])
        result = map_infer(model, [x0], grid_resolution=20)
        np.testing.assert_allclose(result.concept_star.values, x0, atol=1.0 / 20)

    def test_two_images_yield_midpoint(self):
        # closed-form minimizer of summed quadratics: the mean
        model = ImageQuadratic()
        x1, x2 = np.array([0.2, 0.4]), np.array([0.6, 0.8])
        result = map_infer(model, [x1, x2], grid_resolution=40)
        np.testing.assert_allclose(result.concept_star.values, (x1 + x2) / 2,
                                   atol=1.0 / 40)

    def test_refined_within_one_cell_of_grid(self):
        model = ImageQuadratic()
        x0 = np.array([0.413, 0.587])
        coarse = map_infer(model, [x0], grid_resolution=10)
        refined = map_infer(model, [x0], grid_resolution=10, refine_steps=200)
        # brute-force oracle at 4x resolution
        fine = map_infer(model, [x0], grid_resolution=40)
        assert refined.method == "grid+refine"
        assert np.abs(refined.concept_star.values - fine.concept_star.values).max() <= 0.1
        assert refined.energy_at_min <= coarse.energy_at_min
        np.testing.assert_allclose(refined.concept_star.values, x0, atol=0.01)

    def test_repeated_image_matches_single(self):
        model = ImageQuadratic()
        x0 = np.array([0.77, 0.21])
        single = map_infer(model, [x0], grid_resolution=16)
        multi = map_infer(model, [x0] * 4, grid_resolution=16)
        np.testing.assert_array_equal(single.concept_star.values,
                                      multi.concept_star.values)
        assert multi.energy_at_min == pytest.approx(4 * single.energy_at_min)

    def test_objective_additivity(self):
        model = ImageQuadratic()
        xs = [np.array([0.3, 0.3]), np.array([0.5, 0.7]), np.array([0.8, 0.2])]
        joint = map_infer(model, xs, grid_resolution=12)
        c = joint.concept_star
        total = sum(map_infer(model, [x], grid_resolution=1).energy_at_min * 0 +
                    float(model.energy_batch(x[None], c.tiled(1)).data[0]) for x in xs)
        assert joint.energy_at_min == pytest.approx(total, abs=1e-12)

    def test_permutation_invariance(self):
        model = ImageQuadratic()
        xs = [np.array([0.3, 0.3]), np.array([0.5, 0.7]), np.array([0.8, 0.2])]
        a = map_infer(model, xs, grid_resolution=14)
        b = map_infer(model, xs[::-1], grid_resolution=14)
        np.testing.assert_array_equal(a.concept_star.values, b.concept_star.values)

    def test_tie_breaks_to_lowest_cell_index(self):
        class FlatModel(ImageQuadratic):
            def energy_batch(self, xs, cs, trainable=False):
                xs_t = xs if isinstance(xs, Tensor) else Tensor(xs)
                return T.multiply(T.sum_reduce(xs_t, axis=1), 0.0)

        result = map_infer(FlatModel(), [np.zeros(2)], grid_resolution=8)
        np.testing.assert_allclose(result.concept_star.values,
                                   [0.5 / 8, 0.5 / 8], atol=1e-12)

    def test_discrete_refinement_rejected(self):
        model = QuadraticModel(sigma=1.0)
        model.arch = Arch("point2d", "color", 3, value_names=("r", "g", "b"))
        with pytest.raises(InferenceError, match="discrete"):
            map_infer(model, [np.zeros(2)], grid_resolution=4, refine_steps=5)

    def test_needs_observations(self):
        with pytest.raises(InferenceError):
            map_infer(ImageQuadratic(), np.zeros((0, 2)), grid_resolution=4)


class TestEnergyMap:
    def test_quadratic_has_unique_minimum_at_truth(self):
        model = ImageQuadratic()
        x0 = np.array([0.42, 0.61])
        emap = energy_map(model, x0, grid_resolution=25)
        minima = local_minima(emap, count=5)
        assert len(minima) == 1
        assert abs(minima[0][0] - x0[0]) <= 0.02 and abs(minima[0][1] - x0[1]) <= 0.02

    def test_two_site_energy_has_exactly_two_minima(self):
        # off the lattice symmetry points so both minima are strict
        p1, p2 = (0.313, 0.292), (0.7, 0.6)
        model = TwoSiteModel(p1, p2)
        emap = energy_map(model, np.zeros(2), grid_resolution=30)
        minima = local_minima(emap, count=10)
        assert len(minima) == 2
        found = sorted((m[0], m[1]) for m in minima)
        for got, true in zip(found, sorted([p1, p2])):
            assert np.hypot(got[0] - true[0], got[1] - true[1]) <= 0.05

    def test_conjunction_map_is_sum_of_maps(self):
        m1, m2 = TwoSiteModel((0.3, 0.3), (0.7, 0.7), "a"), ImageQuadratic("b")
        img = np.array([0.5, 0.5])
        e1 = energy_map(m1, img, grid_resolution=10).values
        e2 = energy_map(m2, img, grid_resolution=10).values
        # composed model energy = sum; its map equals the pointwise sum exactly
        class SumModel:
            arch = Arch("point2d", "position", 2)
            model_id = "sum"
            def energy_batch(self, xs, cs, trainable=False):
                return T.add(m1.energy_batch(xs, cs), m2.energy_batch(xs, cs))
        e12 = energy_map(SumModel(), img, grid_resolution=10).values
        np.testing.assert_array_equal(e12, e1 + e2)

    def test_position_kind_required(self):
        model = QuadraticModel(sigma=1.0, input_kind="point1d")
        with pytest.raises(InferenceError):
            energy_map(model, np.zeros(1), grid_resolution=5)


class TestInferError:
    def test_perfect_model_error_below_grid_spacing(self):
        from ebm_concepts.datasets import ConceptDataset, PointsSpec, GaussianCluster
        rng = np.random.default_rng(0)
        pos = rng.uniform(0.1, 0.9, (40, 2))
        spec = PointsSpec((GaussianCluster((0.5, 0.5), 0.1),))
        ds = ConceptDataset(pos.copy(), {"position": pos}, {}, spec, 0)
        err = infer_error(ImageQuadratic(), ds, grid_resolution=25)
        assert err <= 1.0 / 25
