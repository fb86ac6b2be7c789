"""Toy dataset samplers: support, determinism, and cell statistics."""

import numpy as np
import pytest
import scipy.stats

from resflow.data import (
    checkerboard_cell_occupied,
    make_dataset,
)


class TestCheckerboard:
    def test_all_samples_inside_box(self):
        ds = make_dataset("checkerboard", seed=0)
        x = ds.sample(100_000)
        assert np.all(ds.contains(x))
        assert np.all(np.abs(x) <= 4.0)

    def test_forbidden_cells_empty(self):
        ds = make_dataset("checkerboard", seed=1)
        x = ds.sample(100_000)
        i = np.floor(x[:, 0]).astype(int)
        j = np.floor(x[:, 1]).astype(int)
        assert checkerboard_cell_occupied(i, j).all()

    def test_uniform_over_occupied_cells(self):
        ds = make_dataset("checkerboard", seed=2)
        n = 100_000
        x = ds.sample(n)
        i = np.floor(x[:, 0]).astype(int)
        j = np.floor(x[:, 1]).astype(int)
        counts = {}
        for ii in range(-4, 4):
            for jj in range(-4, 4):
                if (ii + jj) % 2 == 0:
                    counts[(ii, jj)] = 0
        for ii, jj in zip(i, j):
            counts[(ii, jj)] += 1
        observed = np.array(list(counts.values()))
        assert observed.size == 32
        expected = n / 32
        chi2 = float(np.sum((observed - expected) ** 2 / expected))
        critical = scipy.stats.chi2.ppf(0.999, df=31)
        assert chi2 < critical

    def test_seed_determinism(self):
        a = make_dataset("checkerboard", seed=7).sample(100)
        b = make_dataset("checkerboard", seed=7).sample(100)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = make_dataset("checkerboard", seed=7).sample(100)
        b = make_dataset("checkerboard", seed=8).sample(100)
        assert not np.array_equal(a, b)

    def test_cell_parity_convention(self):
        assert checkerboard_cell_occupied(0, 0)
        assert not checkerboard_cell_occupied(0, 1)
        assert checkerboard_cell_occupied(-1, 1)
        assert checkerboard_cell_occupied(-4, -4)


class TestOtherDatasets:
    @pytest.mark.parametrize("name", ["eight_gaussians", "rings"])
    def test_samples_inside_bounds(self, name):
        ds = make_dataset(name, seed=3)
        x = ds.sample(50_000)
        assert np.all(ds.contains(x))
        assert np.all(np.isfinite(x))

    def test_eight_gaussians_modes(self):
        ds = make_dataset("eight_gaussians", seed=4)
        x = ds.sample(40_000)
        radii = np.linalg.norm(x, axis=1)
        # nearly all mass near the mode circle of radius 3
        assert np.mean(np.abs(radii - 3.0) < 1.0) > 0.99
        angles = np.arctan2(x[:, 1], x[:, 0])
        octant = np.round(angles / (np.pi / 4)).astype(int) % 8
        counts = np.bincount(octant, minlength=8)
        assert counts.min() > 0.08 * len(x)

    def test_rings_radial_structure(self):
        from resflow.data import RING_RADII

        ds = make_dataset("rings", seed=5)
        x = ds.sample(40_000)
        radii = np.linalg.norm(x, axis=1)
        dist_to_ring = np.min(np.abs(radii[:, None] - np.array(RING_RADII)), axis=1)
        assert np.mean(dist_to_ring < 0.3) > 0.99

    def test_unknown_name_raises(self):
        with pytest.raises(ValueError):
            make_dataset("spiral", seed=0)
