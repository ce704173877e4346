from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnpot import diffcore as dc
from attnpot.geometry import (
    AtomicSystem,
    GeometryError,
    KNNSettings,
    RadialBasis,
    build_neighbor_graph,
    candidate_pairs,
    edge_geometry,
    gaussian_rbf,
    minimum_image_displacement,
    replicate_supercell,
    smooth_envelope,
    smoothstep,
    soft_knn_weights,
)


def random_cell(rng, scale=6.0):
    cell = np.eye(3) * scale + rng.uniform(-0.3 * scale, 0.3 * scale, (3, 3)) * np.tri(3, k=-1)
    return cell


def random_system(rng, n, periodic=True, cell_scale=8.0):
    if periodic:
        cell = random_cell(rng, cell_scale)
        frac = rng.uniform(0, 1, (n, 3))
        return AtomicSystem(frac @ cell, np.full(n, 18), cell, (True, True, True))
    return AtomicSystem(rng.uniform(-4, 4, (n, 3)), np.full(n, 18))


def test_system_validation():
    with pytest.raises(GeometryError):
        AtomicSystem(np.zeros((2, 3)), [1])
    with pytest.raises(GeometryError):
        AtomicSystem(np.zeros((1, 3)), [0])
    with pytest.raises(GeometryError):
        AtomicSystem(np.zeros((1, 3)), [1], pbc=(True, False, False))
    with pytest.raises(GeometryError):
        AtomicSystem(np.zeros((1, 3)), [1], np.zeros((3, 3)), (True, True, True))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_minimum_image_matches_image_search(seed):
    rng = np.random.default_rng(seed)
    s = random_system(rng, 2, cell_scale=5.0)
    vec, shift = minimum_image_displacement(s, 0, 1)
    best = min(
        (np.linalg.norm(s.positions[1] + np.array(o) @ s.cell - s.positions[0]), o)
        for o in itertools.product(range(-3, 4), repeat=3)
    )
    assert np.linalg.norm(vec) == pytest.approx(best[0], abs=1e-10)
    np.testing.assert_allclose(vec, s.positions[1] + shift @ s.cell - s.positions[0], atol=1e-12)


def test_envelope_boundary_values():
    r = np.array([0.0, 6.0, 7.0])
    np.testing.assert_allclose(smooth_envelope(r, 6.0), [1.0, 0.0, 0.0], atol=1e-15)
    xs = np.linspace(0, 6, 200)
    u = smooth_envelope(xs, 6.0)
    assert np.all(np.diff(u) <= 1e-15)
    eps = 1e-5
    slope = (smooth_envelope(6.0 - eps, 6.0) - smooth_envelope(6.0 - 2 * eps, 6.0)) / eps
    assert abs(slope) < 1e-8


def test_envelope_tensor_matches_numpy(rng):
    r = rng.uniform(0, 7, 20)
    np.testing.assert_allclose(smooth_envelope(dc.Tensor(r), 6.0).data, smooth_envelope(r, 6.0), atol=1e-14)


def test_smoothstep_ends():
    np.testing.assert_allclose(smoothstep(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])), [0, 0, 0.5, 1, 1])


def test_rbf_peaks_at_centers():
    basis = RadialBasis(7, 6.0)
    out = gaussian_rbf(basis.centers, basis)
    np.testing.assert_allclose(np.diag(out), 1.0)
    np.testing.assert_allclose(out[0, 1], np.exp(-0.5))


def test_soft_knn_separates_near_from_far():
    w = soft_knn_weights(np.array([1.0, 2.0, 10.0, 11.0]), k=2)
    assert w[:2].min() > 0.999
    assert w[2:].max() < 1e-6


def test_soft_knn_hard_limit():
    d = np.array([1.0, 1.5, 2.0, 2.5, 3.0])
    w = soft_knn_weights(d, k=3, sigmoid_scale=1e-4, lse_scale=1e-4)
    np.testing.assert_allclose(w, [1, 1, 1, 0, 0], atol=1e-8)


def test_soft_knn_with_fewer_candidates_is_all_ones():
    np.testing.assert_array_equal(soft_knn_weights(np.array([1.0, 2.0]), k=3), [1.0, 1.0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_soft_knn_weights_bounded_and_rank_ordered(seed):
    rng = np.random.default_rng(seed)
    d = np.sort(rng.uniform(0.5, 6.0, 15))
    w = soft_knn_weights(d, k=6)
    assert np.all((w >= 0) & (w <= 1))
    assert np.all(np.diff(w) <= 1e-15)
    assert w.sum() == pytest.approx(6.0, abs=0.5)


@pytest.mark.parametrize("periodic", [True, False])
def test_cell_list_matches_brute_force(rng, periodic):
    s = random_system(rng, 300, periodic, cell_scale=22.0)
    def key(out):
        i, j, sh, d = out
        rows = sorted(zip(i.tolist(), j.tolist(), map(tuple, sh.tolist())))
        return rows, np.sort(d)
    a = key(candidate_pairs(s, 5.0, "brute"))
    b = key(candidate_pairs(s, 5.0, "cell"))
    assert a[0] == b[0]
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_isolated_atom_has_empty_stencil():
    g = build_neighbor_graph(AtomicSystem(np.zeros((1, 3)), [1]), k=4, r_cut=6.0)
    assert g.neighbors.shape == (1, 4)
    assert not g.mask.any()
    np.testing.assert_array_equal(g.weights, 0.0)


def test_two_atoms_pad_and_point_at_each_other():
    s = AtomicSystem(np.array([[0.0, 0, 0], [2.0, 0, 0]]), [1, 1])
    g = build_neighbor_graph(s, k=3, r_cut=6.0)
    np.testing.assert_array_equal(g.mask, [[True, False, False], [True, False, False]])
    np.testing.assert_array_equal(g.neighbors[:, 0], [1, 0])
    np.testing.assert_allclose(g.directions[0, 0], [1, 0, 0])
    np.testing.assert_allclose(g.distances[:, 0], 2.0)


def test_stencil_is_sorted_and_within_cutoff(rng):
    s = random_system(rng, 40, periodic=True, cell_scale=10.0)
    g = build_neighbor_graph(s, k=8, r_cut=5.0)
    d = np.where(g.mask, g.distances, np.inf)
    assert np.all(np.diff(d, axis=1) >= -1e-12)
    assert np.all(g.distances[g.mask] < 5.0)


def test_hard_mode_weights_are_the_mask(rng):
    s = random_system(rng, 20, periodic=False)
    g = build_neighbor_graph(s, k=5, r_cut=6.0, settings=KNNSettings(soft=False))
    np.testing.assert_array_equal(g.weights, g.mask.astype(float))


def test_soft_weights_continuous_through_rank_swap():
    # atom 3 slides past atom 2 in distance from atom 0; with k=2 the last slot swaps owner
    base = np.array([[0.0, 0, 0], [1.5, 0, 0], [0, 2.5, 0], [0, 0, 3.0]])
    total = []
    for z in np.linspace(3.0, 2.0, 201):
        x = base.copy()
        x[3, 2] = z
        s = AtomicSystem(x, [1, 1, 1, 1])
        g = build_neighbor_graph(s, k=2, r_cut=6.0)
        with dc.no_grad():
            geo = edge_geometry(g, dc.Tensor(x))
        total.append(float((geo.weights.data[0] * geo.envelope.data[0]).sum()))
    jumps = np.abs(np.diff(total))
    assert jumps.max() < 0.05


def test_edge_geometry_weights_differentiable(rng):
    s = random_system(rng, 12, periodic=False)
    g = build_neighbor_graph(s, k=4, r_cut=6.0)
    probe = rng.normal(size=(12, 4))

    def energy(x):
        with dc.no_grad():
            geo = edge_geometry(g, dc.Tensor(x))
        return float((geo.weights.data * geo.envelope.data * probe).sum())

    _, grads = dc.evaluate_with_gradients(
        lambda t: dc.sum_(dc.mul(dc.mul(*(lambda geo: (geo.weights, geo.envelope))(edge_geometry(g, t["x"]))), probe)),
        {"x": s.positions},
    )
    fd = dc.finite_difference_gradient(energy, s.positions, 1e-6)
    np.testing.assert_allclose(grads["x"], fd, rtol=1e-5, atol=1e-7)


def test_supercell_replication(rng):
    s = random_system(rng, 5, periodic=True)
    big = replicate_supercell(s, (2, 1, 3))
    assert len(big) == 30
    assert big.volume == pytest.approx(6 * s.volume)
    np.testing.assert_allclose(big.positions[5:10], s.positions + s.cell[2])
    with pytest.raises(GeometryError):
        replicate_supercell(AtomicSystem(np.zeros((1, 3)), [1]), (2, 1, 1))
