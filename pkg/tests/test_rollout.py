import numpy as np
import pytest

from pcam.numerics import ContractViolation, rng_from_seed, softmax
from pcam.rollout import (RolloutMap, foreground_score_gap, normalize,
                          rollout_backward, rollout_stack, rollout_step)


def random_stack(seed, n=4, d=6, layers=3):
    rng = rng_from_seed(seed)
    zs = [rng.normal(size=(n, d)) for _ in range(layers)]
    zt = [rng.normal(size=(n, d)) for _ in range(layers)]
    return zs, zt


def test_uniform_first_layer():
    z = np.ones((4, 3))
    rmap = rollout_step(None, z, z, layer=1)
    assert np.allclose(rmap.pairwise, 0.25, atol=1e-12)
    assert np.allclose(rmap.per_patch, 1.0, atol=1e-12)


def test_repeated_constant_inputs_accumulate_l_over_n():
    z = np.full((4, 3), 2.0)
    rmap = None
    for l in range(1, 5):
        rmap = rollout_step(rmap, z, z, layer=l)
        assert np.allclose(rmap.pairwise, l / 4.0, atol=1e-12)
        assert np.all(rmap.pairwise >= 0.0)
        assert np.all(rmap.pairwise <= l)


def test_matches_direct_recursive_oracle():
    zs, zt = random_stack(11, n=2, d=4, layers=2)
    maps = rollout_stack(zs, zt)
    acc = np.zeros((2, 2))
    for l in range(2):
        scores = zs[l] @ zt[l].T / np.sqrt(4)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        acc = acc + e / e.sum(axis=1, keepdims=True)
        assert np.max(np.abs(maps[l].pairwise - acc)) < 1e-12


def test_layer_discontinuity_rejected():
    z = np.ones((3, 2))
    first = rollout_step(None, z, z, layer=1)
    with pytest.raises(ContractViolation):
        rollout_step(first, z, z, layer=3)
    with pytest.raises(ContractViolation):
        rollout_step(None, z, z, layer=2)


def test_bounds_and_row_sums_over_random_stacks():
    for seed in range(25):
        zs, zt = random_stack(seed, n=5, d=4, layers=6)
        for rmap in rollout_stack(zs, zt):
            l = rmap.layer
            assert np.all(rmap.pairwise >= 0.0)
            assert np.all(rmap.pairwise <= l)
            assert np.max(np.abs(rmap.pairwise.sum(axis=1) - l)) < 1e-9


def test_additivity_against_independent_accumulation():
    zs, zt = random_stack(42, n=4, d=5, layers=4)
    maps = rollout_stack(zs, zt)
    terms = [softmax(z1 @ z2.T / np.sqrt(5), axis=-1) for z1, z2 in zip(zs, zt)]
    for l in range(4):
        total = np.sum(terms[:l + 1], axis=0)
        assert np.max(np.abs(maps[l].pairwise - total)) < 1e-12


def test_normalize_layer_one_is_identity():
    zs, zt = random_stack(3, layers=1)
    rmap = rollout_stack(zs, zt)[0]
    assert np.array_equal(normalize(rmap).pairwise, rmap.pairwise)


def test_normalize_constant_stack_uniform():
    z = np.full((4, 3), 1.5)
    rmap = None
    for l in range(1, 6):
        rmap = rollout_step(rmap, z, z, layer=l)
    normed = normalize(rmap)
    assert np.allclose(normed.pairwise, 0.25, atol=1e-12)
    assert np.all(normed.pairwise >= 0.0) and np.all(normed.pairwise <= 1.0)


def test_normalized_fluctuation_decreases():
    # stationary random stacks: the running mean settles at Cesaro rate
    diffs_by_l = {1: [], 2: [], 4: []}
    for seed in range(20):
        zs, zt = random_stack(seed, n=4, d=6, layers=8)
        maps = rollout_stack(zs, zt)
        for l in (1, 2, 4):
            a = normalize(maps[l - 1]).pairwise
            b = normalize(maps[2 * l - 1]).pairwise
            diffs_by_l[l].append(np.abs(a - b).mean())
    means = [np.mean(diffs_by_l[l]) for l in (1, 2, 4)]
    assert means[0] > means[1] > means[2]


def test_grid_view_is_pure_reshape():
    zs, zt = random_stack(8, n=4)
    rmap = rollout_stack(zs, zt)[-1]
    grid = rmap.grid(2)
    assert np.array_equal(grid.ravel(), rmap.per_patch)
    with pytest.raises(ContractViolation):
        rmap.grid(3)


def test_foreground_score_gap_uniform_and_concentrated():
    uniform = np.full(8, 0.5)
    fg = np.zeros(8, dtype=bool)
    fg[:3] = True
    f, b = foreground_score_gap(uniform, fg, ~fg)
    assert f == pytest.approx(b)
    spiked = np.zeros(8)
    spiked[:3] = 2.0
    f, b = foreground_score_gap(spiked, fg, ~fg)
    assert b == 0.0 and f == pytest.approx(2.0)


def test_foreground_score_gap_contracts():
    m = np.ones(4)
    with pytest.raises(ContractViolation):
        foreground_score_gap(m, np.zeros(4, dtype=bool), np.ones(4, dtype=bool))
    overlap = np.ones(4, dtype=bool)
    with pytest.raises(ContractViolation):
        foreground_score_gap(m, overlap, overlap)


def test_rollout_backward_matches_finite_differences():
    zs, zt = random_stack(5, n=3, d=4, layers=3)
    w = rng_from_seed(99).normal(size=(3, 3, 3))

    def loss(zs_flat):
        zs_local = [zs_flat[i] for i in range(3)]
        maps = rollout_stack(zs_local, zt)
        return sum(float((w[l] * maps[l].pairwise).sum()) for l in range(3))

    adjoints = [w[l] for l in range(3)]
    d_s, d_t = rollout_backward(zs, zt, adjoints)
    h = 1e-6
    for layer in range(3):
        fd = np.zeros_like(zs[layer])
        for idx in np.ndindex(*zs[layer].shape):
            orig = zs[layer][idx]
            zs[layer][idx] = orig + h
            up = loss(zs)
            zs[layer][idx] = orig - h
            lo = loss(zs)
            zs[layer][idx] = orig
            fd[idx] = (up - lo) / (2 * h)
        assert np.max(np.abs(fd - d_s[layer])) < 1e-6
