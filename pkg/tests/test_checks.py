import itertools

import numpy as np
import pytest

from gar3d.attention import AttentionMask, build_group_causal_mask
from gar3d.checks import (
    brute_force_mask,
    check_mask,
    gap_variance,
    mask_mismatches,
    nearest_rotation_oracle,
    run_checks,
    significant_indices,
    stride_oracle,
)
from gar3d.numkernel import Rng


def test_brute_force_mask_small():
    assert brute_force_mask(4, 2).astype(int).tolist() == [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]]


def test_mask_oracle_detects_corruption():
    assert mask_mismatches() == 0

    def transposed(N, G):
        return AttentionMask(build_group_causal_mask(N, G).allow.T.copy())

    assert mask_mismatches(transposed) > 0
    assert not check_mask(transposed).passed


def test_gap_variance_and_stride_oracle():
    assert gap_variance([1, 2, 3]) == 0.0
    assert gap_variance([1, 2, 4]) == pytest.approx(0.25)
    # oldest frame and the current group are never candidates
    assert stride_oracle([1, 2, 3, 4, 5, 6], 1) == 1
    assert stride_oracle([1, 5], 1) == 0


def test_stride_oracle_is_exhaustive_minimum():
    for ids in itertools.combinations(range(9), 6):
        k = stride_oracle(list(ids), 1)
        rest = list(ids[:k]) + list(ids[k + 1:])
        others = [gap_variance(list(ids[:j]) + list(ids[j + 1:])) for j in range(1, 5)]
        assert gap_variance(rest) == pytest.approx(min(others))


def test_nearest_rotation_oracle_is_orthonormal():
    R = nearest_rotation_oracle(Rng(0).normal(size=(3, 3)), Rng(1), samples=2000)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_significant_indices_respect_floor():
    g = np.array([[0.0, 1e-7], [2e-5, -3.0]])
    picks = significant_indices(g, 5, Rng(0))
    assert sorted(picks) == [(1, 0), (1, 1)]
    assert significant_indices(np.zeros(3), 2, Rng(0)) == []


def test_run_checks_all_pass():
    results = run_checks()
    assert len(results) == 9
    assert [r.name for r in results if not r.passed] == []
    assert all("tolerance=" in r.line() for r in results)
