"""
Test for util functions.
"""

import pytest
import numpy as np
import torch

from minseek_toolbox.utils import (
    assert_is_finite,
    assert_is_strictly_increasing,
    tolerance_ratio,
    tensors_close,
    to_np_array,
)


def test_is_finite_wrong_type():
    wrong = [1.0, 2.0]
    with pytest.raises(AssertionError):
        assert_is_finite(wrong)


def test_is_finite_nan_and_inf():
    with pytest.raises(AssertionError):
        assert_is_finite(np.array([0.0, np.nan]))
    with pytest.raises(AssertionError):
        assert_is_finite(torch.tensor([1.0, float("inf")]))


def test_is_finite_correct_many_inputs():
    inputs = [np.arange(5.0), torch.arange(3.0)]
    assert assert_is_finite(*inputs)


def test_is_strictly_increasing():
    assert assert_is_strictly_increasing([0, 1, 5])
    assert assert_is_strictly_increasing(torch.tensor([2, 3]))
    with pytest.raises(AssertionError):
        assert_is_strictly_increasing([0, 2, 2])
    with pytest.raises(AssertionError):
        assert_is_strictly_increasing(np.array([3, 1]))


def test_tolerance_ratio_relative_and_floor():
    expected = np.array([1.0, 100.0, 0.0])
    # 0.5 of the allowed deviation on every entry
    actual = expected + 0.5 * (1e-6 + 1e-4 * np.abs(expected))
    ratio = tolerance_ratio(actual, expected)
    assert np.abs(ratio - 0.5) < 1e-6

    actual = expected.copy()
    actual[1] += 0.1
    assert tolerance_ratio(actual, expected) > 1.0


def test_tolerance_ratio_shape_mismatch():
    with pytest.raises(AssertionError):
        tolerance_ratio(np.zeros(3), np.zeros(4))


def test_tensors_close():
    a = torch.tensor([1.0, 2.0])
    assert tensors_close(a, a + 1e-7)
    assert not tensors_close(a, a + 1e-2)


def test_to_np_array_from_tensor_and_list():
    arr = to_np_array(torch.tensor([1.0, 2.0]))
    assert isinstance(arr, np.ndarray)
    first, second = to_np_array([1, 2], None)
    assert isinstance(first, np.ndarray)
    assert second is None
    kept = to_np_array(np.arange(3), keep_list=True)
    assert isinstance(kept, list) and len(kept) == 1
