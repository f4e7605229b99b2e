"""
Util functions for the toolbox.
"""
from typing import Any, NoReturn, Sequence, Union

from numbers import Number
import numpy as np
import torch

Numeric = Union[int, float, np.ndarray, torch.Tensor]


def assert_is_finite(*args: Any) -> Union[bool, NoReturn]:
    """Assert that all inputs contain only finite values.

    Args:
        args: the numpy arrays or torch tensors to check.

    Returns:
        True if every element of every input is finite, or else raises assertion error.
    """
    assert len(args) > 0
    for arr in args:
        assert isinstance(arr, np.ndarray) or isinstance(
            arr, torch.Tensor
        ), "All inputs must be of type numpy.ndarray or torch.Tensor"
        if isinstance(arr, np.ndarray):
            assert np.all(np.isfinite(arr)), "Inputs must be finite"
        else:
            assert bool(torch.isfinite(arr).all()), "Inputs must be finite"

    return True


def assert_is_strictly_increasing(seq: Sequence[int]) -> Union[bool, NoReturn]:
    """Assert that a sequence of integers is strictly increasing.

    Args:
        seq: the sequence to check (list, numpy array or torch tensor).

    Returns:
        True if every element is larger than its predecessor, or else raises assertion error.
    """
    values = to_np_array(seq, keep_list=True)[0]
    values = np.asarray(values).reshape(-1)
    assert np.all(np.diff(values) > 0), "Sequence must be strictly increasing"

    return True


def tolerance_ratio(
    actual: Numeric,
    expected: Numeric,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> float:
    """Worst elementwise deviation measured in units of the allowed tolerance.

    Computes max |actual - expected| / (atol + rtol * |expected|). A value of at
    most 1 means every entry agrees within rtol relative error with an atol
    absolute floor for near-zero entries.

    Args:
        actual: the values to check.
        expected: the reference values.
        rtol: relative tolerance.
        atol: absolute floor.

    Returns:
        A single scalar; <= 1 means the inputs agree.
    """
    actual, expected = to_np_array(actual, expected)
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    assert actual.shape == expected.shape, "Inputs must have the same shape"
    scaled = np.abs(actual - expected) / (atol + rtol * np.abs(expected))
    return float(np.max(scaled)) if scaled.size else 0.0


def tensors_close(
    actual: torch.Tensor,
    expected: torch.Tensor,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> bool:
    """Elementwise closeness check, |a - b| <= atol + rtol * |b|."""
    return bool(torch.allclose(actual, expected, rtol=rtol, atol=atol))


def to_np_array(*arrays, **kwargs):
    array_list = []
    for array in arrays:
        if array is None:
            array_list.append(array)
            continue
        if isinstance(array, torch.Tensor):
            array = array.detach().cpu().numpy()
        if isinstance(array, Number):
            pass
        elif isinstance(array, list) or isinstance(array, tuple):
            array = np.array(array)
        elif array.shape == ():
            array = array.tolist()
        array_list.append(array)
    if len(array_list) == 1:
        if not ("keep_list" in kwargs and kwargs["keep_list"]):
            array_list = array_list[0]
    return array_list
