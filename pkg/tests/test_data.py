"""
Tests for data.
"""

import numpy as np

from minseek_toolbox.data import (
    constant_script,
    synthetic_prompt,
    synthetic_script,
    synthetic_thought_lengths,
)
from minseek_toolbox.model import Sentinels


def test_synthetic_prompt_avoids_sentinels():
    """Test if synthetic prompts contain only ordinary tokens."""
    for length in [1, 8, 200]:
        prompt = synthetic_prompt(length, seed=1)
        assert len(prompt) == length
        assert not set(prompt) & set(Sentinels().ids())
    assert synthetic_prompt(8, seed=1) == synthetic_prompt(8, seed=1)


def test_synthetic_thought_lengths_range():
    """Test if thought lengths lie in the closed range [low, high]."""
    lengths = synthetic_thought_lengths(1000, low=3, high=5, seed=2)
    assert len(lengths) == 1000
    assert set(np.unique(lengths)) == {3, 4, 5}


def test_synthetic_script_n_thoughts():
    """Test if a script covers the first thought, the cycles and a final cycle."""
    source = synthetic_script(10, low=2, high=6, first_thought=4, seed=0)
    assert len(source.thoughts) == 12
    assert source.thoughts[0] == (4, True)
    assert all(t for _, t in source.thoughts)


def test_constant_script():
    source = constant_script(5, 7)
    assert source.thoughts == [(7, True)] * 7
