"""
Code for generating synthetic prompts and thought workloads.
"""
from typing import List, Optional, Tuple

import numpy as np

from minseek_toolbox.controller import ScriptedSource
from minseek_toolbox.model import Sentinels, make_rng


def synthetic_prompt(
    length: int = 8,
    seed: int = 0,
    vocab_size: int = 256,
    sentinels: Sentinels = Sentinels(),
) -> List[int]:
    """Random prompt of ordinary (non-sentinel) token ids.

    Args:
        length: The number of prompt tokens.
        seed: Seed of the Philox stream.
        vocab_size: The vocabulary size of the model.
        sentinels: The reserved ids to avoid.

    Returns:
        The prompt token ids.
    """
    ordinary = np.array([i for i in range(vocab_size) if i not in sentinels.ids()])
    rng = make_rng(seed)
    return [int(t) for t in rng.choice(ordinary, size=length)]


def synthetic_thought_lengths(
    num_cycles: int = 20,
    low: int = 4,
    high: int = 32,
    seed: int = 0,
) -> np.ndarray:
    """Random thought lengths, uniform on the closed range [low, high]."""
    if low < 1 or high < low:
        raise ValueError("need 1 <= low <= high")
    rng = make_rng(seed)
    return rng.integers(low, high + 1, size=num_cycles)


def synthetic_script(
    num_cycles: int = 20,
    low: int = 4,
    high: int = 32,
    first_thought: Optional[int] = None,
    answer_len: int = 3,
    seed: int = 0,
    sentinels: Sentinels = Sentinels(),
    vocab_size: int = 256,
) -> ScriptedSource:
    """Scripted source for a first thought plus num_cycles terminating cycles.

    Args:
        num_cycles: The number of reconstruction cycles to script.
        low: The shortest scripted thought.
        high: The longest scripted thought.
        first_thought: Length of the first thought; random in [low, high] if None.
        answer_len: The number of answer tokens.
        seed: Seed of the Philox stream.
        sentinels: The reserved ids of the model.
        vocab_size: The vocabulary size of the model.

    Returns:
        A ScriptedSource whose thoughts all end in think-end. A final extra
        thought is appended for variant 1's final cycle.
    """
    lengths = synthetic_thought_lengths(num_cycles + 2, low, high, seed)
    if first_thought is not None:
        lengths[0] = first_thought
    thoughts: List[Tuple[int, bool]] = [(int(n), True) for n in lengths]
    return ScriptedSource(thoughts, answer_len, sentinels, vocab_size)


def constant_script(
    num_cycles: int,
    length: int,
    answer_len: int = 3,
    sentinels: Sentinels = Sentinels(),
    vocab_size: int = 256,
) -> ScriptedSource:
    """Scripted source whose thoughts all have the same length."""
    thoughts = [(length, True)] * (num_cycles + 2)
    return ScriptedSource(thoughts, answer_len, sentinels, vocab_size)
