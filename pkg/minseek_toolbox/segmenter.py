"""
Thought boundary detection from sentinel tokens.
"""
from typing import List, Sequence
from argparse import Namespace
from dataclasses import dataclass
from enum import Enum

from minseek_toolbox.model import Sentinels


class BoundaryKind(str, Enum):
    THINK_END = "think_end"
    ANSWER_START = "answer_start"
    EOS = "eos"
    NONE = "none"


@dataclass(frozen=True)
class BoundaryEvent:
    kind: BoundaryKind
    token_index: int


def scan(token_id: int, sentinels: Sentinels, token_index: int = 0) -> BoundaryEvent:
    """Classify one token by the sentinel ids.

    Args:
        token_id: the token to classify.
        sentinels: the reserved ids of the model configuration.
        token_index: position of the token in its stream, copied to the event.

    Returns:
        A BoundaryEvent; kind NONE for ordinary tokens (including wait).
    """
    if token_id == sentinels.think_end:
        kind = BoundaryKind.THINK_END
    elif token_id == sentinels.answer_start:
        kind = BoundaryKind.ANSWER_START
    elif token_id == sentinels.eos:
        kind = BoundaryKind.EOS
    else:
        kind = BoundaryKind.NONE
    return BoundaryEvent(kind=kind, token_index=token_index)


def scan_stream(tokens: Sequence[int], sentinels: Sentinels) -> List[BoundaryEvent]:
    """Boundary events for every non-ordinary token of a stream."""
    events = [scan(t, sentinels, i) for i, t in enumerate(tokens)]
    return [e for e in events if e.kind is not BoundaryKind.NONE]


def split_transcript(
    tokens: Sequence[int],
    injections: Sequence[int],
    sentinels: Sentinels,
) -> Namespace:
    """Partition a transcript into PT1, reconstruction cycles and the answer.

    Reconstruction cycle i starts at the i-th injected wait. The answer starts
    at the first think-end at or after the last injection (the final cycle runs
    up to it); with no such think-end the answer span is empty.

    Args:
        tokens: the full transcript, prompt included.
        injections: indices of the injected wait tokens, strictly increasing.
        sentinels: the reserved ids of the model configuration.

    Returns:
        A Namespace with half-open (start, stop) spans: pt1, rcs (list) and
        answer. The spans are contiguous and cover the transcript.
    """
    n = len(tokens)
    injections = [int(i) for i in injections]
    for prev, cur in zip(injections, injections[1:]):
        if cur <= prev:
            raise ValueError("injection positions must be strictly increasing")
    for i in injections:
        if not 0 < i < n:
            raise ValueError(f"injection position {i} outside transcript of length {n}")
        if tokens[i] != sentinels.wait:
            raise ValueError(f"token at injection position {i} is not the wait sentinel")

    last = injections[-1] if injections else 0
    answer_start = n
    for i in range(last, n):
        if tokens[i] == sentinels.think_end:
            answer_start = i
            break

    starts = [0] + injections + [answer_start]
    spans = [(starts[i], starts[i + 1]) for i in range(len(starts) - 1)]
    return Namespace(pt1=spans[0], rcs=spans[1:], answer=(answer_start, n))


def span_lengths(split: Namespace) -> List[int]:
    """Lengths of pt1, every rc and the answer, in transcript order."""
    spans = [split.pt1] + list(split.rcs) + [split.answer]
    return [stop - start for start, stop in spans]
