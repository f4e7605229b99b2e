"""
A KV cache that stores position-free keys.

Values and keys without position embeddings are the source of truth. A
rotated copy of the keys ("materialized" keys) is built on demand with position
ids 0..n-1, extended during decoding, and discarded after each reasoning
cycle. A segment table tracks which rows belong to the prompt and first thought
(PT1), to reconstruction cycles (RC) and to the answer, and implements the
minimum-length retention rule over completed cycles.
"""
from typing import Dict, List, Optional, Tuple
from dataclasses import dataclass, replace
from enum import Enum
import logging

import torch

from minseek_toolbox.model import ModelConfig, PositionOverflowError, apply_rope

logger = logging.getLogger(__name__)

CONTIGUOUS = "contiguous"
ORIGINAL = "original"
POSITION_MODES = (CONTIGUOUS, ORIGINAL)
CHECK_ATOL = 1e-6


class CacheConsistencyError(AssertionError):
    """Checked mode found a rotated key that does not match its stored source."""


class SegmentError(ValueError):
    """The segment table was used out of order."""


class BoundViolationError(ValueError):
    """A segment or the whole cache exceeds the configured context bound."""


class SegmentKind(str, Enum):
    PT1 = "pt1"
    RC = "rc"
    ANSWER = "answer"


class MinRuleOutcome(str, Enum):
    KEPT_OLD = "kept"
    REPLACED_WITH_NEW = "replaced"
    ADMITTED = "admitted"


@dataclass(frozen=True)
class Segment:
    """A contiguous run of cache rows.

    token_len counts rows, including the trigger row (an injected wait or
    think-end) that opened the segment; thought_len excludes it.
    """

    kind: SegmentKind
    rc_index: int
    token_len: int
    creation_order: int
    offset: int
    trigger_len: int = 0
    final: bool = False

    @property
    def thought_len(self) -> int:
        return self.token_len - self.trigger_len

    @property
    def end(self) -> int:
        return self.offset + self.token_len

    def describe(self) -> str:
        if self.kind is SegmentKind.RC:
            return f"RC{self.rc_index}"
        return self.kind.name


@dataclass(frozen=True)
class CacheBound:
    """Per-segment cap u and the number of retained cycles.

    retained_rc_max of None means the retained count is unbounded (Budget
    Forcing with unbounded M); only the per-segment cap is then enforced.
    """

    u: int
    retained_rc_max: Optional[int] = 1

    @property
    def limit(self) -> Optional[int]:
        if self.retained_rc_max is None:
            return None
        return (self.retained_rc_max + 2) * self.u


@dataclass(frozen=True)
class MinRuleDecision:
    outcome: MinRuleOutcome
    kept: Segment
    dropped: Optional[Segment]
    compared_with: Optional[Segment]


class LayerCache:
    """Per-layer tensors of shape (n, n_heads, d_head)."""

    def __init__(self, n_heads: int, d_head: int):
        empty = torch.zeros(0, n_heads, d_head, dtype=torch.float32)
        self.k_no_pos = empty
        self.v = empty.clone()
        self.k_materialized: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.k_no_pos.shape[0]

    def remove_rows(self, start: int, stop: int, keep_materialized: bool = False):
        def cut(t):
            return torch.cat([t[:start], t[stop:]], dim=0)

        self.k_no_pos = cut(self.k_no_pos)
        self.v = cut(self.v)
        if keep_materialized and self.k_materialized is not None:
            self.k_materialized = cut(self.k_materialized)
        else:
            self.k_materialized = None


def select_retained(
    retained: List[Segment],
    new_rc: Segment,
    retained_rc_max: int = 1,
) -> Tuple[MinRuleOutcome, Optional[Segment], Optional[Segment]]:
    """Pure min-rule decision over thought lengths.

    With free retained slots the new cycle is admitted. Otherwise the new cycle
    replaces the longest retained cycle only if it is strictly shorter; among
    equally long retained cycles the newest is the one compared and replaced,
    so older cycles win ties.

    Returns:
        (outcome, dropped segment or None, retained segment compared against).
    """
    if len(retained) < retained_rc_max:
        return MinRuleOutcome.ADMITTED, None, None
    longest = max(retained, key=lambda s: (s.thought_len, s.creation_order))
    if longest.thought_len <= new_rc.thought_len:
        return MinRuleOutcome.KEPT_OLD, new_rc, longest
    return MinRuleOutcome.REPLACED_WITH_NEW, longest, longest


class DualKVCache:
    """Position-free KV cache with a segment table.

    Args:
        config: the model configuration (layer/head shapes, rope base, context).
        checked: verify every update's rotated key against its stored source.
        retained_rc_max: number of completed reconstruction cycles kept by the
            min rule.
        position_mode: "contiguous" re-encodes surviving keys at 0..n-1;
            "original" keeps the absolute position each row was generated at.
    """

    def __init__(
        self,
        config: ModelConfig,
        checked: bool = False,
        retained_rc_max: int = 1,
        position_mode: str = CONTIGUOUS,
    ):
        if position_mode not in POSITION_MODES:
            raise ValueError(f"position_mode must be one of {POSITION_MODES}")
        if retained_rc_max < 1:
            raise ValueError("retained_rc_max must be at least 1")
        self.config = config
        self.checked = checked
        self.retained_rc_max = retained_rc_max
        self.position_mode = position_mode
        self.layers = [
            LayerCache(config.n_heads, config.d_head) for _ in range(config.n_layers)
        ]
        self.token_ids: List[int] = []
        self.position_ids: List[int] = []
        self.segments: List[Segment] = []
        self._open: Optional[Segment] = None
        self._creation_counter = 0
        self._next_original_position = 0
        # False once a dropped span had surviving rows after it: those rows were
        # computed with the dropped tokens in context
        self.exact_history = True

    # ------------------------------------------------------------------ shape

    @property
    def length(self) -> int:
        return len(self.layers[0])

    def __len__(self) -> int:
        return self.length

    @property
    def is_materialized(self) -> bool:
        return all(layer.k_materialized is not None for layer in self.layers)

    @property
    def next_position_id(self) -> int:
        if self.position_mode == ORIGINAL:
            return self._next_original_position
        return self.length

    def _append_position(self, layer: LayerCache) -> int:
        # layer 0 is extended first, so self.length runs ahead for deeper layers
        if self.position_mode == ORIGINAL:
            return self._next_original_position
        return len(layer)

    def row_position_ids(self) -> List[int]:
        """Position id each surviving row is rotated with when materialized."""
        if self.position_mode == ORIGINAL:
            return list(self.position_ids)
        return list(range(self.length))

    # -------------------------------------------------------------- tensors

    def update(
        self,
        k_t: torch.Tensor,
        k_t_no_pos: torch.Tensor,
        v_t: torch.Tensor,
        layer_id: int,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Append one token's key/value rows to a layer.

        Args:
            k_t: rotated key, shape (n_heads, d_head).
            k_t_no_pos: the same key without position embedding.
            v_t: value, shape (n_heads, d_head).
            layer_id: the layer to extend.

        Returns:
            The layer's full materialized keys and values for attention.
        """
        layer = self.layers[layer_id]
        if layer.k_materialized is None:
            raise RuntimeError("update() needs materialized keys; call materialize_all()")
        position = self._append_position(layer)
        if position >= self.config.max_context_length:
            raise PositionOverflowError(
                "appending row at position {} reaches max_context_length {}".format(
                    position, self.config.max_context_length
                )
            )
        if self.checked:
            expected = apply_rope(k_t_no_pos, position, self.config.rope_theta)
            if not torch.allclose(k_t, expected, rtol=0.0, atol=CHECK_ATOL):
                raise CacheConsistencyError(
                    "layer {}: k_t does not match rope(k_t_no_pos, {})".format(
                        layer_id, position
                    )
                )

        layer.k_no_pos = torch.cat([layer.k_no_pos, k_t_no_pos.unsqueeze(0)], dim=0)
        layer.v = torch.cat([layer.v, v_t.unsqueeze(0)], dim=0)
        layer.k_materialized = torch.cat(
            [layer.k_materialized, k_t.unsqueeze(0)], dim=0
        )
        return layer.k_materialized, layer.v

    def push_token(self, token_id: int, position_id: int) -> None:
        """Record the token whose rows were just appended to every layer."""
        self.token_ids.append(int(token_id))
        self.position_ids.append(int(position_id))
        self._next_original_position = int(position_id) + 1
        lengths = {len(layer) for layer in self.layers}
        assert lengths == {len(self.token_ids)}, "layers out of step with tokens"

    def materialize_all(self) -> None:
        """Rotate every stored key at its position id (0..n-1 in contiguous mode)."""
        positions = torch.as_tensor(self.row_position_ids(), dtype=torch.long)
        for layer in self.layers:
            layer.k_materialized = apply_rope(
                layer.k_no_pos, positions, self.config.rope_theta
            )
        logger.debug("materialized %d rows", self.length)

    def discard_materialized(self) -> None:
        """Drop the rotated copy; position-free keys and values are untouched."""
        for layer in self.layers:
            layer.k_materialized = None

    def nbytes(self) -> Dict[str, int]:
        """Bytes held by each representation, summed over layers."""

        def size(t):
            return 0 if t is None else t.numel() * t.element_size()

        return {
            "k_no_pos": sum(size(layer.k_no_pos) for layer in self.layers),
            "v": sum(size(layer.v) for layer in self.layers),
            "k_materialized": sum(size(layer.k_materialized) for layer in self.layers),
        }

    # ------------------------------------------------------------- segments

    def begin_segment(
        self,
        kind: SegmentKind,
        rc_index: int = 0,
        trigger_len: int = 0,
        final: bool = False,
    ) -> None:
        """Open a segment starting at the current end of the cache."""
        if self._open is not None:
            raise SegmentError(
                "cannot begin {}: {} is still open".format(
                    kind.name, self._open.describe()
                )
            )
        kind = SegmentKind(kind)
        if kind is SegmentKind.PT1 and self.segments:
            raise SegmentError("PT1 must be the first segment")
        if kind is not SegmentKind.PT1 and not self.segments:
            raise SegmentError("the first segment must be PT1")
        self._open = Segment(
            kind=kind,
            rc_index=rc_index,
            token_len=0,
            creation_order=self._creation_counter,
            offset=self.length,
            trigger_len=trigger_len,
            final=final,
        )
        self._creation_counter += 1

    @property
    def open_segment_rows(self) -> int:
        if self._open is None:
            return 0
        return self.length - self._open.offset

    @property
    def open_segment(self) -> Optional[Segment]:
        return self._open

    def commit_segment(self, token_len: int) -> Segment:
        """Close the open segment; token_len must equal the rows appended since it began."""
        if self._open is None:
            raise SegmentError("no open segment to commit")
        appended = self.open_segment_rows
        if token_len != appended:
            raise SegmentError(
                "{} committed with token_len {} but {} rows were appended".format(
                    self._open.describe(), token_len, appended
                )
            )
        if token_len < self._open.trigger_len:
            raise SegmentError("segment is shorter than its trigger")
        segment = replace(self._open, token_len=token_len)
        self.segments.append(segment)
        self._open = None
        return segment

    def abandon_segment(self, keep_materialized: bool = False) -> int:
        """Remove the open segment and every row appended since it began.

        Returns:
            The number of rows removed.
        """
        if self._open is None:
            raise SegmentError("no open segment to abandon")
        start, stop = self._open.offset, self.length
        for layer in self.layers:
            layer.remove_rows(start, stop, keep_materialized=keep_materialized)
        del self.token_ids[start:stop]
        del self.position_ids[start:stop]
        if self.position_ids:
            self._next_original_position = self.position_ids[-1] + 1
        else:
            self._next_original_position = 0
        self._open = None
        return stop - start

    def _refresh_offsets(self) -> None:
        offset = 0
        refreshed = []
        for segment in self.segments:
            refreshed.append(replace(segment, offset=offset))
            offset += segment.token_len
        self.segments = refreshed

    def check_table(self) -> None:
        """Assert the table partitions the committed rows contiguously."""
        assert self.segments and self.segments[0].kind is SegmentKind.PT1
        assert sum(s.kind is SegmentKind.PT1 for s in self.segments) == 1
        offset = 0
        for segment in self.segments:
            assert segment.offset == offset, "segment offsets are not contiguous"
            offset += segment.token_len
        assert offset + self.open_segment_rows == self.length

    def find_segment(self, kind: SegmentKind, rc_index: int = 0) -> Segment:
        for segment in self.segments:
            if segment.kind is kind and segment.rc_index == rc_index:
                return segment
        raise SegmentError(f"no committed {kind.name} segment with index {rc_index}")

    @property
    def retained_rcs(self) -> List[Segment]:
        """Completed, non-final reconstruction cycles currently in the cache."""
        return [
            s for s in self.segments if s.kind is SegmentKind.RC and not s.final
        ]

    def drop_segment(self, segment: Segment, keep_materialized: bool = False) -> None:
        """Physically remove a committed segment's rows from every layer.

        Following segments shift down. Materialized keys are invalidated unless
        keep_materialized is set, which slices the stale rotated copy instead
        (a deliberate fault used to show the oracle detects it).
        """
        if segment.kind is SegmentKind.PT1:
            raise SegmentError("PT1 is always kept and cannot be dropped")
        if self._open is not None:
            raise SegmentError("cannot drop while a segment is open")
        current = self._lookup(segment)
        start, stop = current.offset, current.end
        if stop < self.length:
            self.exact_history = False
        for layer in self.layers:
            layer.remove_rows(start, stop, keep_materialized=keep_materialized)
        del self.token_ids[start:stop]
        del self.position_ids[start:stop]
        self.segments = [s for s in self.segments if s.creation_order != current.creation_order]
        self._refresh_offsets()
        logger.debug("dropped %s (%d rows)", current.describe(), current.token_len)

    def _lookup(self, segment: Segment) -> Segment:
        for s in self.segments:
            if s.creation_order == segment.creation_order:
                return s
        raise SegmentError(f"{segment.describe()} is not a committed segment")

    def apply_min_rule(
        self, new_rc: Segment, keep_materialized: bool = False
    ) -> MinRuleDecision:
        """Keep only the shortest (and, on ties, oldest) completed cycles.

        The just-committed cycle is compared with the retained ones by thought
        length. If a retained cycle is no longer than the new one, the new
        cycle's rows are dropped; otherwise the retained cycle is dropped and
        the new one takes its place. The first cycle is admitted unconditionally.

        Args:
            new_rc: the just-committed reconstruction cycle.
            keep_materialized: see drop_segment.

        Returns:
            The decision, including the kept and dropped segments.
        """
        if new_rc.kind is not SegmentKind.RC:
            raise SegmentError("the min rule applies to reconstruction cycles only")
        current = self._lookup(new_rc)
        retained = [s for s in self.retained_rcs if s.creation_order != current.creation_order]
        outcome, dropped, compared = select_retained(
            retained, current, self.retained_rc_max
        )
        if dropped is not None:
            self.drop_segment(dropped, keep_materialized=keep_materialized)
        kept = current if outcome is not MinRuleOutcome.KEPT_OLD else compared
        logger.debug(
            "min rule on RC%d (len %d): %s", current.rc_index, current.thought_len, outcome.value
        )
        return MinRuleDecision(
            outcome=outcome, kept=kept, dropped=dropped, compared_with=compared
        )

    # --------------------------------------------------------------- bounds

    def check_bound(self, bound: CacheBound) -> None:
        """Raise BoundViolationError if a segment exceeds u or the cache exceeds the limit."""
        segments = list(self.segments)
        if self._open is not None:
            segments.append(replace(self._open, token_len=self.open_segment_rows))
        for segment in segments:
            if segment.token_len > bound.u:
                raise BoundViolationError(
                    "{} has {} rows, above u = {}".format(
                        segment.describe(), segment.token_len, bound.u
                    )
                )
        if bound.limit is not None and self.length > bound.limit:
            raise BoundViolationError(
                "cache holds {} rows, above ({} + 2) * {} = {}".format(
                    self.length, bound.retained_rc_max, bound.u, bound.limit
                )
            )

    def state_dump(self) -> Dict:
        """Segments, offsets, per-layer row counts and whether rotated keys are held."""
        return {
            "length": self.length,
            "materialized": self.is_materialized,
            "segments": [
                {
                    "kind": s.kind.value,
                    "rc_index": s.rc_index,
                    "offset": s.offset,
                    "rows": s.token_len,
                }
                for s in self.segments
            ],
            "layer_rows": [len(layer) for layer in self.layers],
        }
