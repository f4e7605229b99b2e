"""
Sequential test-time scaling controller.

Runs decoding through the prompt and first thought (PT1), reacts to each
think-end boundary by injecting a wait token (another reconstruction cycle)
or finalizing, and implements the Min-Seek variants and the Budget Forcing
baseline on top of the DualKVCache.
"""
from typing import Callable, Deque, List, Optional, Sequence, Tuple
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
import logging
import time

import numpy as np
import torch

from minseek_toolbox.cache import (
    CONTIGUOUS,
    POSITION_MODES,
    BoundViolationError,
    CacheBound,
    DualKVCache,
    SegmentKind,
)
from minseek_toolbox.metrics_complexity import CostRecord
from minseek_toolbox.model import (
    ModelConfig,
    SamplingConfig,
    Sentinels,
    Weights,
    forward_step,
    make_rng,
    sample,
)
from minseek_toolbox.segmenter import BoundaryKind, scan, split_transcript
from minseek_toolbox.trace import ANSWERING, DONE, FINALIZING, THINKING, GenerationTrace
from minseek_toolbox.utils import to_np_array

logger = logging.getLogger(__name__)

DEFAULT_TOKEN_LIMIT = 2 ** 15
HARD_CAP_FACTOR = 4
UNBOUNDED = None
FAULT_SKIP_REMATERIALIZE = "skip_rematerialize"
FAULTS = (FAULT_SKIP_REMATERIALIZE,)


class ScriptExhaustedError(RuntimeError):
    """A scripted token source ran out of tokens."""


class Method(str, Enum):
    MINSEEK = "minseek"
    BUDGET = "budget"
    STANDARD = "standard"


class Action(str, Enum):
    INJECT_WAIT = "inject_wait"
    FINALIZE = "finalize"
    ACCEPT = "accept"
    ROLLBACK = "rollback"


def parse_max_rc(value) -> Optional[int]:
    """Count of reconstruction cycles; "inf" (or None) means unbounded."""
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "unbounded")):
        return UNBOUNDED
    value = int(value)
    if value < 0:
        raise ValueError("max_rc must be non-negative")
    return value


@dataclass(frozen=True)
class ScalingPolicy:
    """How many reconstruction cycles to induce and what to keep of them.

    Args:
        method: Min-Seek, Budget Forcing or standard generation.
        variant: Min-Seek finalization; 1 runs one last cycle before the
            answer, 2 answers directly from PT1 and the kept cycle.
        max_rc: the maximal number of induced cycles, None for unbounded.
        token_limit: soft limit on sampled tokens, checked at boundaries.
        segment_cap: per-segment row cap u.
        retained_rc_max: cycles kept by the min rule.
        position_mode: "contiguous" or "original" position ids.
    """

    method: Method = Method.MINSEEK
    variant: int = 2
    max_rc: Optional[int] = 2
    token_limit: int = DEFAULT_TOKEN_LIMIT
    segment_cap: int = 32
    retained_rc_max: int = 1
    position_mode: str = CONTIGUOUS

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "max_rc", parse_max_rc(self.max_rc))
        if self.method is Method.STANDARD:
            object.__setattr__(self, "max_rc", 0)
        if self.variant not in (1, 2):
            raise ValueError(f"variant must be 1 or 2, got {self.variant}")
        if self.token_limit < 1:
            raise ValueError("token_limit must be at least 1")
        if self.segment_cap < 2:
            raise ValueError("segment_cap must be at least 2")
        if self.retained_rc_max < 1:
            raise ValueError("retained_rc_max must be at least 1")
        if self.position_mode not in POSITION_MODES:
            raise ValueError(f"position_mode must be one of {POSITION_MODES}")

    @property
    def effective_max_rc(self) -> Optional[int]:
        if self.method is Method.STANDARD:
            return 0
        return self.max_rc

    @property
    def hard_cap(self) -> int:
        return HARD_CAP_FACTOR * self.token_limit

    @property
    def has_final_cycle(self) -> bool:
        return (
            self.method is Method.MINSEEK
            and self.variant == 1
            and self.effective_max_rc != 0
        )

    @property
    def label(self) -> str:
        m = "inf" if self.effective_max_rc is None else self.effective_max_rc
        if self.method is Method.MINSEEK:
            return f"minseek-v{self.variant}-m{m}"
        return f"{self.method.value}-m{m}"


def required_context(policy: ScalingPolicy) -> Tuple[int, str]:
    """Largest position id count a run under this policy can need.

    Returns:
        (rows, arithmetic) where arithmetic spells out the bound.
    """
    u = policy.segment_cap
    extra = u if policy.has_final_cycle else 0
    max_rc = policy.effective_max_rc
    if policy.method is Method.MINSEEK and policy.position_mode == CONTIGUOUS:
        rows = CacheBound(u, policy.retained_rc_max).limit + extra
        text = f"({policy.retained_rc_max} + 2) * {u}"
    elif max_rc is not UNBOUNDED:
        rows = (max_rc + 2) * u + extra
        text = f"({max_rc} + 2) * {u}"
    else:
        rows = u + 2 * policy.hard_cap
        text = f"{u} + 2 * {policy.hard_cap}"
    if extra:
        text += f" + {u}"
    return rows, f"{text} = {rows}"


def check_static_bound(policy: ScalingPolicy, config: ModelConfig) -> None:
    """Reject policies whose context requirement reaches max_context_length."""
    rows, text = required_context(policy)
    if not rows < config.max_context_length:
        raise BoundViolationError(
            "{}: {} is not < max_context_length {}".format(
                policy.label, text, config.max_context_length
            )
        )


@dataclass
class ControllerState:
    rc_count: int = 0
    tokens_generated: int = 0
    phase: str = THINKING
    rng_state: Optional[np.random.Generator] = None
    in_final_cycle: bool = False
    truncated: bool = False
    done_reason: Optional[str] = None


def on_think_end(state: ControllerState, policy: ScalingPolicy) -> Action:
    """Continue with another cycle while under both the cycle and token limits."""
    max_rc = policy.effective_max_rc
    under_rc = max_rc is UNBOUNDED or state.rc_count < max_rc
    if under_rc and state.tokens_generated <= policy.token_limit:
        return Action.INJECT_WAIT
    return Action.FINALIZE


def handle_missing_think_end(state: ControllerState, policy: ScalingPolicy) -> Action:
    """Accept a runaway thought as the final output, or roll it back.

    Only Min-Seek variant 2 rolls back, and only a reconstruction cycle: its
    rows are discarded and the wait that started it is replaced by think-end.
    """
    if (
        state.rc_count == 0
        or policy.method is not Method.MINSEEK
        or policy.variant == 1
        or state.in_final_cycle
    ):
        return Action.ACCEPT
    return Action.ROLLBACK


@dataclass
class Transcript:
    """Every token fed to the model, injected tokens included."""

    tokens: List[int] = field(default_factory=list)
    injections: List[int] = field(default_factory=list)
    prompt_len: int = 0
    answer_start: Optional[int] = None

    def answer_tokens(self) -> List[int]:
        if self.answer_start is None:
            return []
        return self.tokens[self.answer_start :]

    def split(self, sentinels: Sentinels):
        return split_transcript(self.tokens, self.injections, sentinels)


class ScriptedSource:
    """Deterministic token source for controller fixtures.

    Each thought (length, terminates) yields length - 1 filler tokens followed
    by think_end (or eos when it does not terminate). After start_answer() the
    source yields answer_start, fillers and eos, answer_len tokens in total.
    """

    def __init__(
        self,
        thoughts: Sequence[Tuple[int, bool]],
        answer_len: int = 3,
        sentinels: Sentinels = Sentinels(),
        vocab_size: int = 256,
    ):
        if answer_len < 2:
            raise ValueError("answer_len must cover answer_start and eos")
        reserved = set(sentinels.ids())
        self._fillers = [i for i in range(vocab_size) if i not in reserved]
        self._counter = 0
        self.sentinels = sentinels
        self.thoughts = [(int(n), bool(t)) for n, t in thoughts]
        self.answer_len = answer_len
        self._stream: Deque[int] = deque()
        for length, terminates in self.thoughts:
            if length < 1:
                raise ValueError("scripted thoughts need at least one token")
            self._stream.extend(self._filler() for _ in range(length - 1))
            self._stream.append(sentinels.think_end if terminates else sentinels.eos)

    def _filler(self) -> int:
        token = self._fillers[(10 + self._counter) % len(self._fillers)]
        self._counter += 1
        return token

    def next_token(self, logits=None) -> int:
        if not self._stream:
            raise ScriptExhaustedError("scripted source has no tokens left")
        return self._stream.popleft()

    def start_answer(self) -> None:
        self._stream = deque([self.sentinels.answer_start])
        self._stream.extend(self._filler() for _ in range(self.answer_len - 2))
        self._stream.append(self.sentinels.eos)


def step_scripted(source: ScriptedSource) -> int:
    return source.next_token()


class SampledSource:
    """Nucleus sampling from the model's logits."""

    def __init__(self, sampling: SamplingConfig, rng: np.random.Generator):
        self.sampling = sampling
        self.rng = rng

    def next_token(self, logits) -> int:
        values = np.array(to_np_array(logits), dtype=np.float64)
        for token_id, bias in self.sampling.logit_bias.items():
            values[int(token_id)] += bias
        return sample(values, self.sampling.temperature, self.sampling.top_p, self.rng)

    def start_answer(self) -> None:
        pass


Observer = Callable[["GenerationSession", torch.Tensor], None]


class GenerationSession:
    """One generation run: owns its cache, transcript and trace.

    Args:
        weights: shared, immutable model weights.
        policy: the scaling policy.
        source: ScriptedSource or SampledSource.
        cache: an empty cache to use; one is created when omitted.
        checked: verify cache consistency and bounds at every boundary.
        observer: called as observer(session, logits) after every injected
            token, e.g. to compare against the recompute oracle.
        fault: name of a deliberate fault to inject (see FAULTS).
        keep_tokens: record TokenEmitted events.
    """

    def __init__(
        self,
        weights: Weights,
        policy: ScalingPolicy,
        source,
        cache: Optional[DualKVCache] = None,
        checked: bool = False,
        observer: Optional[Observer] = None,
        fault: Optional[str] = None,
        keep_tokens: bool = True,
    ):
        if fault is not None and fault not in FAULTS:
            raise ValueError(f"unknown fault {fault!r}, expected one of {FAULTS}")
        self.weights = weights
        self.config = weights.config
        self.policy = policy
        self.source = source
        if cache is None:
            cache = DualKVCache(
                self.config,
                checked=checked,
                retained_rc_max=policy.retained_rc_max,
                position_mode=policy.position_mode,
            )
        self.cache = cache
        self.checked = checked
        self.observer = observer
        self.fault = fault
        self.state = ControllerState(rng_state=getattr(source, "rng", None))
        self.transcript = Transcript()
        self.trace = GenerationTrace(keep_tokens=keep_tokens)
        self.logits: Optional[torch.Tensor] = None
        self.max_position_id = -1
        self.max_rows = 0
        self.steps = 0
        retained = policy.retained_rc_max if policy.method is Method.MINSEEK else None
        self.bound = CacheBound(policy.segment_cap, retained)

    @property
    def sentinels(self) -> Sentinels:
        return self.config.sentinel_tokens

    @property
    def finished(self) -> bool:
        return self.state.phase == DONE or self.state.truncated

    @property
    def is_minseek(self) -> bool:
        return self.policy.method is Method.MINSEEK

    def run(self, prompt_tokens: Sequence[int]) -> Tuple[Transcript, GenerationTrace]:
        self._prefill(prompt_tokens)
        while not self.finished:
            if self.state.tokens_generated >= self.policy.hard_cap:
                self._truncate("hard_cap")
            elif self.state.phase == ANSWERING:
                self._answer_step()
            else:
                self._thought_step()
        logger.info(
            "%s finished: %s after %d tokens, %d cycles",
            self.policy.label,
            self.state.done_reason or "truncated",
            self.state.tokens_generated,
            self.state.rc_count,
        )
        return self.transcript, self.trace

    # ---------------------------------------------------------------- steps

    def _prefill(self, prompt_tokens: Sequence[int]) -> None:
        prompt = [int(t) for t in prompt_tokens]
        if not prompt:
            raise ValueError("the prompt must contain at least one token")
        if len(prompt) >= self.policy.segment_cap:
            raise ValueError(
                "prompt of {} tokens leaves no room for a thought under u = {}".format(
                    len(prompt), self.policy.segment_cap
                )
            )
        if self.cache.length or self.cache.segments:
            raise ValueError("generation needs an empty cache")
        check_static_bound(self.policy, self.config)

        self._set_phase(THINKING)
        self.cache.materialize_all()
        self.cache.begin_segment(SegmentKind.PT1)
        for token in prompt:
            self.logits = self._feed(token)
        self.transcript.prompt_len = len(prompt)

    def _next_token(self) -> int:
        token = int(self.source.next_token(self.logits))
        self.state.tokens_generated += 1
        self.trace.emit("TokenEmitted", token=token)
        return token

    def _thought_step(self) -> None:
        token = self._next_token()
        boundary = scan(token, self.sentinels, len(self.transcript.tokens))
        if boundary.kind is BoundaryKind.THINK_END:
            self.trace.emit("ThinkEnd", tokens_generated=self.state.tokens_generated)
            self._on_boundary()
        elif (
            boundary.kind is BoundaryKind.EOS
            or self.cache.open_segment_rows >= self.policy.segment_cap
        ):
            self._missing_think_end()
        else:
            self.logits = self._feed(token)

    def _answer_step(self) -> None:
        if self.cache.open_segment_rows >= self.policy.segment_cap:
            self._done("answer_cap")
            return
        token = self._next_token()
        if token == self.sentinels.eos:
            self._done("eos")
            return
        if token == self.sentinels.answer_start:
            self.trace.emit("AnswerStart")
        self.logits = self._feed(token)

    def _feed(self, token: int) -> torch.Tensor:
        position = self.cache.next_position_id
        start = time.perf_counter()
        logits = forward_step(self.weights, token, self.cache, position)
        elapsed = time.perf_counter() - start

        self.steps += 1
        self.transcript.tokens.append(token)
        self.max_position_id = max(self.max_position_id, position)
        self.max_rows = max(self.max_rows, self.cache.length)
        self.trace.add_cost(
            CostRecord(
                attention_scores=self.cache.length
                * self.config.n_layers
                * self.config.n_heads,
                cache_rows=self.cache.length,
                wall_time=elapsed,
                cumulative_tokens=self.steps,
                rc_index=self.state.rc_count,
            )
        )
        return logits

    # ----------------------------------------------------------- boundaries

    def _on_boundary(self) -> None:
        segment = self.cache.commit_segment(self.cache.open_segment_rows)
        self._emit_committed(segment)
        if segment.final:
            self._start_answer()
            return
        if segment.kind is SegmentKind.RC and self.is_minseek:
            self._end_cycle()
            self._apply_min_rule(segment)
        if self.checked:
            self.cache.check_table()
            self.cache.check_bound(self.bound)

        if on_think_end(self.state, self.policy) is Action.INJECT_WAIT:
            self._inject_wait()
        else:
            self.finalize()

    def _apply_min_rule(self, segment) -> None:
        decision = self.cache.apply_min_rule(
            segment, keep_materialized=self.fault == FAULT_SKIP_REMATERIALIZE
        )
        self.trace.emit(
            "MinRuleDecision",
            decision=decision.outcome.value,
            kept_rc=decision.kept.rc_index,
            kept_len=decision.kept.thought_len,
            new_rc=segment.rc_index,
            new_len=segment.thought_len,
        )
        if decision.dropped is not None:
            self.trace.emit(
                "Evicted",
                kind=decision.dropped.kind.value,
                rc_index=decision.dropped.rc_index,
                rows=decision.dropped.token_len,
            )
        self.trace.emit("CacheState", **self.cache.state_dump())

    def _end_cycle(self) -> None:
        # rotated keys live only while a cycle is decoded
        if self.fault != FAULT_SKIP_REMATERIALIZE:
            self.cache.discard_materialized()

    def _inject_wait(self, final: bool = False) -> None:
        if not final:
            self.state.rc_count += 1
        if self.is_minseek:
            self._materialize()
        rc_index = self.state.rc_count + (1 if final else 0)
        self.cache.begin_segment(SegmentKind.RC, rc_index, trigger_len=1, final=final)
        self._inject(self.sentinels.wait, "wait")

    def finalize(self) -> None:
        """Leave the thinking phase.

        Min-Seek variant 1 induces one final cycle, which is never subject to
        the min rule; every other policy injects think-end and answers.
        """
        self._set_phase(FINALIZING)
        if self.policy.has_final_cycle:
            self.state.in_final_cycle = True
            self._inject_wait(final=True)
        else:
            self._start_answer()

    def _start_answer(self) -> None:
        if self.is_minseek:
            self._materialize(only_if_missing=True)
        self.cache.begin_segment(SegmentKind.ANSWER, trigger_len=1)
        self.transcript.answer_start = len(self.transcript.tokens)
        self._inject(self.sentinels.think_end, "think_end")
        self._set_phase(ANSWERING)
        self.source.start_answer()

    def _missing_think_end(self) -> None:
        rows = self.cache.open_segment_rows
        action = handle_missing_think_end(self.state, self.policy)
        self.trace.emit("MissingThinkEnd", action=action.value, rows=rows)
        logger.debug("missing think-end after %d rows: %s", rows, action.value)

        if action is Action.ACCEPT:
            self._emit_committed(self.cache.commit_segment(rows))
            if self.state.phase == THINKING:
                self._set_phase(FINALIZING)
            self._set_phase(ANSWERING)
            self._done("runaway")
            return

        self.cache.abandon_segment(
            keep_materialized=self.fault == FAULT_SKIP_REMATERIALIZE
        )
        start = self.transcript.injections.pop()
        del self.transcript.tokens[start:]
        self.state.rc_count -= 1
        self._set_phase(FINALIZING)
        self._start_answer()

    # -------------------------------------------------------------- helpers

    def _inject(self, token: int, name: str) -> None:
        position = self.cache.next_position_id
        index = len(self.transcript.tokens)
        self.logits = self._feed(token)
        self.trace.emit("Injected", token=name, position=position)
        if token == self.sentinels.wait:
            self.transcript.injections.append(index)
        if self.observer is not None:
            self.observer(self, self.logits)

    def _materialize(self, only_if_missing: bool = False) -> None:
        if only_if_missing and self.cache.is_materialized:
            return
        # The fault keeps stale rotated keys that were sliced along with the rows
        if self.fault == FAULT_SKIP_REMATERIALIZE and self.cache.is_materialized:
            return
        self.cache.discard_materialized()
        self.cache.materialize_all()
        self.trace.emit("Materialized", length=self.cache.length)
        self.trace.emit("CacheState", **self.cache.state_dump())

    def _emit_committed(self, segment) -> None:
        self.trace.emit(
            "SegmentCommitted",
            kind=segment.kind.value,
            rc_index=segment.rc_index,
            rows=segment.token_len,
        )

    def _set_phase(self, phase: str) -> None:
        self.state.phase = phase
        self.trace.emit("Phase", phase=phase)

    def _done(self, reason: str) -> None:
        if self.cache.open_segment is not None:
            self._emit_committed(self.cache.commit_segment(self.cache.open_segment_rows))
        self.state.phase = DONE
        self.state.done_reason = reason
        self.trace.emit(
            "Done",
            reason=reason,
            rc_count=self.state.rc_count,
            tokens_generated=self.state.tokens_generated,
        )

    def _truncate(self, reason: str) -> None:
        self.state.truncated = True
        self.trace.emit("Truncated", reason=reason)


def run_generation(
    prompt_tokens: Sequence[int],
    policy: ScalingPolicy,
    weights: Weights,
    cache: Optional[DualKVCache] = None,
    source=None,
    sampling: Optional[SamplingConfig] = None,
    seed: int = 0,
    checked: bool = False,
    observer: Optional[Observer] = None,
    fault: Optional[str] = None,
) -> Tuple[Transcript, GenerationTrace]:
    """Run one generation session.

    Args:
        prompt_tokens: the prompt; shorter than the policy's segment cap.
        policy: the scaling policy.
        weights: the model weights.
        cache: an empty cache, or None to create one for the policy.
        source: a token source; defaults to nucleus sampling.
        sampling: sampling settings for the default source.
        seed: rng seed for the default source.
        checked: run checked-mode assertions.
        observer: callback after every injected token.
        fault: deliberate fault to inject.

    Returns:
        The transcript and the trace of the run.
    """
    if source is None:
        source = SampledSource(sampling or SamplingConfig(), make_rng(seed))
    session = GenerationSession(
        weights,
        policy,
        source,
        cache=cache,
        checked=checked,
        observer=observer,
        fault=fault,
    )
    return session.run(prompt_tokens)
