"""
Append-only event log of a generation session.
"""
from typing import Any, Dict, Iterable, List, Optional, Union
from pathlib import Path
import json

from minseek_toolbox.metrics_complexity import CostRecord

THINKING = "thinking"
FINALIZING = "finalizing"
ANSWERING = "answering"
DONE = "done"
PHASE_ORDER = (THINKING, FINALIZING, ANSWERING, DONE)

TOKEN_EMITTED = "TokenEmitted"
TERMINAL_EVENTS = ("Done", "Truncated")
STRUCTURAL_EVENTS = (
    "Phase",
    "Materialized",
    "CacheState",
    "Injected",
    "ThinkEnd",
    "SegmentCommitted",
    "MinRuleDecision",
    "Evicted",
    "MissingThinkEnd",
    "AnswerStart",
    "Truncated",
    "Done",
)


class GenerationTrace:
    """Ordered event records plus per-step cost records.

    Events are dicts {"event": name, ...fields} with fields in emission order.
    Sequence numbers are assigned when the trace is serialized, so a trace
    written without TokenEmitted records is numbered densely. Cost records are
    kept in memory only; they carry wall times and would break byte-identical
    trace files.
    """

    def __init__(self, keep_tokens: bool = True):
        self.keep_tokens = keep_tokens
        self.events: List[Dict[str, Any]] = []
        self.costs: List[CostRecord] = []

    def emit(self, event: str, **fields: Any) -> None:
        if event == TOKEN_EMITTED:
            if not self.keep_tokens:
                return
        elif event not in STRUCTURAL_EVENTS:
            raise ValueError(f"unknown trace event {event!r}")
        record = {"event": event}
        record.update(fields)
        self.events.append(record)

    def add_cost(self, record: CostRecord) -> None:
        self.costs.append(record)

    def structural(self) -> List[Dict[str, Any]]:
        return [e for e in self.events if e["event"] != TOKEN_EMITTED]

    def of_kind(self, event: str) -> List[Dict[str, Any]]:
        return [e for e in self.events if e["event"] == event]

    @property
    def terminal(self) -> Optional[Dict[str, Any]]:
        if self.events and self.events[-1]["event"] in TERMINAL_EVENTS:
            return self.events[-1]
        return None

    def to_jsonl(self, include_tokens: bool = False) -> str:
        """One JSON object per line: {"seq", "event", ...fields}."""
        events = self.events if include_tokens else self.structural()
        lines = []
        for seq, event in enumerate(events):
            record = {"seq": seq}
            record.update(event)
            lines.append(json.dumps(record))
        return "".join(line + "\n" for line in lines)

    def write(self, path: Union[str, Path], include_tokens: bool = False) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(include_tokens=include_tokens))
        return path

    @classmethod
    def from_jsonl(cls, text: str) -> "GenerationTrace":
        trace = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            record.pop("seq", None)
            trace.events.append(record)
        return trace

    @classmethod
    def read(cls, path: Union[str, Path]) -> "GenerationTrace":
        return cls.from_jsonl(Path(path).read_text())


def replay_phases(events: Iterable[Dict[str, Any]]) -> List[str]:
    """Replay structural events against the phase machine.

    Allowed transitions are thinking -> finalizing -> answering -> done, with
    Done ending the answering phase and Truncated ending any phase.

    Args:
        events: trace records in order.

    Returns:
        The visited phases, ending in "done" or "truncated".
    """
    phases: List[str] = []
    finished = False
    for event in events:
        name = event["event"]
        if name == TOKEN_EMITTED:
            continue
        if finished:
            raise ValueError(f"event {name} after the trace ended")
        if name == "Phase":
            phase = event["phase"]
            expected = PHASE_ORDER[len(phases)] if len(phases) < len(PHASE_ORDER) else None
            if phase != expected:
                raise ValueError(
                    "illegal phase transition {} -> {}".format(
                        phases[-1] if phases else "start", phase
                    )
                )
            phases.append(phase)
        elif name == "Done":
            if not phases or phases[-1] != ANSWERING:
                raise ValueError("Done outside the answering phase")
            phases.append(DONE)
            finished = True
        elif name == "Truncated":
            phases.append("truncated")
            finished = True
        elif not phases:
            raise ValueError(f"event {name} before the thinking phase started")
    if not finished:
        raise ValueError("trace does not end in Done or Truncated")
    return phases
