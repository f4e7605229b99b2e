"""
Versioned JSON configuration for models, policy grids and scripted fixtures.
"""
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union
from dataclasses import dataclass, field, fields
from pathlib import Path
import json
import logging
import os

from minseek_toolbox.controller import (
    DEFAULT_TOKEN_LIMIT,
    Method,
    ScalingPolicy,
    ScriptedSource,
    parse_max_rc,
)
from minseek_toolbox.data import synthetic_prompt
from minseek_toolbox.model import ModelConfig, SamplingConfig, Sentinels

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "MINSEEK_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "minseek_output"
MODES = ("run", "validate", "bench", "compare")
DEFAULT_MAX_RC_GRID = (0, 2, 4, 6, 10, 20, 50, 100, None)
COMPARE_MAX_RC_GRID = (0, 10, 20)

PathOrDict = Union[str, Path, Mapping[str, Any]]


class ConfigError(ValueError):
    """A configuration file is malformed, has unknown keys or bad values."""


def _check_keys(obj: Mapping[str, Any], allowed: Sequence[str], where: str) -> None:
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _check_version(obj: Mapping[str, Any], where: str) -> None:
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"{where}: schema_version must be {SCHEMA_VERSION}, got {version!r}"
        )


def _load(source: PathOrDict) -> Tuple[Dict[str, Any], Optional[Path]]:
    if isinstance(source, Mapping):
        return dict(source), None
    path = Path(source)
    try:
        return json.loads(path.read_text()), path.parent
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err


def _names(cls) -> List[str]:
    return [f.name for f in fields(cls)]


def model_config_from_dict(obj: Mapping[str, Any], where: str = "model") -> ModelConfig:
    _check_keys(obj, _names(ModelConfig), where)
    values = dict(obj)
    if "sentinel_tokens" in values:
        sentinels = values["sentinel_tokens"]
        _check_keys(sentinels, _names(Sentinels), f"{where}.sentinel_tokens")
        values["sentinel_tokens"] = Sentinels(**sentinels)
    try:
        return ModelConfig(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def load_model_config(source: PathOrDict) -> ModelConfig:
    """Read {"schema_version": 1, "model": {...}}."""
    obj, _ = _load(source)
    _check_keys(obj, ["schema_version", "model"], "model config")
    _check_version(obj, "model config")
    return model_config_from_dict(obj.get("model", {}))


@dataclass(frozen=True)
class PolicyDefaults:
    token_limit: int = DEFAULT_TOKEN_LIMIT
    segment_cap: int = 32
    retained_rc_max: int = 1
    position_mode: str = "contiguous"


@dataclass(frozen=True)
class GridConfig:
    """Methods x variants x M values; standard and Budget Forcing ignore variants."""

    methods: Tuple[str, ...] = ("minseek",)
    variants: Tuple[int, ...] = (2,)
    max_rc: Tuple[Optional[int], ...] = DEFAULT_MAX_RC_GRID

    def policies(self, defaults: PolicyDefaults = PolicyDefaults()) -> List[ScalingPolicy]:
        out: List[ScalingPolicy] = []
        for method in self.methods:
            method = Method(method)
            if method is Method.STANDARD:
                cells = [(2, 0)]
            elif method is Method.BUDGET:
                cells = [(2, m) for m in self.max_rc]
            else:
                cells = [(v, m) for v in self.variants for m in self.max_rc]
            for variant, max_rc in cells:
                policy = ScalingPolicy(
                    method=method,
                    variant=variant,
                    max_rc=max_rc,
                    token_limit=defaults.token_limit,
                    segment_cap=defaults.segment_cap,
                    retained_rc_max=defaults.retained_rc_max,
                    position_mode=defaults.position_mode,
                )
                if policy not in out:
                    out.append(policy)
        return out


@dataclass(frozen=True)
class BenchConfig:
    cycles: int = 100
    thought_len: int = 16
    compare_max_rc: Tuple[Optional[int], ...] = COMPARE_MAX_RC_GRID

    def __post_init__(self):
        if self.cycles < 1 or self.thought_len < 1:
            raise ValueError("cycles and thought_len must be at least 1")


@dataclass(frozen=True)
class ScriptConfig:
    thoughts: Tuple[Tuple[int, bool], ...]
    answer_len: int = 3

    def source(self, model: ModelConfig) -> ScriptedSource:
        return ScriptedSource(
            self.thoughts, self.answer_len, model.sentinel_tokens, model.vocab_size
        )


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    output_dir: Path = Path(DEFAULT_OUTPUT_DIR)
    mode: str = "run"
    prompts: Tuple[Tuple[int, ...], ...] = ()
    grid: GridConfig = field(default_factory=GridConfig)
    policy: PolicyDefaults = field(default_factory=PolicyDefaults)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    checked: bool = False
    script: Optional[ScriptConfig] = None
    workers: int = 1
    bench: BenchConfig = field(default_factory=BenchConfig)

    def prompt_list(self) -> List[List[int]]:
        if self.prompts:
            return [list(p) for p in self.prompts]
        return [
            synthetic_prompt(
                8, self.seed, self.model.vocab_size, self.model.sentinel_tokens
            )
        ]

    def policies(self) -> List[ScalingPolicy]:
        return self.grid.policies(self.policy)


def check_policies(config: RunConfig) -> List[ScalingPolicy]:
    """Build the grid's policies, reporting invalid values as ConfigError."""
    try:
        return config.policies()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"policy: {err}") from err


RUN_KEYS = [
    "schema_version",
    "model_config",
    "seed",
    "output_dir",
    "mode",
    "prompts",
    "grid",
    "policy",
    "sampling",
    "checked",
    "script",
    "workers",
    "bench",
]


def script_from_dict(obj: Mapping[str, Any], where: str = "script") -> ScriptConfig:
    _check_keys(obj, ["schema_version", "thoughts", "answer_len"], where)
    if "schema_version" in obj:
        _check_version(obj, where)
    try:
        thoughts = tuple((int(n), bool(t)) for n, t in obj["thoughts"])
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"{where}: thoughts must be [[length, terminates], ...]") from err
    return ScriptConfig(thoughts=thoughts, answer_len=int(obj.get("answer_len", 3)))


def load_script(source: PathOrDict) -> ScriptConfig:
    """Read {"schema_version": 1, "thoughts": [[n, true], ...], "answer_len": n}."""
    obj, _ = _load(source)
    _check_version(obj, "script")
    return script_from_dict(obj)


def resolve_output_dir(flag: Optional[str] = None, file_value: Optional[str] = None) -> Path:
    """CLI flag, then config file, then $MINSEEK_OUTPUT_DIR, then the default."""
    for value in (flag, file_value, os.environ.get(OUTPUT_DIR_ENV)):
        if value:
            return Path(value)
    return Path(DEFAULT_OUTPUT_DIR)


def load_run_config(source: Optional[PathOrDict] = None) -> RunConfig:
    """Read and validate a run configuration.

    Args:
        source: path to a JSON file, an already parsed dict, or None for the
            defaults.

    Returns:
        The validated RunConfig. Relative model and script paths are resolved
        against the config file's directory.
    """
    if source is None:
        return RunConfig(output_dir=resolve_output_dir())
    obj, base = _load(source)
    _check_keys(obj, RUN_KEYS, "run config")
    _check_version(obj, "run config")

    def resolve(value):
        path = Path(value)
        return path if base is None or path.is_absolute() else base / path

    model = ModelConfig()
    if "model_config" in obj:
        value = obj["model_config"]
        if isinstance(value, Mapping):
            model = model_config_from_dict(value, "model_config")
        else:
            model = load_model_config(resolve(value))

    mode = obj.get("mode", "run")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")

    grid = GridConfig()
    if "grid" in obj:
        _check_keys(obj["grid"], _names(GridConfig), "grid")
        g = obj["grid"]
        try:
            grid = GridConfig(
                methods=tuple(Method(m).value for m in g.get("methods", grid.methods)),
                variants=tuple(int(v) for v in g.get("variants", grid.variants)),
                max_rc=tuple(parse_max_rc(m) for m in g.get("max_rc", grid.max_rc)),
            )
        except ValueError as err:
            raise ConfigError(f"grid: {err}") from err

    policy = PolicyDefaults()
    if "policy" in obj:
        _check_keys(obj["policy"], _names(PolicyDefaults), "policy")
        try:
            policy = PolicyDefaults(**obj["policy"])
        except TypeError as err:
            raise ConfigError(f"policy: {err}") from err

    sampling = SamplingConfig()
    if "sampling" in obj:
        _check_keys(obj["sampling"], _names(SamplingConfig), "sampling")
        s = dict(obj["sampling"])
        try:
            s["logit_bias"] = {int(k): float(v) for k, v in s.get("logit_bias", {}).items()}
            sampling = SamplingConfig(**s)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"sampling: {err}") from err

    bench = BenchConfig()
    if "bench" in obj:
        _check_keys(obj["bench"], _names(BenchConfig), "bench")
        b = dict(obj["bench"])
        try:
            if "compare_max_rc" in b:
                b["compare_max_rc"] = tuple(parse_max_rc(m) for m in b["compare_max_rc"])
            bench = BenchConfig(**b)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bench: {err}") from err

    script = None
    if "script" in obj:
        value = obj["script"]
        if isinstance(value, Mapping):
            script = script_from_dict(value)
        else:
            script = load_script(resolve(value))

    try:
        workers = int(obj.get("workers", 1))
        seed = int(obj.get("seed", 0))
        prompts = tuple(tuple(int(t) for t in p) for p in obj.get("prompts", ()))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"run config: {err}") from err
    if workers < 1:
        raise ConfigError("workers must be at least 1")

    config = RunConfig(
        model=model,
        seed=seed,
        output_dir=resolve_output_dir(file_value=obj.get("output_dir")),
        mode=mode,
        prompts=prompts,
        grid=grid,
        policy=policy,
        sampling=sampling,
        checked=bool(obj.get("checked", False)),
        script=script,
        workers=workers,
        bench=bench,
    )
    check_policies(config)
    logger.debug("loaded run config: %s", config)
    return config
