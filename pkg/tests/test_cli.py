"""
Tests for the command-line entry point.
"""

from pathlib import Path

import pytest

from minseek_toolbox import cli
from minseek_toolbox.cache import CacheConsistencyError
from minseek_toolbox.cli import build_parser, config_from_args, main
from minseek_toolbox.model import PositionOverflowError

CONFIGS = Path(__file__).parent.parent / "configs"


def test_parser_rejects_unknown_mode():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train"])


def test_config_from_args_overrides():
    """Test that flags override the config file."""
    args = build_parser().parse_args(
        [
            "validate",
            "--config",
            str(CONFIGS / "example_run.json"),
            "--method",
            "budget",
            "--max-rc",
            "inf",
            "--segment-cap",
            "8",
            "--token-limit",
            "64",
            "--seed",
            "5",
        ]
    )
    config = config_from_args(args)
    assert config.mode == "validate" and config.seed == 5
    (policy,) = config.policies()
    assert policy.label == "budget-minf"
    assert (policy.segment_cap, policy.token_limit) == (8, 64)


def test_main_run(tmp_path):
    config = str(CONFIGS / "example_run.json")
    code = main(["run", "--config", config, "--output-dir", str(tmp_path), "--quiet"])
    assert code == 0
    assert len(list((tmp_path / "traces").glob("*.jsonl"))) == 9


def test_main_run_trace_out(tmp_path):
    target = tmp_path / "one.jsonl"
    code = main(
        [
            "run",
            "--config",
            str(CONFIGS / "example_run.json"),
            "--method",
            "minseek",
            "--variant",
            "2",
            "--max-rc",
            "2",
            "--trace-out",
            str(target),
            "--quiet",
        ]
    )
    assert code == 0
    assert target.read_text().count("\n") == 26


def test_main_validate_exit_codes(tmp_path):
    """Test exit status 0 on agreement and 1 when the oracle disagrees."""
    base = ["validate", "--config", str(CONFIGS / "example_run.json"), "--quiet"]
    base += ["--output-dir", str(tmp_path)]
    assert main(base) == 0
    assert main(base + ["--max-rc", "2", "--fault", "skip_rematerialize"]) == 1


def test_main_rejects_static_bound(tmp_path, capsys):
    args = ["run", "--method", "budget", "--max-rc", "10", "--quiet"]
    code = main(args + ["--output-dir", str(tmp_path)])
    assert code == 2
    assert "max_context_length" in capsys.readouterr().err


def test_main_rejects_bad_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema_version": 1, "sed": 0}')
    assert main(["run", "--config", str(path), "--quiet"]) == 2


@pytest.mark.parametrize(
    "flags",
    [
        ["--segment-cap", "0"],
        ["--max-rc", "-3"],
        ["--max-rc", "many"],
        ["--variant", "1", "--token-limit", "0"],
        ["--workers", "0"],
    ],
)
def test_main_rejects_bad_values(tmp_path, capsys, flags):
    """Test that invalid override values exit with status 2 and a message."""
    code = main(["run", "--output-dir", str(tmp_path), "--quiet"] + flags)
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


def test_main_rejects_bad_policy_in_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema_version": 1, "policy": {"segment_cap": 1}}')
    assert main(["run", "--config", str(path), "--quiet"]) == 2


@pytest.mark.parametrize(
    "error",
    [
        CacheConsistencyError("layer 1: k_t does not match rope(k_t_no_pos, 3)"),
        PositionOverflowError("position id 128 reaches max_context_length 128"),
    ],
)
def test_main_validate_reports_cache_errors(tmp_path, capsys, monkeypatch, error):
    """Test that a cache error while validating fails with status 1."""

    def failing(config, fault=None, verbose=True):
        raise error

    monkeypatch.setattr(cli, "cmd_validate", failing)
    code = main(["validate", "--output-dir", str(tmp_path), "--quiet"])
    assert code == 1
    assert str(error) in capsys.readouterr().err
