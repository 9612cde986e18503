"""Tests for the `config` module."""

import re
import tomllib
from pathlib import Path

import pytest
from omegaconf import DictConfig, OmegaConf

from offload_bridge.config import (
    BridgeConfig,
    load_config,
    parse_endpoint,
    read_info_file,
)
from offload_bridge.constants import DEFAULT_BATCH_BYTES
from offload_bridge.errors import ArgumentError


def test_defaults(config: BridgeConfig) -> None:
    """Without a file or overrides the dataclass defaults apply."""
    assert config.server.num_workers == 4
    assert config.client.batch_bytes == DEFAULT_BATCH_BYTES
    assert config.client.rows_per_message is None
    assert config.mathlib.gemm_streaming


def test_file_then_overrides(tmp_path: Path) -> None:
    """Overrides are merged on top of the YAML file."""
    path = tmp_path / "bridge.yaml"
    path.write_text(
        "server:\n  num_workers: 6\n  plugins: [tests.test_library:echo_plugin]\n"
        "comm:\n  transport: queue\n"
    )
    config = load_config(path, ["server.num_workers=3", "client.rows_per_message=1"])
    assert config.server.num_workers == 3
    assert config.server.plugins == ["tests.test_library:echo_plugin"]
    assert config.comm.transport == "queue"
    assert config.client.rows_per_message == 1


@pytest.mark.parametrize(
    "override",
    [
        "server.num_workers=0",
        "server.num_workers=many",
        "server.colour=red",
        "comm.transport=carrier_pigeon",
        "comm.timeout_s=0",
        "client.batch_bytes=4",
        "client.rows_per_message=0",
    ],
)
def test_invalid_values(override: str) -> None:
    """Unknown keys, ill-typed values and out-of-range values are argument errors."""
    with pytest.raises(ArgumentError):
        load_config(overrides=[override])


def test_missing_file(tmp_path: Path) -> None:
    """A config file that does not exist is reported as such."""
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.yaml")


def test_parse_endpoint() -> None:
    """The port is the part after the last colon."""
    assert parse_endpoint("node-7.cluster:9000") == ("node-7.cluster", 9000)
    for bad in ("localhost", ":9000", "host:port"):
        with pytest.raises(ArgumentError):
            parse_endpoint(bad)


def test_read_info_file(tmp_path: Path) -> None:
    """Info files hold hostname, address and port on separate lines."""
    path = tmp_path / "bridge.info"
    path.write_text("node-7\n10.0.0.7\n24960\n")
    assert read_info_file(path) == ("10.0.0.7", 24960)
    path.write_text("node-7\n")
    with pytest.raises(ArgumentError):
        read_info_file(path)


def test_config_library_is_a_declared_dependency() -> None:
    """The library configs are built with is declared in the manifest itself."""
    manifest = Path(__file__).parents[1] / "pyproject.toml"
    with manifest.open("rb") as f:
        dependencies = tomllib.load(f)["project"]["dependencies"]
    names = {re.split(r"[<>=!~ \[]", dep, maxsplit=1)[0] for dep in dependencies}
    assert "omegaconf" in names
    assert isinstance(OmegaConf.structured(BridgeConfig), DictConfig)
