import sys

import pytest

from codeloop.environments import load_manifest, resolve_python, shim_command
from codeloop.executor import EnvironmentFailure


def test_local_manifest_has_no_pins():
    assert load_manifest("local") == []


def test_library_manifests_pin_their_library():
    assert any(pin.startswith("numpy==") for pin in load_manifest("numpy"))
    assert any(pin.startswith("pandas==") for pin in load_manifest("pandas"))
    assert any(pin.startswith("torch==") for pin in load_manifest("pytorch"))


def test_unknown_manifest_rejected():
    with pytest.raises(EnvironmentFailure):
        load_manifest("cobol")


def test_local_resolves_to_this_interpreter():
    assert resolve_python("local") == sys.executable


def test_prebuilt_env_resolution(tmp_path):
    python = tmp_path / "numpy" / "bin" / "python"
    python.parent.mkdir(parents=True)
    python.write_text("#!/bin/sh\n")
    assert resolve_python("numpy", builds_dir=tmp_path) == str(python)


def test_missing_prebuilt_env_is_environment_failure(tmp_path):
    with pytest.raises(EnvironmentFailure, match="not built"):
        resolve_python("numpy", builds_dir=tmp_path)


def test_explicit_shim_cmd_wins():
    assert shim_command("numpy", shim_cmd=["/x/python", "-m", "runner_shim"]) == [
        "/x/python",
        "-m",
        "runner_shim",
    ]


def test_default_shim_cmd_for_local():
    assert shim_command("local") == [sys.executable, "-m", "runner_shim"]


def test_external_manifest_dir(tmp_path):
    (tmp_path / "custom.txt").write_text("numpy==1.24.0\n# note\n\n")
    assert load_manifest("custom", envs_dir=tmp_path) == ["numpy==1.24.0"]
