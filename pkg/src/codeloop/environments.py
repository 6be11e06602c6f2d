"""Execution environment manifests and shim command resolution.

A manifest is a text file of pinned requirement lines naming one library
set; jobs carry the manifest id and the runner shim is launched from an
environment built to match. Environments are pre-built once and reused
across problems (building per attempt would dominate the runtime); the
cache key is the manifest name. The ``local`` manifest is special: it runs
jobs in this interpreter with no pins enforced.
"""

from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

from codeloop.executor import EnvironmentFailure

LOCAL_MANIFEST = "local"


def load_manifest(manifest_id: str, envs_dir: str | Path | None = None) -> list[str]:
    """Pinned requirement lines for a manifest; comments and blanks dropped."""
    if envs_dir is not None:
        path = Path(envs_dir) / f"{manifest_id}.txt"
        if not path.exists():
            raise EnvironmentFailure(f"no environment manifest {manifest_id!r} in {envs_dir}")
        raw = path.read_text(encoding="utf-8")
    else:
        ref = resources.files("codeloop").joinpath(f"envs/{manifest_id}.txt")
        if not ref.is_file():
            raise EnvironmentFailure(f"unknown environment manifest {manifest_id!r}")
        raw = ref.read_text(encoding="utf-8")
    return [
        line.strip()
        for line in raw.splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]


def resolve_python(manifest_id: str, builds_dir: str | Path | None = None) -> str:
    """Interpreter for a manifest: this one for ``local``, else the
    pre-built virtualenv under ``builds_dir``."""
    if manifest_id == LOCAL_MANIFEST:
        return sys.executable
    load_manifest(manifest_id)  # unknown manifests fail before path checks
    if builds_dir is None:
        raise EnvironmentFailure(
            f"manifest {manifest_id!r} needs a pre-built environment; "
            "no builds directory is configured"
        )
    python = Path(builds_dir) / manifest_id / "bin" / "python"
    if not python.exists():
        raise EnvironmentFailure(
            f"environment for manifest {manifest_id!r} is not built "
            f"(expected {python}); create a virtualenv there and install the "
            "manifest's pins"
        )
    return str(python)


def shim_command(
    manifest_id: str,
    shim_cmd: list[str] | None = None,
    builds_dir: str | Path | None = None,
) -> list[str]:
    """The argv used to launch the runner shim for a manifest."""
    if shim_cmd:
        return list(shim_cmd)
    return [resolve_python(manifest_id, builds_dir), "-m", "runner_shim"]
