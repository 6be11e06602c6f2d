"""Registry for library-specific verification adapters.

Some benchmark libraries need richer verification than shared-namespace
assertions (figure-state checks being the usual example). A test script
can register and invoke an adapter by name:

    from runner_shim import hooks
    hooks.register("figure-compare", my_checker)
    ...
    assert hooks.get("figure-compare")(namespace_value)

The shim itself never calls adapters; they are conveniences for test-suite
authors, resolved inside the job's own namespace.
"""

from __future__ import annotations

from typing import Callable

_ADAPTERS: dict[str, Callable] = {}


def register(name: str, adapter: Callable) -> None:
    _ADAPTERS[name] = adapter


def get(name: str) -> Callable:
    if name not in _ADAPTERS:
        raise KeyError(f"no verification adapter registered under {name!r}")
    return _ADAPTERS[name]
