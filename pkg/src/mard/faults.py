"""Deliberate-fault registry for verifying that the oracle gate catches
real breakage. Only `mard oracle-check --inject-fault ...` should set these.
"""

FAULT_NAMES = ("sigma", "causal-mask", "loss-mask")

_active: set[str] = set()


def inject(name: str) -> None:
    if name not in FAULT_NAMES:
        raise ValueError(f"unknown fault {name!r}; choose from {FAULT_NAMES}")
    _active.add(name)


def clear() -> None:
    _active.clear()


def active(name: str) -> bool:
    return name in _active
