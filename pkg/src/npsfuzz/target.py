"""In-process execution interface and synthetic instrumented targets.

A target is a pure function from input bytes to the set of edges it
traverses, plus an optional crash signature. The built-in programs are
small enough to reason about by hand, which is what makes them useful as
fixtures for the fuzzer and the model.

User-defined targets are added with :func:`register_target`::

    def run(data):
        edges = {0}
        if data[:1] == b"A":
            edges.add(1)
        return edges, None

    register_target(Target("one_letter", num_edges=2, max_input_len=8, run=run))
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class CrashSignature:
    """Ordered list of abort-site ids, used as the bug identity."""

    frames: tuple[int, ...]

    def __post_init__(self):
        if not self.frames:
            raise ValueError("crash signature needs at least one frame")

    def key(self) -> str:
        return "-".join(str(f) for f in self.frames)


@dataclass(frozen=True)
class ExecResult:
    edges_hit: frozenset[int]
    crash: Optional[CrashSignature] = None
    exec_cost: int = 1


@dataclass(frozen=True)
class TargetSpec:
    name: str
    num_edges: int
    max_input_len: int


RunFn = Callable[[bytes], "tuple[set[int], Optional[tuple[int, ...]]]"]


@dataclass(frozen=True)
class Target:
    """An in-process target.

    ``run`` receives the (already truncated) input and returns the edges
    hit and, for crashing inputs, the abort-site frames. Edge 0 is the
    entry edge and must always be reported.
    """

    name: str
    num_edges: int
    max_input_len: int
    run: RunFn = field(repr=False, compare=False)
    seed_inputs: tuple[bytes, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.num_edges < 1 or self.max_input_len < 1:
            raise ConfigError(f"target {self.name!r}: num_edges and max_input_len must be >= 1")

    @property
    def spec(self) -> TargetSpec:
        return TargetSpec(self.name, self.num_edges, self.max_input_len)


def execute(target: Target, data: bytes) -> ExecResult:
    data = bytes(data[: target.max_input_len])
    edges, frames = target.run(data)
    edges = frozenset(edges)
    if 0 not in edges or any(not 0 <= e < target.num_edges for e in edges):
        raise RuntimeError(f"target {target.name!r} reported invalid edges {sorted(edges)}")
    crash = CrashSignature(tuple(frames)) if frames else None
    return ExecResult(edges, crash, 1)


# -- built-in programs ------------------------------------------------------

def _magic_chain(data: bytes):
    edges = {0}
    frames = None
    if data[:4] == b"FUZZ":
        edges.add(1)
        if len(data) > 4 and data[4] == 0x42:
            edges.add(2)
            if len(data) > 6 and (data[5] + data[6]) % 256 == 0x99:
                edges.add(3)
                if len(data) > 7 and data[7] == 0xFF:
                    frames = (3,)
    return edges, frames


LADDER_RUNGS = 16


def ladder_value(i: int) -> int:
    """Byte value that opens rung ``i`` of ``branch_ladder``."""
    return (13 * i) % 256


def _branch_ladder(data: bytes):
    edges = {0}
    for i in range(min(LADDER_RUNGS, len(data))):
        if data[i] == ladder_value(i):
            edges.add(i + 1)
    return edges, None


def _checksum_guard(data: bytes):
    edges = {0}
    if sum(data) % 251 == 0:
        edges.add(1)
    return edges, None


_REGISTRY: dict[str, Target] = {}


def register_target(target: Target, replace: bool = False) -> Target:
    if target.name in _REGISTRY and not replace:
        raise ConfigError(f"target {target.name!r} already registered")
    _REGISTRY[target.name] = target
    return target


def get_target(name: str) -> Target:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown target {name!r}; known: {sorted(_REGISTRY)}") from None


def builtin_targets() -> list[TargetSpec]:
    return [t.spec for t in _REGISTRY.values()]


def make_seeds(target: Target, count: int, rng_seed: int = 0) -> list[bytes]:
    """Target's canonical seeds topped up with random fillers to ``count``.

    Fillers are drawn from their own generator so that every fuzzer variant
    in a campaign starts from the same seeds.
    """
    seeds = list(target.seed_inputs)[: max(count, 1)]
    rng = np.random.default_rng(rng_seed)
    base_len = max((len(s) for s in seeds), default=8)
    while len(seeds) < count:
        n = int(rng.integers(1, base_len + 1))
        seeds.append(rng.integers(0, 256, size=n, dtype=np.uint8).tobytes())
    return seeds


register_target(Target("magic_chain", 4, 64, _magic_chain, (b"FUZZ\x00\x00\x00\x00",)))
register_target(
    Target(
        "branch_ladder",
        LADDER_RUNGS + 1,
        32,
        _branch_ladder,
        # opens rungs 0-3, the remaining twelve are left for the fuzzer
        (bytes([ladder_value(i) for i in range(4)] + [1] * (LADDER_RUNGS - 4)),),
    )
)
register_target(Target("checksum_guard", 2, 32, _checksum_guard, (bytes(range(1, 9)),)))
