"""Coverage-guided evolutionary loop with an optional gradient mutator.

One trial is single-threaded and fully determined by (target, seeds,
config). Time is virtual: each execution costs its ``exec_cost`` plus any
configured transmission overhead, and each model (re)training costs
``train_cost``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import smoothing
from .coverage import METRIC_ID, Case, CoverageCache, aggregate, reduce, replay_coverage
from .errors import ConfigError, InsufficientDataError
from .smoothing import PatternConfig, RetrainPolicy, TrainConfig
from .target import CrashSignature, ExecResult, Target, execute, get_target

log = logging.getLogger(__name__)

SOURCES = ("seed", "havoc", "ml")
MODES = ("havoc-only", "nps", "nps+havoc")


# -- havoc -----------------------------------------------------------------

def flip_bit(buf: bytearray, rng: random.Random, max_len: int):
    pos = rng.randrange(len(buf))
    buf[pos] ^= 1 << rng.randrange(8)


def set_random_byte(buf: bytearray, rng: random.Random, max_len: int):
    buf[rng.randrange(len(buf))] = rng.randrange(256)


def arith_byte(buf: bytearray, rng: random.Random, max_len: int):
    pos = rng.randrange(len(buf))
    delta = rng.randint(1, 35)
    if rng.random() < 0.5:
        delta = -delta
    buf[pos] = (buf[pos] + delta) % 256


def duplicate_chunk(buf: bytearray, rng: random.Random, max_len: int):
    src = rng.randrange(len(buf))
    n = rng.randint(1, len(buf) - src)
    dst = rng.randrange(len(buf) + 1)
    buf[dst:dst] = buf[src:src + n]
    del buf[max_len:]


def delete_chunk(buf: bytearray, rng: random.Random, max_len: int):
    if len(buf) < 2:
        return
    pos = rng.randrange(len(buf))
    n = rng.randint(1, len(buf) - pos)
    if n == len(buf):
        n -= 1
    del buf[pos:pos + n]


def insert_random_chunk(buf: bytearray, rng: random.Random, max_len: int):
    pos = rng.randrange(len(buf) + 1)
    n = rng.randint(1, 32)
    buf[pos:pos] = bytes(rng.randrange(256) for _ in range(n))
    del buf[max_len:]


HAVOC_OPS = (flip_bit, set_random_byte, arith_byte, duplicate_chunk, delete_chunk, insert_random_chunk)


def havoc(data: bytes, rng: random.Random, bounds: tuple[int, int] = (1, 16), max_len: int = 1 << 16,
          ops: Sequence[Callable] = HAVOC_OPS) -> bytes:
    """Chain a random number of randomly chosen atomic mutations."""
    if not data:
        raise ValueError("havoc needs a non-empty input")
    buf = bytearray(data[:max_len])
    for _ in range(rng.randint(*bounds)):
        rng.choice(ops)(buf, rng, max_len)
    return bytes(buf)


# -- small predicates ------------------------------------------------------

def is_interesting(result: ExecResult, global_edges: set[int]) -> bool:
    return not result.edges_hit <= global_edges


def dedup_crash(signature: CrashSignature, seen: set) -> bool:
    key = tuple(signature.frames)
    if key in seen:
        return False
    seen.add(key)
    return True


def apply_overhead(exec_cost: float, overhead_per_exec: float) -> float:
    """Virtual time consumed by one execution."""
    if overhead_per_exec < 0:
        raise ConfigError("overhead_per_exec must be >= 0")
    return exec_cost + overhead_per_exec


# -- configuration and report ------------------------------------------------

@dataclass(frozen=True)
class FuzzConfig:
    seed: int = 0
    budget: float = 10_000
    mode: str = "havoc-only"
    havoc_bounds: tuple[int, int] = (1, 16)
    havoc_per_round: int = 32
    ml_ratio: int = 4  # havoc rounds per ML round in nps+havoc
    ml_edges_per_seed: int = 2
    k: int = 500
    chunk_max: int = 32
    overhead_per_exec: float = 0.0
    train_cost: float = 100.0
    retrain: RetrainPolicy = RetrainPolicy()
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        lo, hi = self.havoc_bounds
        if not 1 <= lo <= hi:
            raise ConfigError("havoc_bounds must satisfy 1 <= lo <= hi")
        if self.overhead_per_exec < 0 or self.k < 1 or self.havoc_per_round < 1 or self.ml_ratio < 0:
            raise ConfigError("invalid fuzz config")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FuzzConfig":
        d = dict(d)
        if "retrain" in d:
            d["retrain"] = RetrainPolicy(**d["retrain"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "havoc_bounds" in d:
            d["havoc_bounds"] = tuple(d["havoc_bounds"])
        return cls(**d)

    def digest(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CorpusEntry:
    id: str
    data: bytes
    edges_hit: frozenset[int]
    source: str
    parent: Optional[str]
    time: float
    new_edges: int

    def to_dict(self):
        return {
            "id": self.id,
            "data": self.data.hex(),
            "edges": sorted(self.edges_hit),
            "source": self.source,
            "parent": self.parent,
            "time": self.time,
            "new_edges": self.new_edges,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], bytes.fromhex(d["data"]), frozenset(d["edges"]), d["source"], d["parent"],
                   d["time"], d["new_edges"])


@dataclass
class TrialReport:
    target: str
    config: dict
    config_hash: str
    coverage_series: list[tuple[float, int]]
    corpus: list[CorpusEntry]
    crashes: list[dict]
    unique_crashes: list[list[int]]
    final_edges: list[int]
    executions: int
    final_time: float
    model_history: list[dict] = field(default_factory=list)
    ml_batches: int = 0
    metric_id: str = METRIC_ID
    attribution: dict = field(default_factory=dict)
    ml_stats: dict = field(default_factory=dict)

    @property
    def final_coverage(self) -> int:
        return len(self.final_edges)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["corpus"] = [e.to_dict() for e in self.corpus]
        d["coverage_series"] = [list(p) for p in self.coverage_series]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrialReport":
        d = dict(d)
        d["corpus"] = [CorpusEntry.from_dict(e) for e in d["corpus"]]
        d["coverage_series"] = [tuple(p) for p in d["coverage_series"]]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrialReport":
        return cls.from_dict(json.loads(text))

    def series_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "edges"])
        w.writerows(self.coverage_series)
        return buf.getvalue()

    def write_corpus(self, directory) -> Path:
        """One file per entry, named ``{id}_{source}_{parent}``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for e in self.corpus:
            (directory / f"{e.id}_{e.source}_{e.parent or 'none'}").write_bytes(e.data)
        return directory


def read_corpus_dir(directory) -> list[Case]:
    return [Case(p.name, p.read_bytes()) for p in sorted(Path(directory).iterdir()) if p.is_file()]


# -- the loop ---------------------------------------------------------------

class _Budget(Exception):
    pass


class Trial:
    """State of one running trial; use :func:`run_trial`."""

    def __init__(self, target: Target, seeds: Sequence[bytes], config: FuzzConfig):
        if not seeds:
            raise ConfigError("at least one initial seed is required")
        self.target = target
        self.seeds = [bytes(s) for s in seeds]
        self.cfg = config
        self.rng = random.Random(config.seed)
        self.np_rng = np.random.default_rng(config.seed)
        self.pattern = PatternConfig(chunk_max=config.chunk_max, max_input_len=target.max_input_len)
        self.step_cost = apply_overhead(1, config.overhead_per_exec)

        self.corpus: list[CorpusEntry] = []
        self.global_edges: set[int] = set()
        self.seen_crashes: set = set()
        self.crashes: list[dict] = []
        self.unique_crashes: list[list[int]] = []
        self.series: list[tuple[float, int]] = []
        self.vtime = 0.0
        self.execs = 0

        self.cursor = 0
        self.boost: deque[CorpusEntry] = deque()
        self.cache = CoverageCache()
        self.model: Optional[smoothing.CoverageModel] = None
        self.bitmap = None
        self.trained_at = 0.0
        self.added_since_training = 0
        self.trainings = 0
        self.model_history: list[dict] = []
        self.ml_batches = 0

    def _exec(self, data: bytes, source: str, parent: Optional[str], check_budget=True):
        if check_budget and self.vtime >= self.cfg.budget:
            raise _Budget
        res = execute(self.target, data)
        self.vtime += apply_overhead(res.exec_cost, self.cfg.overhead_per_exec)
        self.execs += 1
        if res.crash is not None:
            new = dedup_crash(res.crash, self.seen_crashes)
            if new:
                self.unique_crashes.append(list(res.crash.frames))
            self.crashes.append({
                "time": self.vtime, "signature": list(res.crash.frames), "input": bytes(data).hex(),
                "source": source, "parent": parent, "new": new,
            })
            if source != "seed":
                return None
        if source == "seed" or is_interesting(res, self.global_edges):
            new_edges = len(res.edges_hit - self.global_edges)
            entry = CorpusEntry(f"{len(self.corpus):06d}", bytes(data[: self.target.max_input_len]),
                                res.edges_hit, source, parent, self.vtime, new_edges)
            self.corpus.append(entry)
            self.cache.put(entry.id, res.edges_hit)
            self.global_edges |= res.edges_hit
            self.added_since_training += 1
            if new_edges and source != "seed":
                self.boost.append(entry)
                self.series.append((self.vtime, len(self.global_edges)))
            return entry
        return None

    def _next_entry(self) -> CorpusEntry:
        if self.boost:
            return self.boost.popleft()
        entry = self.corpus[self.cursor % len(self.corpus)]
        self.cursor += 1
        return entry

    def _maybe_train(self):
        if not smoothing.should_retrain(self.cfg.retrain, len(self.corpus), self.added_since_training,
                                        self.vtime - self.trained_at, self.model is not None):
            return
        cases = [Case(e.id, e.data) for e in self.corpus]
        bitmap = reduce(aggregate(cases, self.target, self.cache))
        input_len = min(max(len(e.data) for e in self.corpus), self.target.max_input_len)
        tcfg = dataclasses.replace(self.cfg.train, seed=self.cfg.train.seed + self.cfg.seed * 1000 + self.trainings)
        try:
            model, metrics = smoothing.train(bitmap, [e.data for e in self.corpus], tcfg, input_len)
        except InsufficientDataError as exc:
            log.debug("skipping training: %s", exc)
            return
        self.model, self.bitmap = model, bitmap
        self.trainings += 1
        self.vtime += self.cfg.train_cost
        self.trained_at = self.vtime
        self.added_since_training = 0
        self.model_history.append({
            "time": self.vtime,
            "corpus_size": len(cases),
            "columns": bitmap.num_columns,
            "input_len": input_len,
            "final_loss": model.loss_history[-1] if model.loss_history else None,
            "metrics": {k: v for k, v in metrics.as_dict().items() if k != "per_edge"},
        })

    def _ml_round(self, entry: CorpusEntry):
        training_edges = self.bitmap.edges()
        for col in smoothing.select_target_edges(self.bitmap, self.cfg.ml_edges_per_seed, self.np_rng):
            group = self.bitmap.edge_index[col]
            # the model can only aim at edges the training corpus already covers
            if not (col < self.model.num_outputs and set(group) <= training_edges):
                raise AssertionError(f"ML batch targets column {col} {group} outside the training bitmap")
            self.ml_batches += 1
            plan = smoothing.plan_mutations(self.model, entry.data, col, self.cfg.k, self.np_rng, self.pattern)
            for cand in plan.generated_inputs:
                self._exec(cand, "ml", entry.id)

    def _havoc_round(self, entry: CorpusEntry):
        for _ in range(self.cfg.havoc_per_round):
            cand = havoc(entry.data, self.rng, self.cfg.havoc_bounds, self.target.max_input_len)
            self._exec(cand, "havoc", entry.id)

    def run(self) -> TrialReport:
        for s in self.seeds:
            self._exec(s, "seed", None, check_budget=False)
        self.added_since_training = len(self.corpus)
        self.series.append((self.vtime, len(self.global_edges)))
        nps = self.cfg.mode != "havoc-only"
        rounds = 0
        try:
            while self.vtime < self.cfg.budget:
                if nps:
                    self._maybe_train()
                entry = self._next_entry()
                ml_turn = self.cfg.mode == "nps" or rounds % (self.cfg.ml_ratio + 1) == self.cfg.ml_ratio
                if nps and self.model is not None and ml_turn:
                    self._ml_round(entry)
                else:
                    self._havoc_round(entry)
                rounds += 1
        except _Budget:
            pass
        if self.series[-1][0] != self.vtime:
            self.series.append((self.vtime, len(self.global_edges)))
        return self._report()

    def _report(self) -> TrialReport:
        report = TrialReport(
            target=self.target.name,
            config=self.cfg.to_dict(),
            config_hash=self.cfg.digest(),
            coverage_series=self.series,
            corpus=self.corpus,
            crashes=self.crashes,
            unique_crashes=self.unique_crashes,
            final_edges=sorted(replay_coverage(self.corpus, self.target)[0]),
            executions=self.execs,
            final_time=self.vtime,
            model_history=self.model_history,
            ml_batches=self.ml_batches,
        )
        report.attribution = {src: attribute_coverage(report, src, self.target) for src in SOURCES}
        report.attribution["all"] = attribute_coverage(report, None, self.target)
        report.ml_stats = dict(zip(("ml_pct", "ml_cov_plus_pct", "derived_pct"), ml_seed_stats(report)))
        return report


def run_trial(target: Target, seeds: Sequence[bytes], config: FuzzConfig) -> TrialReport:
    return Trial(target, seeds, config).run()


# -- report analyses ---------------------------------------------------------

def attribute_coverage(report: TrialReport, sources: str | Iterable[str] | None = None,
                       target: Target | None = None) -> int:
    """Replay coverage of the corpus entries whose source is in ``sources`` (None: all)."""
    if isinstance(sources, str):
        sources = {sources}
    target = target or get_target(report.target)
    chosen = [e for e in report.corpus if sources is None or e.source in sources]
    return replay_coverage(chosen, target)[1]


def ml_seed_stats(report: TrialReport) -> tuple[float, float, float]:
    """(% ML entries, % of ML entries that added coverage, % entries descended from ML), in percent."""
    n = len(report.corpus)
    if n == 0:
        return 0.0, 0.0, 0.0
    by_id = {e.id: e for e in report.corpus}
    ml = [e for e in report.corpus if e.source == "ml"]
    ml_cov = sum(1 for e in ml if e.new_edges > 0)

    derived_memo: dict[str, bool] = {}

    def descends_from_ml(entry: CorpusEntry) -> bool:
        chain = []
        cur = entry
        result = False
        while cur.parent is not None:
            if cur.id in derived_memo:
                result = derived_memo[cur.id]
                break
            chain.append(cur.id)
            parent = by_id[cur.parent]
            if parent.source == "ml":
                result = True
                break
            cur = parent
        for cid in chain:
            derived_memo[cid] = result
        return result

    derived = sum(1 for e in report.corpus if descends_from_ml(e))
    return 100.0 * len(ml) / n, (100.0 * ml_cov / len(ml) if ml else 0.0), 100.0 * derived / n


def edge_intersection(a: TrialReport, b: TrialReport) -> tuple[int, int, int, int, int]:
    if a.target != b.target:
        raise ConfigError(f"reports come from different targets: {a.target} vs {b.target}")
    ea, eb = set(a.final_edges), set(b.final_edges)
    return len(ea), len(eb), len(ea | eb), len(ea - eb), len(eb - ea)
