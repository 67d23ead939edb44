import random
from collections import deque

import numpy as np
import pytest

from npsfuzz.engine import (CorpusEntry, FuzzConfig, Trial, TrialReport, attribute_coverage, dedup_crash,
                            edge_intersection, flip_bit, havoc, is_interesting, ml_seed_stats, read_corpus_dir,
                            run_trial)
from npsfuzz.errors import ConfigError
from npsfuzz.target import CrashSignature, ExecResult, execute, get_target

from .conftest import magic_seeds, small_nps_config


def entry(id, source, parent=None, new_edges=1, edges=(0,)):
    return CorpusEntry(id, id.encode(), frozenset(edges), source, parent, 0.0, new_edges)


def report_with(corpus, target="magic_chain", final_edges=()):
    return TrialReport(target, {}, "", [(0.0, 1)], corpus, [], [], sorted(final_edges), 0, 0.0)


# -- havoc ------------------------------------------------------------------------

def test_single_bit_flip():
    out = havoc(bytes([0b1010]), random.Random(3), (1, 1), ops=(flip_bit,))
    diff = out[0] ^ 0b1010
    assert len(out) == 1 and bin(diff).count("1") == 1


def test_flip_bit_low_bit():
    class Fixed:
        def randrange(self, n):
            return 0

    buf = bytearray([0x42])
    flip_bit(buf, Fixed(), 8)
    assert buf == bytearray([0x43])


def test_havoc_never_empty():
    rng = random.Random(0)
    for _ in range(10_000):
        out = havoc(b"\x07", rng, (1, 16), max_len=32)
        assert 1 <= len(out) <= 32


def test_havoc_deterministic():
    assert havoc(b"hello", random.Random(9)) == havoc(b"hello", random.Random(9))


def test_havoc_empty_input():
    with pytest.raises(ValueError):
        havoc(b"", random.Random(0))


# -- predicates -----------------------------------------------------------------

def test_is_interesting():
    assert is_interesting(ExecResult(frozenset({0, 1})), {0})
    assert not is_interesting(ExecResult(frozenset({0})), {0, 1})
    glob = {0}
    res = ExecResult(frozenset({0, 2}))
    assert is_interesting(res, glob)
    glob |= res.edges_hit
    assert not is_interesting(res, glob)


def test_dedup_crash():
    seen = set()
    assert dedup_crash(CrashSignature((3,)), seen)
    assert not dedup_crash(CrashSignature((3,)), seen)
    assert dedup_crash(CrashSignature((3, 7)), seen)


def test_dedup_random_signatures():
    rng = np.random.default_rng(0)
    seen, new = set(), 0
    sigs = [tuple(rng.integers(0, 4, size=rng.integers(1, 3)).tolist()) for _ in range(1000)]
    for s in sigs:
        new += dedup_crash(CrashSignature(s), seen)
    assert new == len(set(sigs))


# -- provenance ------------------------------------------------------------------

def test_ml_seed_stats_havoc_only():
    corpus = [entry("a", "seed", new_edges=0), entry("b", "havoc", "a")]
    assert ml_seed_stats(report_with(corpus)) == (0.0, 0.0, 0.0)


def test_ml_seed_stats_example():
    corpus = [entry("s", "seed"), entry("h", "havoc", "s"), entry("m", "ml", "s", new_edges=2),
              entry("c", "havoc", "m")]
    assert ml_seed_stats(report_with(corpus)) == (25.0, 100.0, 25.0)


def test_ml_seed_stats_matches_bfs():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = int(rng.integers(2, 40))
        corpus = [entry("0", "seed")]
        for i in range(1, n):
            src = str(rng.choice(["havoc", "ml"]))
            corpus.append(entry(str(i), src, str(rng.integers(0, i)), new_edges=int(rng.integers(0, 2))))
        children = {}
        for e in corpus:
            if e.parent is not None:
                children.setdefault(e.parent, []).append(e.id)
        derived = set()
        for e in corpus:
            if e.source != "ml":
                continue
            queue = deque(children.get(e.id, []))
            while queue:
                c = queue.popleft()
                derived.add(c)
                queue.extend(children.get(c, []))
        ml = [e for e in corpus if e.source == "ml"]
        want = (100 * len(ml) / n, 100 * sum(e.new_edges > 0 for e in ml) / len(ml) if ml else 0.0,
                100 * len(derived) / n)
        assert ml_seed_stats(report_with(corpus)) == pytest.approx(want)


def test_edge_intersection():
    a, b = report_with([], final_edges={0, 1}), report_with([], final_edges={0, 2})
    assert edge_intersection(a, b) == (2, 2, 3, 1, 1)
    assert edge_intersection(a, a)[3:] == (0, 0)
    with pytest.raises(ConfigError):
        edge_intersection(a, report_with([], target="branch_ladder"))


def test_edge_intersection_random_sets():
    rng = np.random.default_rng(1)
    for _ in range(50):
        A = set(rng.integers(0, 30, 10).tolist())
        B = set(rng.integers(0, 30, 10).tolist())
        got = edge_intersection(report_with([], final_edges=A), report_with([], final_edges=B))
        assert got == (len(A), len(B), len(A | B), len(A - B), len(B - A))


# -- trials -------------------------------------------------------------------------

def test_zero_budget(magic):
    seeds = [b"FUZZ\x42", b"nothing"]
    r = run_trial(magic, seeds, FuzzConfig(budget=0))
    assert [e.data for e in r.corpus] == seeds
    assert r.final_edges == [0, 1, 2]
    assert r.executions == 2


def test_no_seeds(magic):
    with pytest.raises(ConfigError):
        run_trial(magic, [], FuzzConfig())


def test_bad_mode():
    with pytest.raises(ConfigError):
        FuzzConfig(mode="afl")


def test_havoc_trial_invariants(magic):
    r = run_trial(magic, [b"FUZZ" + bytes(4)], FuzzConfig(seed=1, budget=3000))
    counts = [c for _, c in r.coverage_series]
    times = [t for t, _ in r.coverage_series]
    assert counts == sorted(counts) and times == sorted(times)
    assert counts[-1] == r.final_coverage >= counts[0]
    for e in r.corpus:
        assert e.edges_hit == execute(magic, e.data).edges_hit
    ids = {e.id for e in r.corpus}
    for e in r.corpus:
        assert (e.parent is None) == (e.source == "seed")
        assert e.parent is None or e.parent in ids
    assert attribute_coverage(r, "ml") == 0
    assert attribute_coverage(r, None) == r.final_coverage == r.attribution["all"]


def test_trial_deterministic(magic):
    cfg = small_nps_config(seed=3, budget=3000)
    assert run_trial(magic, magic_seeds(), cfg).to_json() == run_trial(magic, magic_seeds(), cfg).to_json()


def test_nps_trial_trains_and_mutates(magic):
    trial = Trial(magic, magic_seeds(), small_nps_config(budget=4000))
    r = trial.run()
    assert r.model_history, "model never trained"
    assert r.ml_batches > 0
    assert any(e.source == "ml" for e in r.corpus) or r.executions > 0
    assert trial.model.num_outputs == trial.bitmap.num_columns


def test_nps_only_mode(ladder):
    r = run_trial(ladder, [bytes([0, 13, 26, 39]) + bytes(12)] * 25, small_nps_config(budget=3000, mode="nps"))
    assert r.ml_batches > 0


def test_nps_waits_for_min_corpus(magic):
    r = run_trial(magic, magic_seeds(5), small_nps_config(budget=2000))
    assert r.model_history == [] and r.ml_batches == 0


def test_attribution_union_bound(ladder):
    r = run_trial(ladder, [bytes([0, 13, 26, 39]) + bytes(12)] * 25, small_nps_config(budget=4000))
    per_source = [r.attribution[s] for s in ("seed", "havoc", "ml")]
    assert r.attribution["all"] >= max(per_source)
    assert r.attribution["all"] <= sum(per_source)


def test_report_json_round_trip(magic, tmp_path):
    r = run_trial(magic, [b"FUZZ" + bytes(4)], FuzzConfig(seed=2, budget=1000))
    back = TrialReport.from_json(r.to_json())
    assert back.to_json() == r.to_json()
    d = r.write_corpus(tmp_path / "corpus")
    names = sorted(p.name for p in d.iterdir())
    assert names[0] == "000000_seed_none"
    assert len(read_corpus_dir(d)) == len(r.corpus)


def test_series_csv(magic):
    r = run_trial(magic, [b"FUZZ" + bytes(4)], FuzzConfig(seed=2, budget=1000))
    lines = r.series_csv().splitlines()
    assert lines[0] == "time,edges"
    times = [float(l.split(",")[0]) for l in lines[1:]]
    assert times == sorted(times)


def test_overhead_reduces_executions(ladder):
    seeds = [bytes(16)]
    base = run_trial(ladder, seeds, FuzzConfig(seed=0, budget=2000))
    slow = run_trial(ladder, seeds, FuzzConfig(seed=0, budget=2000, overhead_per_exec=1))
    assert slow.executions == pytest.approx(base.executions / 2, abs=2)


def test_config_round_trip():
    cfg = small_nps_config(seed=4)
    assert FuzzConfig.from_dict(cfg.to_dict()) == cfg
