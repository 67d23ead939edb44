"""Seeded multi-trial campaigns and their reports.

Trial ``i`` of every variant runs with rng seed ``base_seed + i`` on the
same initial seeds, so variants can be compared run by run. Coverage of
every variant is measured with the same corpus replay.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .coverage import METRIC_ID
from .engine import MODES, FuzzConfig, Trial, TrialReport, apply_overhead, config_hash, edge_intersection
from .errors import ConfigError
from .smoothing import RetrainPolicy, TrainConfig
from .target import get_target, make_seeds

__all__ = ["CampaignConfig", "CampaignReport", "run_campaign", "load_campaign", "emit_reports",
           "apply_overhead", "output_root"]

OUTPUT_ROOT_ENV = "NPSFUZZ_OUTPUT_ROOT"
TIME_POINTS = 50


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "npsfuzz-out"))


@dataclass(frozen=True)
class CampaignConfig:
    target: str
    variants: tuple[str, ...] = ("havoc-only", "nps+havoc")
    trials: int = 30
    base_seed: int = 0
    budget: float = 10_000
    overhead_per_exec: float = 0.0
    output_dir: Optional[str] = None
    num_seeds: int = 200
    seeds_dir: Optional[str] = None
    hidden: int = 4096
    epochs: int = 50
    min_corpus: int = 200
    interval_scale: float = 1.0
    train_cost: float = 100.0
    workers: int = 1
    fuzz: dict = field(default_factory=dict)  # extra FuzzConfig fields

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        get_target(self.target)
        bad = [v for v in self.variants if v not in MODES]
        if bad or not self.variants:
            raise ConfigError(f"unknown variants {bad}; expected some of {MODES}")
        if self.overhead_per_exec < 0 or self.budget < 0 or self.interval_scale <= 0:
            raise ConfigError("budget and overhead must be >= 0, interval_scale > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown campaign config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variants"] = list(self.variants)
        return d

    def identity(self) -> dict:
        """Fields that determine results; output location and parallelism do not."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return d

    def fuzz_config(self, variant: str, trial: int) -> FuzzConfig:
        return FuzzConfig(
            seed=self.base_seed + trial,
            budget=self.budget,
            mode=variant,
            overhead_per_exec=self.overhead_per_exec,
            train_cost=self.train_cost,
            retrain=RetrainPolicy(min_corpus=self.min_corpus, min_interval=3600.0 * self.interval_scale),
            train=TrainConfig(hidden=self.hidden, epochs=self.epochs),
            **self.fuzz,
        )

    def seeds(self) -> list[bytes]:
        if self.seeds_dir:
            files = sorted(p for p in Path(self.seeds_dir).iterdir() if p.is_file())
            seeds = [p.read_bytes() for p in files if p.stat().st_size > 0]
            if not seeds:
                raise ConfigError(f"no non-empty seeds in {self.seeds_dir}")
            return seeds
        return make_seeds(get_target(self.target), self.num_seeds, self.base_seed)


@dataclass
class CampaignReport:
    config: dict
    config_hash: str
    metric_id: str
    coverage: dict  # variant -> {mean, std, n, finals}
    timeseries: dict  # variant -> {time, mean, lower, upper}
    crashes: dict  # variant -> {signature key -> trials hitting it}
    ml_stats: dict  # variant -> mean (ml_pct, ml_cov_plus_pct, derived_pct)
    intersections: dict  # "A|B" -> mean (|A|, |B|, |A u B|, |A \ B|, |B \ A|) over paired trials

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CampaignReport":
        return cls(**json.loads(text))


def _std(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _series_at(series, times) -> np.ndarray:
    t = np.array([p[0] for p in series])
    v = np.array([p[1] for p in series])
    idx = np.searchsorted(t, times, side="right") - 1
    return np.where(idx >= 0, v[np.clip(idx, 0, None)], v[0])


def aggregate_reports(config: CampaignConfig, reports: dict[str, list[TrialReport]]) -> CampaignReport:
    """Cross-trial statistics; everything here is recomputable from stored reports."""
    coverage, timeseries, crashes, ml_stats = {}, {}, {}, {}
    horizon = max([config.budget] + [r.final_time for rs in reports.values() for r in rs])
    times = np.linspace(0.0, horizon, TIME_POINTS)
    for variant, rs in reports.items():
        finals = [r.final_coverage for r in rs]
        coverage[variant] = {"mean": float(np.mean(finals)), "std": _std(finals), "n": len(rs), "finals": finals}
        curves = np.stack([_series_at(r.coverage_series, times) for r in rs]).astype(float)
        mean = curves.mean(axis=0)
        half = 1.96 * (curves.std(axis=0, ddof=1) if len(rs) > 1 else np.zeros_like(mean)) / math.sqrt(len(rs))
        timeseries[variant] = {"time": times.tolist(), "mean": mean.tolist(),
                               "lower": (mean - half).tolist(), "upper": (mean + half).tolist()}
        hits: dict[str, int] = {}
        for r in rs:
            for sig in r.unique_crashes:
                key = "-".join(map(str, sig))
                hits[key] = hits.get(key, 0) + 1
        crashes[variant] = dict(sorted(hits.items()))
        stats = np.array([[r.ml_stats[k] for k in ("ml_pct", "ml_cov_plus_pct", "derived_pct")] for r in rs])
        ml_stats[variant] = dict(zip(("ml_pct", "ml_cov_plus_pct", "derived_pct"), stats.mean(axis=0).tolist()))
    intersections = {}
    names = list(reports)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            rows = [edge_intersection(ra, rb) for ra, rb in zip(reports[a], reports[b])]
            intersections[f"{a}|{b}"] = np.mean(rows, axis=0).tolist()
    return CampaignReport(config.identity(), config_hash(config.identity()), METRIC_ID, coverage, timeseries,
                          crashes, ml_stats, intersections)


def _run_one(args):
    config, variant, trial, seeds = args
    trial_run = Trial(get_target(config.target), seeds, config.fuzz_config(variant, trial))
    report = trial_run.run()
    return variant, trial, report, trial_run.model


def _trial_dir(out: Path, variant: str, trial: int) -> Path:
    return out / "trials" / variant / f"trial_{trial:03d}"


def run_campaign(config: CampaignConfig) -> CampaignReport:
    """Run every (variant, trial) pair, persist trial artifacts, aggregate."""
    seeds = config.seeds()
    jobs = [(config, v, i, seeds) for v in config.variants for i in range(config.trials)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    reports: dict[str, list[TrialReport]] = {v: [None] * config.trials for v in config.variants}
    models = {}
    for variant, trial, report, model in results:
        reports[variant][trial] = report
        models[variant, trial] = model

    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "campaign.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")
        for variant, rs in reports.items():
            for i, r in enumerate(rs):
                d = _trial_dir(out, variant, i)
                d.mkdir(parents=True, exist_ok=True)
                (d / "report.json").write_text(r.to_json())
                (d / "coverage.csv").write_text(r.series_csv())
                r.write_corpus(d / "corpus")
                if models[variant, i] is not None:
                    models[variant, i].save(d / "model.npz")
    campaign = aggregate_reports(config, reports)
    if config.output_dir:
        (Path(config.output_dir) / "campaign_report.json").write_text(campaign.to_json())
    return campaign


def load_campaign(directory) -> tuple[CampaignConfig, CampaignReport]:
    """Rebuild the campaign report from the trial reports stored under ``directory``."""
    directory = Path(directory)
    try:
        config = CampaignConfig.from_dict(json.loads((directory / "campaign.json").read_text()))
    except FileNotFoundError:
        raise ConfigError(f"{directory} holds no campaign.json") from None
    reports = {
        v: [TrialReport.from_json((_trial_dir(directory, v, i) / "report.json").read_text())
            for i in range(config.trials)]
        for v in config.variants
    }
    return config, aggregate_reports(config, reports)


# -- emission ----------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def coverage_svg(report: CampaignReport, width=640, height=400) -> str:
    """Mean coverage over virtual time with a 95% confidence band per variant."""
    pad = 50
    series = report.timeseries
    tmax = max((s["time"][-1] for s in series.values()), default=1.0) or 1.0
    vmax = max((max(s["upper"]) for s in series.values()), default=1.0) or 1.0

    def xy(t, v):
        return pad + (width - 2 * pad) * t / tmax, height - pad - (height - 2 * pad) * v / vmax

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">virtual time</text>',
             f'<text x="14" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 14 {height / 2:.0f})" '
             f'text-anchor="middle">edges (replay)</text>',
             f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="10">{vmax:g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="end" font-size="10">{tmax:g}</text>']
    for i, (variant, s) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        upper = [xy(t, v) for t, v in zip(s["time"], s["upper"])]
        lower = [xy(t, v) for t, v in zip(s["time"], s["lower"])]
        band = " ".join(f"{x:.2f},{y:.2f}" for x, y in upper + lower[::-1])
        line = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(t, v) for t, v in zip(s["time"], s["mean"])))
        parts.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad - 4}" y="{pad + 14 * (i + 1)}" text-anchor="end" font-size="11" '
                     f'fill="{color}">{variant}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit_reports(report: CampaignReport, directory) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {directory}: {exc}") from exc
    files = {
        "coverage_table.csv": _csv(
            [(v, f"{c['mean']:.4f}", f"{c['std']:.4f}", c["n"]) for v, c in report.coverage.items()],
            ["variant", "mean", "std", "trials"]),
        "crashes.csv": _csv(
            [(v, sig, n) for v, sigs in report.crashes.items() for sig, n in sigs.items()],
            ["variant", "signature", "trials"]),
        "ml_seed_stats.csv": _csv(
            [(v, *(f"{s[k]:.4f}" for k in ("ml_pct", "ml_cov_plus_pct", "derived_pct")))
             for v, s in report.ml_stats.items()],
            ["variant", "ml_pct", "ml_cov_plus_pct", "derived_pct"]),
        "edge_intersection.csv": _csv(
            [(*pair.split("|"), *(f"{x:.4f}" for x in vals)) for pair, vals in report.intersections.items()],
            ["a", "b", "a_edges", "b_edges", "union", "a_only", "b_only"]),
        "coverage.svg": coverage_svg(report),
    }
    for variant, s in report.timeseries.items():
        files[f"timeseries_{variant}.csv"] = _csv(
            [(f"{t:.4f}", f"{m:.4f}", f"{lo:.4f}", f"{hi:.4f}")
             for t, m, lo, hi in zip(s["time"], s["mean"], s["lower"], s["upper"])],
            ["time", "mean", "lower95", "upper95"])
    written = []
    for name, text in files.items():
        path = directory / name
        try:
            path.write_text(text)
        except OSError as exc:
            raise ConfigError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written
