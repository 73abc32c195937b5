"""Trial-averaged experiments: parameter sweeps, the bench, and their output files."""

import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
from loguru import logger
from tqdm import tqdm

from ldplcm.config import ExperimentConfig
from ldplcm.errors import ConfigError
from ldplcm.hashing import derive_seed
from ldplcm.protocol import STREAM_TRIALS, RunResult, load_dataset, run_apple_cms, run_protocol
from ldplcm.utils import sha256_file, write_csv, write_json

AXES = ("epsilon", "m", "k", "t", "r", "theta", "s", "space")
METRICS = ("sse_total", "sse_low", "sse_high", "mse", "space_bytes")

_RANGE = re.compile(r"^\s*(-?\d+)\s*\.\.\s*(-?\d+)\s*$")


def trial_seed(seed: int, trial: int) -> int:
    """Seed of trial ``trial``; trial 0 runs on the config seed itself."""
    return seed if trial == 0 else derive_seed(derive_seed(seed, STREAM_TRIALS), trial)


def parse_values(text: str) -> list[float]:
    """Parse ``"0.3,0.4,0.5"`` or integer ranges like ``"1..7"`` (inclusive), possibly mixed."""
    values: list[float] = []
    for part in (p for p in text.split(",") if p.strip()):
        match = _RANGE.match(part)
        if match:
            lo, hi = int(match.group(1)), int(match.group(2))
            if hi < lo:
                raise ConfigError(f"empty range {part.strip()!r}")
            values.extend(float(v) for v in range(lo, hi + 1))
            continue
        try:
            values.append(float(part))
        except ValueError as e:
            raise ConfigError(f"sweep value {part.strip()!r} is not a number") from e
    if not values:
        raise ConfigError("sweep needs at least one value")
    return values


def _as_int(axis: str, value: float) -> int:
    if value != int(value):
        raise ConfigError(f"{axis} values must be integers, got {value}")
    return int(value)


def config_for(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    """``cfg`` with the sweep axis set to ``value``; ``space`` sets ``m = value // k``."""
    if axis in ("epsilon", "r", "theta"):
        return cfg.with_overrides(**{axis: float(value)})
    if axis in ("m", "k", "t"):
        return cfg.with_overrides(**{axis: _as_int(axis, value)})
    if axis == "s":
        return cfg.with_overrides(s=float(value))
    if axis == "space":
        return cfg.with_overrides(m=_as_int(axis, value) // cfg.k)
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")


@dataclass
class TrialSet:
    """LDPLCM runs (and matching Apple-CMS runs) of one configuration over several seeds."""

    config: ExperimentConfig
    ldplcm: list[RunResult] = field(default_factory=list)
    baseline: list[RunResult] = field(default_factory=list)
    wall_seconds: float = 0.0

    @staticmethod
    def _stats(results: list[RunResult]) -> dict[str, Any]:
        stats = {}
        for metric in METRICS:
            values = np.array([getattr(result, metric) for result in results], dtype=np.float64)
            stats[metric] = {"mean": float(values.mean()), "std": float(values.std())}
        return stats

    def summary(self) -> dict[str, Any]:
        summary = {"config": self.config.resolved(), "trials": len(self.ldplcm), "ldplcm": self._stats(self.ldplcm)}
        if self.baseline:
            summary["apple_cms"] = self._stats(self.baseline)
            wins = sum(a.sse_low < b.sse_low for a, b in zip(self.ldplcm, self.baseline))
            summary["ldplcm_low_sse_wins"] = int(wins)
        return summary

    def timing(self) -> dict[str, Any]:
        timing = {"wall_seconds": self.wall_seconds}
        for name, results in (("ldplcm", self.ldplcm), ("apple_cms", self.baseline)):
            if results:
                keys = results[0].timing.keys()
                timing[name] = {key: float(np.mean([r.timing[key] for r in results])) for key in keys}
        return timing


def run_trials(
    cfg: ExperimentConfig, trials: Optional[int] = None, jobs: int = 1, progress: bool = False
) -> TrialSet:
    """Run ``trials`` seeds of one configuration, with the baseline when the config asks for it."""
    trials = cfg.trials if trials is None else trials
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    trial_set = TrialSet(config=cfg)
    started = time.perf_counter()
    shared = load_dataset(cfg) if cfg.dataset.csv is not None else None
    for trial in tqdm(range(trials), desc="Trials", unit="trial", disable=not progress, leave=False):
        trial_cfg = cfg.with_overrides(seed=trial_seed(cfg.seed, trial))
        dataset = shared if shared is not None else load_dataset(trial_cfg)
        trial_set.ldplcm.append(run_protocol(trial_cfg, jobs, dataset))
        if cfg.baseline:
            trial_set.baseline.append(run_apple_cms(trial_cfg, jobs, dataset))
    trial_set.wall_seconds = time.perf_counter() - started
    return trial_set


@dataclass
class SweepPoint:
    axis: str
    value: float
    trials: TrialSet

    @property
    def label(self) -> str:
        return f"{self.axis}={self.value:g}"


def sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: list[float],
    trials: Optional[int] = None,
    jobs: int = 1,
    progress: bool = False,
) -> list[SweepPoint]:
    """Trial-averaged runs for every value of one axis, all other parameters fixed."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    configs = [config_for(cfg, axis, value) for value in values]
    points = []
    for value, point_cfg in zip(values, configs):
        logger.info(f"Sweep {axis}={value:g}")
        points.append(SweepPoint(axis, value, run_trials(point_cfg, trials, jobs, progress)))
    return points


def bench(cfg: ExperimentConfig, trials: Optional[int] = None, jobs: int = 1, progress: bool = False) -> TrialSet:
    """LDPLCM against Apple-CMS on the same seeds, with query and phase timings."""
    return run_trials(cfg.with_overrides(baseline=True), trials, jobs, progress)


def write_run(out_dir: str | Path, results: list[RunResult], clamp_nonnegative: bool = False) -> dict[str, Path]:
    """Write the artifacts of one run and return them by name.

    LDPLCM writes ``model.json``, ``sketch.bin`` and ``estimates.csv``; the
    baseline writes ``baseline_sketch.bin`` and ``baseline_estimates.csv``.
    ``summary.json`` holds every run's metrics and ``timing.json`` their wall times,
    both next to the resolved config that produced them.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for result in results:
        prefix = "" if result.method == "ldplcm" else "baseline_"
        if result.model is not None:
            written[f"{prefix}model"] = out_dir / f"{prefix}model.json"
            written[f"{prefix}model"].write_bytes(result.model_bytes())
        written[f"{prefix}sketch"] = out_dir / f"{prefix}sketch.bin"
        written[f"{prefix}sketch"].write_bytes(result.sketch_bytes())
        written[f"{prefix}estimates"] = out_dir / f"{prefix}estimates.csv"
        write_csv(
            written[f"{prefix}estimates"],
            ["item", "true_count", "estimate", "branch"],
            result.rows(clamp_nonnegative),
            result.artifact_config(),
        )
    written["summary"] = out_dir / "summary.json"
    write_json(written["summary"], {result.method: result.summary() for result in results})
    written["timing"] = out_dir / "timing.json"
    timing: dict[str, Any] = {"config": results[0].artifact_config()} if results else {}
    timing.update({result.method: result.timing for result in results})
    write_json(written["timing"], timing)
    for name, path in written.items():
        logger.info(f"Wrote {name}: {path} (sha256 {sha256_file(path)})")
    return written


def write_trials(out_dir: str | Path, trial_set: TrialSet) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"summary": out_dir / "summary.json", "timing": out_dir / "timing.json"}
    write_json(written["summary"], trial_set.summary())
    write_json(written["timing"], {"config": trial_set.config.resolved(), **trial_set.timing()})
    return written


def write_sweep(out_dir: str | Path, points: list[SweepPoint]) -> Path:
    """One directory per axis value plus ``index.csv`` for plotting."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for point in points:
        write_trials(out_dir / point.label, point.trials)
        stats = point.trials.summary()
        baseline = stats.get("apple_cms")
        rows.append(
            [
                point.axis,
                f"{point.value:g}",
                repr(stats["ldplcm"]["sse_total"]["mean"]),
                repr(stats["ldplcm"]["sse_low"]["mean"]),
                repr(stats["ldplcm"]["sse_high"]["mean"]),
                repr(stats["ldplcm"]["sse_total"]["std"]),
                repr(baseline["sse_total"]["mean"]) if baseline else "",
                repr(baseline["sse_low"]["mean"]) if baseline else "",
                repr(stats["ldplcm"]["space_bytes"]["mean"]),
                f"{point.trials.wall_seconds:.3f}",
            ]
        )
    index = out_dir / "index.csv"
    header = [
        "axis",
        "value",
        "sse_total",
        "sse_low",
        "sse_high",
        "sse_total_std",
        "baseline_sse_total",
        "baseline_sse_low",
        "space_bytes",
        "wall_seconds",
    ]
    config = points[0].trials.config.resolved() if points else {}
    write_csv(index, header, rows, config)
    return index
