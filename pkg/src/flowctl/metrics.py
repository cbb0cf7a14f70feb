"""Composite relative-improvement score, Elo ratings, cost integrals and energy distance."""
from __future__ import annotations

import csv
import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, GridMismatch, KeyMismatch, NoMatches, UnknownCandidate

ELO_INITIAL = 1500.0
ELO_K = 32.0
ZERO_BASE = 1e-12


@dataclass
class MetricReport:
    """Per-(scene, seed) metric records of one configuration."""

    config_hash: str
    records: list = field(default_factory=list)

    def add(self, scene: str, seed: int, metrics: dict):
        for r in self.records:
            if r["scene"] == scene and r["seed"] == seed:
                raise KeyError(f"duplicate record for scene {scene!r}, seed {seed}")
        self.records.append({"config_hash": self.config_hash, "scene": str(scene), "seed": int(seed),
                             "metrics": {k: float(v) for k, v in metrics.items()}})

    def values(self) -> dict:
        """``{(scene, seed, metric): value}``."""
        return {(r["scene"], r["seed"], m): v for r in self.records for m, v in r["metrics"].items()}

    def summary(self) -> dict:
        by_metric = defaultdict(list)
        for r in self.records:
            for m, v in r["metrics"].items():
                by_metric[m].append(v)
        return {m: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
                for m, v in sorted(by_metric.items())}

    def to_json(self) -> str:
        recs = sorted(self.records, key=lambda r: (r["scene"], r["seed"]))
        return json.dumps({"config_hash": self.config_hash, "records": recs, "summary": self.summary()},
                          sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        rep = cls(data["config_hash"])
        for r in data["records"]:
            rep.add(r["scene"], r["seed"], r["metrics"])
        return rep

    def write_csv(self, path):
        metrics = sorted({m for r in self.records for m in r["metrics"]})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_hash", "scene", "seed", *metrics])
            for r in sorted(self.records, key=lambda r: (r["scene"], r["seed"])):
                w.writerow([self.config_hash, r["scene"], r["seed"], *(repr(r["metrics"][m]) for m in metrics)])


@dataclass
class Composite:
    value: float
    skipped: int = 0


def composite_score(current: MetricReport, base: MetricReport) -> Composite:
    """Macro-average relative improvement over the base, across seeds, then scenes, then metrics.

    Keys whose base value is within ``ZERO_BASE`` of zero are skipped and counted.
    """
    cur, ref = current.values(), base.values()
    if cur.keys() != ref.keys():
        missing = sorted(ref.keys() - cur.keys())[:3]
        extra = sorted(cur.keys() - ref.keys())[:3]
        raise KeyMismatch(f"key sets differ; missing {missing}, unexpected {extra}")
    nested = defaultdict(lambda: defaultdict(list))
    skipped = 0
    for (scene, seed, metric), b in ref.items():
        if abs(b) <= ZERO_BASE:
            skipped += 1
            continue
        nested[seed][scene].append((cur[(scene, seed, metric)] - b) / b)
    if not nested:
        raise ZeroDivisionError("every base metric value is zero")
    per_seed = [np.mean([np.mean(v) for v in scenes.values()]) for scenes in nested.values()]
    return Composite(float(np.mean(per_seed)), skipped)


class Outcome(enum.Enum):
    A_WINS = "a"
    B_WINS = "b"
    DRAW = "draw"


def expected_score(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


@dataclass
class EloTable:
    ratings: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    k: float = ELO_K

    @classmethod
    def with_candidates(cls, names, initial=ELO_INITIAL) -> "EloTable":
        return cls({n: float(initial) for n in names})

    def register(self, name, initial=ELO_INITIAL):
        self.ratings.setdefault(name, float(initial))


def elo_update(table: EloTable, a, b, outcome: Outcome) -> EloTable:
    """Apply one comparison in place; matches are processed in the order given."""
    for c in (a, b):
        if c not in table.ratings:
            raise UnknownCandidate(c)
    outcome = Outcome(outcome)
    s_a = {Outcome.A_WINS: 1.0, Outcome.B_WINS: 0.0, Outcome.DRAW: 0.5}[outcome]
    r_a, r_b = table.ratings[a], table.ratings[b]
    delta = table.k * (s_a - expected_score(r_a, r_b))
    table.ratings[a] = r_a + delta
    table.ratings[b] = r_b - delta
    table.log.append({"a": a, "b": b, "outcome": outcome.value})
    return table


def win_rate(table: EloTable, candidate) -> float:
    """Fraction of head-to-head wins; a draw counts as half a win."""
    score = n = 0
    for m in table.log:
        if candidate not in (m["a"], m["b"]):
            continue
        n += 1
        if m["outcome"] == Outcome.DRAW.value:
            score += 0.5
        elif (m["outcome"] == Outcome.A_WINS.value) == (m["a"] == candidate):
            score += 1
    if n == 0:
        raise NoMatches(candidate)
    return score / n


def write_match_log(path, table: EloTable):
    with open(path, "w") as fh:
        for m in table.log:
            fh.write(json.dumps(m, sort_keys=True) + "\n")


def replay_match_log(path, candidates=(), initial=ELO_INITIAL) -> EloTable:
    table = EloTable.with_candidates(candidates, initial)
    with open(path) as fh:
        for line in fh:
            if line.strip():
                m = json.loads(line)
                table.register(m["a"], initial)
                table.register(m["b"], initial)
                elo_update(table, m["a"], m["b"], Outcome(m["outcome"]))
    return table


def cost_integral(traj, cost_fn: Callable, controls: Optional[np.ndarray] = None):
    """Left-Riemann estimate of ``int f(X_t, t) dt`` (plus ``1/2 ||u||^2`` if controls are given).

    Returns one value per trajectory for batched runs.
    """
    times, states = traj.times, traj.states
    if states.shape[0] != times.shape[0]:
        raise GridMismatch("states do not match the time grid")
    n = len(times) - 1
    if controls is not None and np.shape(controls)[0] != n:
        raise GridMismatch(f"expected {n} control values, got {np.shape(controls)[0]}")
    total = 0.0
    for i in range(n):
        dt = times[i + 1] - times[i]
        total = total + dt * np.asarray(cost_fn(states[i], times[i]), dtype=np.float64)
        if controls is not None:
            total = total + dt * 0.5 * np.sum(np.asarray(controls[i]) ** 2, axis=-1)
    return total


def _mean_dist(a, b, chunk=2048):
    total = 0.0
    for i in range(0, len(a), chunk):
        total += cdist(a[i:i + chunk], b).sum()
    return total / (len(a) * len(b))


def energy_distance(samples_a, samples_b) -> float:
    """``2 E|X - Y| - E|X - X'| - E|Y - Y'|`` with all-pairs (V-statistic) means; 0 for equal samples."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample population")
    return max(2.0 * _mean_dist(a, b) - _mean_dist(a, a) - _mean_dist(b, b), 0.0)
