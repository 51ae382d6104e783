"""Per-frame mAP over the anticipation horizon, scenario reports and the
ablation grid."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, serialize_config
from .model import HiMemFormerParams, forward_anticipate
from .synthetic import DEFAULT_SPLITS, SCENARIOS, Episode, generate_split
from .train import DataError, check_compatible, make_batch, train

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mean of precision@rank over the ranks of the positives (scores
    descending, ties kept in input order)."""
    order = np.argsort(-scores, kind="stable")
    hits = positives[order].astype(np.float64)
    n_pos = hits.sum()
    if n_pos == 0:
        return float("nan")
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float((precision * hits).sum() / n_pos)


def per_frame_map(scores: np.ndarray, labels: np.ndarray) -> tuple[dict[int, float], float]:
    """AP for every non-background class that has at least one positive, and
    their mean."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise EvaluationError("no scored frames to evaluate")
    if labels.shape != scores.shape[:1]:
        raise EvaluationError(f"{labels.shape[0]} labels for {scores.shape[0]} scored frames")
    aps = {}
    for c in range(1, scores.shape[1]):
        pos = labels == c
        if pos.any():
            aps[c] = average_precision(scores[:, c], pos)
    if not aps:
        raise EvaluationError("no positive frames for any action class")
    return aps, float(np.mean(list(aps.values())))


@dataclass
class ScenarioResult:
    scenario: str
    per_class: dict[int, float]
    mAP: float
    episodes: int
    per_offset: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    results: list[ScenarioResult]
    config: Config

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "class", "ap", "map"])
            for r in self.results:
                for c, ap in sorted(r.per_class.items()):
                    w.writerow([r.scenario, c, repr(ap), repr(r.mAP)])

    def write_offsets_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "offset", "map"])
            for r in self.results:
                for k, m in enumerate(r.per_offset, 1):
                    w.writerow([r.scenario, k, repr(m)])

    def table(self) -> str:
        lines = [f"{'scenario':<9} {'episodes':>8} {'mAP':>7}   per-offset mAP"]
        for r in self.results:
            offs = " ".join(f"{100 * m:5.1f}" for m in r.per_offset)
            lines.append(f"{r.scenario:<9} {r.episodes:>8} {100 * r.mAP:7.2f}   {offs}")
        return "\n".join(lines)


def score_episodes(params: HiMemFormerParams, episodes: list[Episode], cfg: Config,
                   chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Fine-stage class probabilities ``[anchors, N_F, K+1]`` and labels
    ``[anchors, N_F]`` for every agent and every ``eval_stride``-th anchor."""
    stream = cfg.stream
    n_f = stream.anticipation_steps
    picks = [(e, a, t) for e, ep in enumerate(episodes) for a in range(ep.num_agents)
             for t in range(0, ep.frames - n_f, cfg.eval_stride)]
    if not picks:
        raise EvaluationError("episodes too short for the anticipation horizon")
    scores, labels = [], []
    for i in range(0, len(picks), chunk):
        batch = make_batch(episodes, picks[i:i + chunk], stream)
        scores.append(forward_anticipate(batch.views, params).probs)
        labels.append(batch.target_labels)
    return np.concatenate(scores), np.concatenate(labels)


def evaluate(params: HiMemFormerParams, episodes: list[Episode], cfg: Config) -> EvalReport:
    """Pooled per-frame mAP per scenario, plus a per-offset breakdown."""
    if not episodes:
        raise EvaluationError("empty evaluation set")
    try:
        check_compatible(episodes, cfg)
    except DataError as exc:
        raise EvaluationError(str(exc)) from None
    results = []
    for scenario in sorted({ep.scenario for ep in episodes}, key=lambda s: SCENARIOS[s]):
        group = [ep for ep in episodes if ep.scenario == scenario]
        scores, labels = score_episodes(params, group, cfg)
        k1 = scores.shape[-1]
        per_class, m = per_frame_map(scores.reshape(-1, k1), labels.reshape(-1))
        offsets = []
        for j in range(scores.shape[1]):
            try:
                offsets.append(per_frame_map(scores[:, j], labels[:, j])[1])
            except EvaluationError:
                offsets.append(float("nan"))
        results.append(ScenarioResult(scenario, per_class, m, len(group), offsets))
    return EvalReport(results, cfg)


# --------------------------------------------------------------------------
# ablations

AXES = {
    "ms": ("short_span", [2.0, 5.0, 10.0]),
    "ml": ("long_span", [32.0, 64.0, 128.0, 256.0]),
    "sr": ("sample_rate", [1, 4, 8, 16]),
    "context": ("use_context", [True, False]),
}


def scenario_data(cfg: Config, scenario: str):
    n_train, n_eval = DEFAULT_SPLITS[scenario]
    if cfg.train_episodes > 0:
        n_train = cfg.train_episodes
    if cfg.eval_episodes > 0:
        n_eval = cfg.eval_episodes
    return generate_split(cfg.scenario_spec(scenario), n_train, n_eval)


def ablation_grid(base: Config, axis: str, scenarios=tuple(SCENARIOS), out_csv=None,
                  max_steps: int | None = None) -> list[dict]:
    """Train and evaluate every (axis value, scenario) cell with shared seeds.

    Returns one row per axis value with a mAP column per scenario; infeasible
    values are kept with an empty mAP and a ``reason``.
    """
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    key, values = AXES[axis]
    data = {s: scenario_data(base, s) for s in scenarios}
    rows = []
    for value in values:
        row = {"axis": axis, "value": value, "reason": ""}
        try:
            cfg = base.replace(**{key: value})
        except ValueError as exc:
            row["reason"] = str(exc)
            row.update({s: "" for s in scenarios})
            rows.append(row)
            continue
        for s in scenarios:
            train_eps, eval_eps = data[s]
            result = train(train_eps, cfg, max_steps=max_steps)
            row[s] = evaluate(result.params, eval_eps, cfg).results[0].mAP
            log.info("ablation %s=%s %s: mAP %.4f", axis, value, s, row[s])
        rows.append(row)
    if out_csv is not None:
        write_grid(rows, scenarios, out_csv)
    return rows


def write_grid(rows: list[dict], scenarios, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", *scenarios, "reason"])
        for r in rows:
            vals = [r[s] if r[s] == "" else repr(r[s]) for s in scenarios]
            w.writerow([r["axis"], r["value"], *vals, r["reason"]])


def write_config_echo(cfg: Config, directory) -> Path:
    path = Path(directory) / "config.resolved"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_config(cfg), encoding="utf-8")
    return path
