"""Fit reports and piecewise-constant schedules."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


def schedule_value(schedule, epoch):
    """Value of a piecewise-constant ``[(start_epoch, value), ...]`` schedule."""
    value = None
    for start, v in sorted(schedule):
        if epoch >= start:
            value = v
    if value is None:
        raise ValueError(f"schedule {schedule} does not cover epoch {epoch}")
    return value


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_ll: float
    wall_clock: float


@dataclass
class FitReport:
    """What a fit did: config, per-epoch log-likelihood (nats per point) with
    cumulative fit time in seconds, and the final model."""

    method: str
    config: dict
    epochs: list = field(default_factory=list)
    initial_train_ll: float | None = None
    final_train_ll: float | None = None
    final_val_ll: float | None = None
    params: object = None
    checkpoint: str | None = None
    status: str = "running"
    error: str | None = None
    notes: list = field(default_factory=list)

    def finish(self, params, data, val_data=None):
        from .likelihood import mean_log_likelihood

        self.params = params
        self.final_train_ll = (
            self.epochs[-1].train_ll if self.epochs else mean_log_likelihood(params, data)
        )
        if val_data is not None:
            self.final_val_ll = mean_log_likelihood(params, val_data)
        self.status = "ok"

    def fail(self, exc, params):
        self.params = params
        self.status = "failed"
        self.error = f"{type(exc).__name__}: {exc}"

    def to_dict(self):
        return {
            "method": self.method,
            "config": self.config,
            "status": self.status,
            "error": self.error,
            "initial_train_ll": self.initial_train_ll,
            "epochs": [
                {"epoch": r.epoch, "train_ll": r.train_ll, "wall_clock": r.wall_clock}
                for r in self.epochs
            ],
            "final_train_ll": self.final_train_ll,
            "final_val_ll": self.final_val_ll,
            "checkpoint": self.checkpoint,
            "notes": list(self.notes),
        }

    def numeric_fields(self):
        """Every number in the report except timings, for reproducibility checks."""
        out = {k: v for k, v in self.to_dict().items() if k != "epochs"}
        out["epochs"] = [(r.epoch, r.train_ll) for r in self.epochs]
        if self.params is not None:
            out["params"] = self.params.to_dict()
        return out

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
