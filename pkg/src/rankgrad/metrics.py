"""Run logs and their CSV form."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

METRIC_COLUMNS = ("step", "episode", "env_steps", "eval_return_mean", "eval_return_min",
                  "buffer_regular", "buffer_nearopt", "distinct_nearopt", "loss", "grad_inf_norm")


@dataclass
class EvalRecord:
    step: int
    episode: int
    env_steps: int
    eval_return_mean: float
    eval_return_min: float
    buffer_regular: int = 0
    buffer_nearopt: int = 0
    distinct_nearopt: int = 0
    loss: float = math.nan
    grad_inf_norm: float = math.nan

    def row(self) -> list[str]:
        # repr keeps every float bit-exact in text form
        return [repr(getattr(self, c)) for c in METRIC_COLUMNS]


@dataclass
class RunLog:
    config: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    records: list[EvalRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    converged_step: int | None = None
    first_insert_episode: int | None = None
    episodes: int = 0
    env_steps: int = 0
    error: str | None = None
    distinct_history: list[int] = field(default_factory=list)

    def add(self, record: EvalRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("evaluation records must have strictly increasing steps")
        self.records.append(record)

    @property
    def final_return(self) -> float:
        return self.records[-1].eval_return_mean if self.records else math.nan

    @property
    def final_min_return(self) -> float:
        return self.records[-1].eval_return_min if self.records else math.nan

    @property
    def converged(self) -> bool:
        return self.converged_step is not None

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for rec in self.records:
            writer.writerow(rec.row())
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.csv_text(), encoding="utf-8")
        return path


def read_metrics_csv(path: str | Path) -> list[EvalRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            out.append(EvalRecord(
                step=int(row["step"]), episode=int(row["episode"]), env_steps=int(row["env_steps"]),
                eval_return_mean=float(row["eval_return_mean"]), eval_return_min=float(row["eval_return_min"]),
                buffer_regular=int(row["buffer_regular"]), buffer_nearopt=int(row["buffer_nearopt"]),
                distinct_nearopt=int(row["distinct_nearopt"]), loss=float(row["loss"]),
                grad_inf_norm=float(row["grad_inf_norm"])))
        return out
