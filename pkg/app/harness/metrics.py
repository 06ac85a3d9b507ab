"""
Metrics Module

Per-step training records and the files a run writes about itself:
metrics.jsonl (one MetricsRecord per optimization step), events.jsonl
(schedule, re-estimation, checkpoint, fallback and divergence events) and
the CSV plot data derived from them.
"""

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
EVENTS_FILE = "events.jsonl"


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    batch_index: int
    mean_total_reward: float
    mean_accuracy_reward: float
    trigger_count: int
    guided_success_rate: Optional[float]
    objective: float
    grad_norm: float
    wall_ms: int = 0

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line):
        data = json.loads(line)
        return cls(**{f.name: data[f.name] for f in fields(cls)})


METRICS_FIELDS = tuple(f.name for f in fields(MetricsRecord))


def _truncate_jsonl(path, keep):
    """Rewrite a JSONL file keeping only records for which keep(record) is true."""
    if not os.path.exists(path):
        return 0
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    kept = [line for line in lines if keep(json.loads(line))]
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(kept)
    return len(lines) - len(kept)


class RunLog:
    """
    Single writer for a run directory's line-delimited logs.

    Args:
        run_dir (str): Directory of the run
        resume_step (int, optional): Drop records after this step before appending
    """

    def __init__(self, run_dir, resume_step=None):
        os.makedirs(run_dir, exist_ok=True)
        self.run_dir = run_dir
        self.metrics_path = os.path.join(run_dir, METRICS_FILE)
        self.events_path = os.path.join(run_dir, EVENTS_FILE)
        if resume_step is None:
            mode = "w"
        else:
            dropped = _truncate_jsonl(self.metrics_path, lambda r: r["step"] <= resume_step)
            dropped += _truncate_jsonl(self.events_path, lambda r: r["step"] <= resume_step)
            if dropped:
                logger.info(f"Dropped {dropped} log records written after step {resume_step}")
            mode = "a"
        self._metrics = open(self.metrics_path, mode, encoding="utf-8")
        self._events = open(self.events_path, mode, encoding="utf-8")

    def record(self, metrics):
        self._metrics.write(metrics.to_json() + "\n")
        self._metrics.flush()

    def event(self, kind, step, **details):
        self._events.write(json.dumps({"event": kind, "step": step, **details}) + "\n")
        self._events.flush()

    def close(self):
        self._metrics.close()
        self._events.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path):
    if os.path.isdir(path):
        path = os.path.join(path, METRICS_FILE)
    with open(path, "r", encoding="utf-8") as f:
        return [MetricsRecord.from_json(line) for line in f if line.strip()]


def read_events(path, kind=None):
    if os.path.isdir(path):
        path = os.path.join(path, EVENTS_FILE)
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8") as f:
        events = [json.loads(line) for line in f if line.strip()]
    return [e for e in events if kind is None or e["event"] == kind]


def write_metrics_csv(records, path):
    """Plot data: one CSV row per optimization step."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_FIELDS)
        for record in records:
            row = asdict(record)
            writer.writerow(["" if row[name] is None else row[name] for name in METRICS_FIELDS])
    return path


def write_nir_history(nir_history, path):
    """(round, nir) table of the re-estimation points."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("round", "nir"))
        for round_index, rate in nir_history:
            writer.writerow((round_index, f"{rate:.6f}"))
    return path


def read_nir_history(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [(int(row["round"]), float(row["nir"])) for row in csv.DictReader(f)]
