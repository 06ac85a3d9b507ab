"""
Run Report Generator

Builds a Markdown report of a run directory: configuration, reward curve
summary, trigger statistics, NIR history, pass@k and the PPL table. Files
missing from the run directory produce a placeholder line in their section.

Usage:
    Call programmatically with:
    run_generate_report(run_dir)
"""

import json
import logging
import os

import numpy as np

from app.harness.metrics import read_events, read_metrics, read_nir_history
from app.harness.ppl_study import read_ppl_table

logger = logging.getLogger(__name__)

REPORT_FILE = "report.md"


def load_json_file(file_path, default=None):
    """Load a JSON file or return default if file doesn't exist"""
    if not os.path.exists(file_path):
        logger.warning(f"File not found: {file_path}")
        return default
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except ValueError as e:
        logger.error(f"Error loading file {file_path}: {e}")
        return default


def load_text_file(file_path):
    if not os.path.exists(file_path):
        logger.warning(f"File not found: {file_path}")
        return ""
    with open(file_path, "r", encoding="utf-8") as f:
        return f.read()


def generate_reward_table(records):
    """
    Per-batch summary of the reward curve.

    Args:
        records (list): MetricsRecords of the run

    Returns:
        str: Markdown table
    """
    table = """| Batch | Steps | First mean reward | Last mean reward | Mean accuracy | Mean triggers per step |
|-------|-------|-------------------|------------------|---------------|------------------------|
"""
    batches = sorted({r.batch_index for r in records})
    for b in batches:
        rows = [r for r in records if r.batch_index == b]
        table += (
            f"| {b} | {len(rows)} | {rows[0].mean_total_reward:.3f} | "
            f"{rows[-1].mean_total_reward:.3f} | "
            f"{np.mean([r.mean_accuracy_reward for r in rows]):.3f} | "
            f"{np.mean([r.trigger_count for r in rows]):.2f} |\n"
        )
    if not batches:
        table += "| - | - | - | - | - | - |\n"
    return table


def generate_trigger_summary(records, events):
    rates = [r.guided_success_rate for r in records if r.guided_success_rate is not None]
    fallbacks = [e for e in events if e["event"] == "guidance_fallback"]
    lines = [
        f"- Optimization steps: {len(records)}",
        f"- Steps with at least one triggered group: {sum(1 for r in records if r.trigger_count)}",
        f"- Mean guided success rate: {np.mean(rates):.3f}" if rates else "- Mean guided success rate: n/a",
        f"- Guidance fallbacks (no expert solution): {len(fallbacks)}",
    ]
    return "\n".join(lines)


def generate_nir_table(nir_history):
    table = "| Round | NIR |\n|-------|-----|\n"
    for round_index, rate in nir_history:
        table += f"| {round_index} | {rate:.3f} |\n"
    if not nir_history:
        table += "| - | - |\n"
    return table


def generate_ppl_table(rows):
    table = """| Checkpoint | Unguided | Expert | Guided (s,a) | Guided (a) |
|------------|----------|--------|--------------|------------|
"""
    for row in rows:
        table += (
            f"| {row.checkpoint} | {row.unguided:.3f} | {row.expert:.3f} | "
            f"{row.guided_solution_answer:.3f} | {row.guided_answer:.3f} |\n"
        )
    return table


def generate_run_report(run_dir):
    """
    Generate the Markdown report of a run.

    Args:
        run_dir (str): Run directory written by train

    Returns:
        str: Complete markdown report
    """
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    records = read_metrics(metrics_path) if os.path.exists(metrics_path) else []
    events = read_events(run_dir)
    config_text = load_text_file(os.path.join(run_dir, "config.txt"))

    nir_path = os.path.join(run_dir, "nir_history.csv")
    nir_history = read_nir_history(nir_path) if os.path.exists(nir_path) else []
    nir_table = generate_nir_table(nir_history)
    if not nir_history:
        nir_table += "\n*(No re-estimation recorded for this run.)*"

    evaluation = load_json_file(os.path.join(run_dir, "eval.json"), {})
    if evaluation:
        pass_section = (
            f"pass@{evaluation['k']} = {evaluation['rate']:.3f} over "
            f"{len(evaluation['passed'])} problems"
        )
        unbiased = evaluation.get("unbiased", {})
        if len(unbiased) > 1:
            pass_section += "\n\n| k | pass@k | unbiased |\n|---|---|---|\n" + "\n".join(
                f"| {k} | {evaluation['curve'][k]:.3f} | {unbiased[k]:.3f} |"
                for k in sorted(unbiased, key=int)
            )
    else:
        pass_section = "*(No evaluation available. Run eval to generate this content.)*"

    ppl_path = os.path.join(run_dir, "ppl.csv")
    if os.path.exists(ppl_path):
        ppl_section = generate_ppl_table(read_ppl_table(ppl_path))
    else:
        ppl_section = "*(No PPL study available. Run ppl-study to generate this content.)*"

    name = os.path.basename(os.path.normpath(run_dir))
    report = f"""# {name} Run Report

## 1. Configuration
```
{config_text.strip() or "(config.txt not found)"}
```

## 2. Reward Curve
{generate_reward_table(records)}

## 3. Trigger Statistics
{generate_trigger_summary(records, events)}

## 4. NIR History
{nir_table}

## 5. pass@k
{pass_section}

## 6. Perplexity of Trajectory Types
{ppl_section}
"""
    return report


def run_generate_report(run_dir):
    """
    Write report.md into a run directory.

    Args:
        run_dir (str): Run directory

    Returns:
        str: Path to the generated report file, or None on failure
    """
    logger.info(f"Generating report for run {run_dir}")
    if not os.path.isdir(run_dir):
        logger.error(f"Run directory not found: {run_dir}")
        return None

    report = generate_run_report(run_dir)
    output_file_path = os.path.join(run_dir, REPORT_FILE)
    with open(output_file_path, "w", encoding="utf-8") as f:
        f.write(report)
    logger.info(f"Markdown report generated successfully at {output_file_path}")
    return output_file_path
