"""
Run transcripts for dpnb.

This module writes one human-readable transcript per training run: the
configuration, the dataset summary, the privacy ledger or SGLD trace, the
privacy statement and its caveats. JSON run records remain the
machine-readable source; the transcript is for reading.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

RULE = "=" * 80
SUBRULE = "-" * 40


def _ledger_lines(ledger: List[Dict[str, Any]]) -> List[str]:
    lines = [f"{'t':>6}  {'sensitivity':>12}  {'noise scale':>12}  {'train RMSE':>10}"]
    for row in ledger:
        rmse = row.get("train_rmse")
        rmse_text = f"{rmse:10.4f}" if rmse is not None else f"{'-':>10}"
        lines.append(
            f"{row['iteration']:>6}  {row['sensitivity']:12.6f}  {row['noise_scale']:12.6f}  {rmse_text}"
        )
    return lines


def _trace_lines(trace: List[Dict[str, Any]], limit: int = 40) -> List[str]:
    lines = [f"{'t':>6}  {'step size':>12}  {'drift norm':>12}  {'noise var':>12}  {'train RMSE':>10}"]
    for row in trace[:limit]:
        rmse = row.get("train_rmse")
        rmse_text = f"{rmse:10.4f}" if rmse is not None else f"{'-':>10}"
        lines.append(
            f"{row['iteration']:>6}  {row['step_size']:12.4e}  {row['drift_norm']:12.4e}  "
            f"{row['noise_variance']:12.4e}  {rmse_text}"
        )
    if len(trace) > limit:
        lines.append(f"... {len(trace) - limit} more trace rows in run.json")
    return lines


def log_run_transcript(
    run_dir: Path,
    model: str,
    config: Dict[str, Any],
    dataset_summary: Dict[str, Any],
    run_record: Optional[Dict[str, Any]] = None,
    metrics: Optional[Dict[str, float]] = None,
) -> Optional[Path]:
    """
    Write ``transcript-<timestamp>-<model>.log`` into ``run_dir``.

    Failures are logged and swallowed: a missing transcript never fails a run.
    """
    try:
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")[:-3]
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = run_dir / f"transcript-{timestamp}-{model}.log"

        with open(log_file, "w", encoding="utf-8") as f:
            f.write(RULE + "\n")
            f.write(f"DPNB TRAINING TRANSCRIPT - {model.upper()}\n")
            f.write(f"Timestamp: {datetime.now().isoformat()}\n")
            f.write(RULE + "\n\n")

            f.write("DATASET:\n")
            f.write(SUBRULE + "\n")
            for key, value in dataset_summary.items():
                f.write(f"{key}: {value}\n")
            f.write("\n")

            f.write("CONFIGURATION:\n")
            f.write(SUBRULE + "\n")
            f.write(json.dumps(config, indent=2, sort_keys=True))
            f.write("\n\n")

            if run_record:
                if "ledger" in run_record:
                    f.write("PRIVACY LEDGER:\n")
                    f.write(SUBRULE + "\n")
                    for line in _ledger_lines(run_record["ledger"]):
                        f.write(line + "\n")
                    f.write("\n")
                if "trace" in run_record:
                    f.write("SGLD TRACE:\n")
                    f.write(SUBRULE + "\n")
                    for line in _trace_lines(run_record["trace"]):
                        f.write(line + "\n")
                    f.write(f"Retained iterations: {run_record.get('retained_iterations')}\n\n")

                f.write("PRIVACY STATEMENT:\n")
                f.write(SUBRULE + "\n")
                f.write(f"Granularity: {run_record.get('granularity', 'unknown')}\n")
                f.write(f"{run_record.get('statement', '')}\n")
                if run_record.get("caveat"):
                    f.write(f"Caveat: {run_record['caveat']}\n")
                f.write("\n")
            else:
                f.write("PRIVACY STATEMENT:\n")
                f.write(SUBRULE + "\n")
                f.write("Non-private model: no privacy guarantee.\n\n")

            if metrics:
                f.write("METRICS:\n")
                f.write(SUBRULE + "\n")
                for key, value in metrics.items():
                    f.write(f"{key}: {value:.6f}\n")
                f.write("\n")

            f.write(RULE + "\n")
            f.write("END OF TRANSCRIPT\n")
            f.write(RULE + "\n")

        logger.info(f"Run transcript logged to: {log_file}")
        return log_file

    except Exception as e:
        logger.error(f"Failed to write run transcript: {e}")
        return None
