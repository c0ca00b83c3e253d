"""
Output formatting helpers for the rest-adapt CLI.

Renders run reports, sweep / ablation tables, evaluation results and gradient
checks either as human-readable tables or as JSON.  `format_report_tsv` is
also used by the pipeline to write `report.tsv`.

Key functions: `format_report_table`, `format_report_tsv`, `format_report_json`,
`format_sweep_table`, `format_ablation_table`, `format_eval`, `format_gradcheck`,
`format_json`
"""

import json
import math
from collections.abc import Sequence
from typing import Any

from rest_adapt.adapt import AblationRow, EvalResult, RunReport, SweepRow
from rest_adapt.nncore.gradients import GradCheckReport


def format_json(payload: Any) -> str:
    """
    Pretty-printed JSON with non-finite floats rendered as null.
    """
    return json.dumps(_finite(payload), indent=2, ensure_ascii=False)


def _finite(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def _pct(value: float | None) -> str:
    return "-" if value is None else f"{100 * value:.2f}"


def format_report_table(report: RunReport) -> str:
    """
    Per-subject accuracies (percent) with a mean ± std footer.

    Columns: Subject, Baseline, Adapted, Gain, Test, RS, Calibrated, Flagged, Epoch.
    """
    if not report.subjects:
        return "No subjects evaluated."

    lines = []
    lines.append(f"{'Subject':<10} {'Baseline':>9} {'Adapted':>8} {'Gain':>7} {'Test':>5} {'RS':>5} {'Calib':>6} {'Flag':>5} {'Epoch':>6}")
    lines.append("-" * 70)
    for row in report.subjects:
        gain = 100 * (row.accuracy - row.baseline_accuracy)
        lines.append(f"{row.subject:<10} {_pct(row.baseline_accuracy):>9} {_pct(row.accuracy):>8} {gain:>+7.2f} {row.n_test:>5} "
                     f"{row.n_rs:>5} {row.n_calibrated:>6} {row.n_flagged:>5} {row.selected_epoch:>6}")
    lines.append("-" * 70)
    lines.append(f"{'Mean':<10} {_pct(report.mean_baseline):>9} {_pct(report.mean_accuracy):>8}")
    lines.append(f"{'Std':<10} {_pct(report.std_baseline):>9} {_pct(report.std_accuracy):>8}")
    lines.append(f"\n{len(report.subjects)} subject(s), seed {report.seed}")
    return "\n".join(lines)


def format_report_tsv(report: RunReport) -> str:
    """
    Tab-separated per-subject rows (accuracies as fractions) with a header line.
    """
    lines = ["subject\tbaseline_accuracy\taccuracy\tn_test\tn_rs\tn_calibrated\tn_flagged\tselected_epoch\tcheckpoint_hash"]
    for row in report.subjects:
        lines.append(f"{row.subject}\t{row.baseline_accuracy:.6f}\t{row.accuracy:.6f}\t{row.n_test}\t{row.n_rs}\t{row.n_calibrated}\t"
                     f"{row.n_flagged}\t{row.selected_epoch}\t{row.checkpoint_hash}")
    return "\n".join(lines) + "\n"


def format_report_json(report: RunReport) -> str:
    return format_json(report.model_dump(mode="json"))


def format_sweep_table(target: str, rows: Sequence[SweepRow]) -> str:
    """
    Accuracy per resting-signal fraction for one target subject.
    """
    if not rows:
        return "No sweep fractions."
    lines = [f"RS-fraction sweep for {target}"]
    lines.append(f"{'Fraction':>8} {'RS':>5} {'Calib':>6} {'Accuracy':>9} {'Model':<18}")
    lines.append("-" * 52)
    for row in rows:
        accuracy = "skipped" if row.skipped else _pct(row.accuracy)
        lines.append(f"{row.fraction:>8.2f} {row.n_rs:>5} {row.n_calibrated:>6} {accuracy:>9} {row.checkpoint_hash:<18}")
    lines.append(f"\n{len(rows)} fraction(s)")
    return "\n".join(lines)


def format_ablation_table(target: str, rows: Sequence[AblationRow]) -> str:
    """
    Adaptation accuracy per synthesis method and initialization.
    """
    if not rows:
        return "No ablation rows."
    lines = [f"Synthesis ablation for {target}"]
    lines.append(f"{'Method':<14} {'Init':<6} {'Calib':>6} {'Accuracy':>9}")
    lines.append("-" * 38)
    for row in rows:
        lines.append(f"{row.method:<14} {row.init:<6} {row.n_calibrated:>6} {_pct(row.accuracy):>9}")
    return "\n".join(lines)


def eval_to_dict(target: str, result: EvalResult) -> dict[str, Any]:
    return {
        "subject": target,
        "accuracy": result.accuracy,
        "n_trials": result.n_trials,
        "confusion": result.confusion,
    }


def format_eval(target: str, result: EvalResult, label: str = "accuracy") -> str:
    """
    Accuracy line followed by the confusion matrix (rows = true class).
    """
    n_classes = len(result.confusion)
    lines = [f"{target}: {label} {_pct(result.accuracy)}% on {result.n_trials} trial(s)"]
    lines.append(f"{'true/pred':>10} " + " ".join(f"{k:>6}" for k in range(n_classes)))
    for k, counts in enumerate(result.confusion):
        lines.append(f"{k:>10} " + " ".join(f"{c:>6}" for c in counts))
    return "\n".join(lines)


def gradcheck_to_dict(report: GradCheckReport, tolerance: float) -> dict[str, Any]:
    return {
        "target": report.target,
        "n_coords": report.n_coords,
        "max_rel_error": report.max_rel_error,
        "max_abs_error": report.max_abs_error,
        "worst": report.worst,
        "passed": report.passed(tolerance),
    }


def format_gradcheck(reports: Sequence[GradCheckReport], tolerance: float) -> str:
    """
    One line per checked composite with the maximum relative error.
    """
    lines = [f"{'Target':<12} {'Coords':>7} {'Max rel err':>12} {'Max abs err':>12} {'Status':<6} {'Worst'}"]
    lines.append("-" * 72)
    for r in reports:
        status = "ok" if r.passed(tolerance) else "FAIL"
        lines.append(f"{r.target:<12} {r.n_coords:>7} {r.max_rel_error:>12.3e} {r.max_abs_error:>12.3e} {status:<6} {r.worst}")
    lines.append(f"\ntolerance {tolerance:g}")
    return "\n".join(lines)
