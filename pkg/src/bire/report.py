"""Run artifacts: a plain-text summary, a delimited trace, and a
convergence figure rendered straight to disk."""

from __future__ import annotations

import os

import matplotlib
import numpy as np

matplotlib.use("Agg")  # file output only, no display server

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ContractViolation  # noqa: E402
from .mcem import TraceEntry  # noqa: E402


def _fmt(value) -> str:
    return f"{float(value):.17g}"


def trace_table(traces: dict[str, list[TraceEntry]]) -> str:
    """Tab-separated trace rows for every labelled run, one header line.

    The factor variances are joined with commas inside one column so the
    table width does not depend on r.
    """
    lines = ["label\titeration\tL\tloglik\tsigma2_alpha\tsigma2_beta"
             "\tsigma2_u\tsigma2_v"]
    for label, trace in traces.items():
        if "\t" in label or "\n" in label:
            raise ContractViolation(f"label {label!r} breaks the table")
        for entry in trace:
            su = ",".join(_fmt(v) for v in entry.sigma2_u) or "-"
            lines.append("\t".join([
                label, str(entry.iteration), str(entry.L),
                _fmt(entry.loglik), _fmt(entry.sigma2_alpha),
                _fmt(entry.sigma2_beta), su, _fmt(entry.sigma2_v)]))
    return "\n".join(lines) + "\n"


def plot_traces(traces: dict[str, list[TraceEntry]], path) -> None:
    """Render log-likelihood and bias-variance traces to an image file."""
    fig, (ax_ll, ax_var) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, trace in traces.items():
        its = [e.iteration for e in trace]
        ax_ll.plot(its, [e.loglik for e in trace], label=label)
        ax_var.plot(its, [e.sigma2_alpha for e in trace], label=label)
    ax_ll.set_xlabel("iteration")
    ax_ll.set_ylabel("complete-data log-likelihood")
    ax_var.set_xlabel("iteration")
    ax_var.set_ylabel("sigma2_alpha")
    if traces and len(traces) <= 8:
        ax_var.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_single_fit(method: str, schedule, trace: list[TraceEntry],
                      M: int, N: int, n_obs: int, seconds: float) -> str:
    """Human-readable summary of one single-partition fit."""
    lines = [f"method: {method}",
             f"observations: {n_obs} (M={M}, N={N})",
             f"iterations: {schedule.num_iters}",
             f"sample sizes: {list(schedule.sample_vector)}",
             f"elapsed: {seconds:.1f}s"]
    if trace:
        last = trace[-1]
        lines.append(f"final loglik: {last.loglik:.6f}")
        lines.append(f"final sigma2_alpha: {last.sigma2_alpha:.6f}")
        lines.append(f"final sigma2_beta: {last.sigma2_beta:.6f}")
    return "\n".join(lines) + "\n"


def write_artifacts(directory, summary: str,
                    traces: dict[str, list[TraceEntry]]) -> dict[str, str]:
    """Write report.txt, trace.tsv, and trace.png into ``directory``.

    Returns the paths written, keyed by artifact name.
    """
    os.makedirs(directory, exist_ok=True)
    paths = {"report": os.path.join(directory, "report.txt"),
             "trace": os.path.join(directory, "trace.tsv"),
             "figure": os.path.join(directory, "trace.png")}
    with open(paths["report"], "w", encoding="utf-8") as fh:
        fh.write(summary)
    with open(paths["trace"], "w", encoding="utf-8") as fh:
        fh.write(trace_table(traces))
    plot_traces(traces, paths["figure"])
    return paths
