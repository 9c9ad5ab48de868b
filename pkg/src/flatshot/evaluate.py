"""Episodic evaluation harness and report emission.

Each task is a pure function of (protocol.seed, task_index), so results
never depend on execution order and the whole evaluation is reproducible
byte for byte under a fixed seed. The FFSC_THREADS environment variable
caps the worker count for the per-task loop (unset or empty = serial,
0 = one worker per CPU).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bank import BackboneBank, as_plain_backbone
from .data import Domain, EpisodeProtocol, sample_episode
from .errors import ConfigError, FlatshotError
from .model import Model, forward_activations
from .selection import AdaptConfig, adapt_task, ncc_classify, select_backbone
from .stats import TTestResult, ci95, paired_ttest


def _worker_count() -> int:
    raw = os.environ.get("FFSC_THREADS", "")
    if raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FFSC_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ConfigError("FFSC_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class DomainEval:
    """Evaluation outcome on one domain."""

    domain: str
    n_tasks: int
    mean_accuracy: float
    ci95_half_width: float
    accuracies: tuple[float, ...]
    tasks: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "n_tasks": self.n_tasks,
            "mean_accuracy": self.mean_accuracy,
            "ci95_half_width": self.ci95_half_width,
            "accuracies": list(self.accuracies),
            "tasks": list(self.tasks),
        }


@dataclass(frozen=True)
class EvalReport:
    """Full episodic evaluation record (retains per-task accuracies)."""

    mode: str
    n_tasks: int
    protocol: dict
    adapt: dict | None
    subject: dict
    domains: tuple[DomainEval, ...]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_tasks": self.n_tasks,
            "protocol": self.protocol,
            "adapt": self.adapt,
            "subject": self.subject,
            "domains": [d.to_dict() for d in self.domains],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        domains = tuple(
            DomainEval(
                domain=e["domain"],
                n_tasks=e["n_tasks"],
                mean_accuracy=e["mean_accuracy"],
                ci95_half_width=e["ci95_half_width"],
                accuracies=tuple(e["accuracies"]),
                tasks=tuple(e["tasks"]),
            )
            for e in d["domains"]
        )
        return cls(
            mode=d["mode"],
            n_tasks=d["n_tasks"],
            protocol=d["protocol"],
            adapt=d["adapt"],
            subject=d["subject"],
            domains=domains,
        )


def _plain_ncc_predictions(model: Model, episode) -> np.ndarray:
    sup = forward_activations(model, episode.support.inputs)[0][-1]
    qry = forward_activations(model, episode.query.inputs)[0][-1]
    return ncc_classify(sup, episode.support.labels, qry)


def _seen_entry(bank: BackboneBank, domain_name: str) -> str:
    for name in bank.list():
        if bank.provenance(name).source_dataset == domain_name:
            return name
    raise ConfigError(f"bank has no entry trained on seen domain {domain_name!r}")


def evaluate(
    subject,
    domains,
    n_tasks: int,
    protocol: EpisodeProtocol,
    mode: str = "unseen",
    adapt_cfg: AdaptConfig | None = None,
) -> EvalReport:
    """Run the episodic protocol for every domain and task index.

    ``subject`` is a single Model or a BackboneBank. With a bank in
    ``unseen`` mode the backbone is chosen per task by support-set
    scoring; in ``seen`` mode the entry whose provenance names the domain
    is used. A failed task aborts the run with its task index attached.
    """
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    if mode not in ("seen", "unseen"):
        raise ConfigError(f"mode must be seen or unseen, got {mode!r}")
    domains = list(domains)
    bank = subject if isinstance(subject, BackboneBank) else None
    fixed = None if bank is not None else as_plain_backbone(subject)

    def run_task(domain: Domain, task_index: int) -> dict:
        try:
            episode = sample_episode(domain, protocol, task_index)
            selection = None
            if bank is not None:
                if mode == "unseen":
                    report = select_backbone(bank, episode.support)
                    selection = report.to_dict()
                    chosen = report.chosen
                else:
                    chosen = _seen_entry(bank, domain.name)
                    selection = {"chosen": chosen, "scores": None, "tie_applied": False}
                model = as_plain_backbone(bank.get(chosen)[0])
            else:
                model = fixed
            if adapt_cfg is not None and adapt_cfg.steps > 0:
                _, preds = adapt_task(model, episode, adapt_cfg)
            else:
                preds = _plain_ncc_predictions(model, episode)
            accuracy = float(np.mean(preds == episode.query.labels))
            return {
                "task_index": task_index,
                "way": episode.way,
                "n_query": int(episode.query.n),
                "accuracy": accuracy,
                "selection": selection,
            }
        except FlatshotError as e:
            raise type(e)(f"domain {domain.name!r} task {task_index}: {e}") from e

    workers = _worker_count()
    evals = []
    for domain in domains:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                tasks = list(pool.map(lambda t: run_task(domain, t), range(n_tasks)))
        else:
            tasks = [run_task(domain, t) for t in range(n_tasks)]
        accuracies = [t["accuracy"] for t in tasks]
        if len(accuracies) >= 2:
            mean, half = ci95(accuracies)
        else:
            mean, half = float(accuracies[0]), 0.0
        evals.append(
            DomainEval(
                domain=domain.name,
                n_tasks=n_tasks,
                mean_accuracy=mean,
                ci95_half_width=half,
                accuracies=tuple(accuracies),
                tasks=tuple(tasks),
            )
        )

    if bank is not None:
        subject_desc = {"kind": "bank", "entries": bank.list()}
    else:
        subject_desc = {
            "kind": "model",
            "layer_dims": list(fixed.layer_dims),
            "activation": fixed.activation,
        }
    return EvalReport(
        mode=mode,
        n_tasks=n_tasks,
        protocol=json.loads(protocol.to_json()),
        adapt=adapt_cfg.to_dict() if adapt_cfg is not None else None,
        subject=subject_desc,
        domains=tuple(evals),
    )


def emit_report(report, format: str = "json", path=None) -> str:
    """Serialise a report to JSON (full) or CSV (per-domain summary).

    Returns the emitted text; writes it to ``path`` when given. CSV rows
    are domain, n_tasks, mean, ci95 at six significant digits.
    """
    if format == "json":
        if hasattr(report, "to_json"):
            text = report.to_json() + "\n"
        else:
            text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    elif format == "csv":
        domains = report.domains if isinstance(report, EvalReport) else report["domains"]
        rows = []
        for d in domains:
            entry = d.to_dict() if hasattr(d, "to_dict") else d
            rows.append(
                [
                    entry["domain"],
                    str(entry["n_tasks"]),
                    f"{entry['mean_accuracy']:.6g}",
                    f"{entry['ci95_half_width']:.6g}",
                ]
            )
        lines = ["domain,n_tasks,mean,ci95"]
        lines += [",".join(r) for r in rows]
        text = "\n".join(lines) + "\n"
    else:
        raise ConfigError(f"unknown report format {format!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    return text


def paired_task_accuracies(a: EvalReport, b: EvalReport) -> tuple[np.ndarray, np.ndarray]:
    """Align two reports task by task for a paired comparison."""
    if [d.domain for d in a.domains] != [d.domain for d in b.domains]:
        raise ConfigError("reports cover different domains")
    xs, ys = [], []
    for da, db in zip(a.domains, b.domains):
        if da.n_tasks != db.n_tasks:
            raise ConfigError(f"task counts differ on domain {da.domain!r}")
        xs.extend(da.accuracies)
        ys.extend(db.accuracies)
    return np.asarray(xs), np.asarray(ys)


def compare_reports(a: EvalReport, b: EvalReport) -> TTestResult:
    """Paired t-test over per-task accuracies of two aligned reports."""
    xs, ys = paired_task_accuracies(a, b)
    return paired_ttest(xs, ys)
