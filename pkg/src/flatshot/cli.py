"""Command-line entry point.

Subcommands: gen-data, train, finetune, bank (list/inspect), select,
eval, flatness, landscape, bound, compare. Every numeric option can also
come from a JSON config file (--config); explicit flags win. Exit codes:
0 success, 1 user error (bad usage, bad files, invalid configuration),
2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bank import BackboneBank, Provenance, as_plain_backbone, finetune, read_checkpoint
from .data import (
    EpisodeProtocol,
    SyntheticSpec,
    gen_synthetic_domains,
    load_domain,
    sample_episode,
    save_domain,
    with_label_noise,
)
from .errors import FlatshotError
from .evaluate import EvalReport, compare_reports, emit_report, evaluate
from .flatness import bound_report, flatness_report, landscape_slice, orthonormal_directions
from .model import Batch, init_model, param_count
from .selection import AdaptConfig, select_backbone
from .training import TrainConfig, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def _add_train_flags(p):
    p.add_argument("--config", type=Path, default=None, help="TrainConfig JSON file")
    p.add_argument("--objective", choices=("erm", "sam"), default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, dest="base_lr")
    p.add_argument("--min-lr", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None, dest="total_iterations")
    p.add_argument("--restart", type=int, default=None, dest="restart_period")
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    _add_seed(p)


def _train_config(args) -> TrainConfig:
    base = {}
    if args.config is not None:
        base = json.loads(Path(args.config).read_text())
    for key in (
        "objective",
        "rho",
        "batch_size",
        "base_lr",
        "min_lr",
        "total_iterations",
        "restart_period",
        "momentum",
        "weight_decay",
        "seed",
    ):
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    defaults = {k: v for k, v in TrainConfig().__dict__.items()}
    defaults.update(base)
    if base.get("total_iterations") is not None and base.get("restart_period") is None:
        defaults["restart_period"] = min(
            defaults["restart_period"], max(base["total_iterations"], 1)
        )
    return TrainConfig(**defaults)


def _add_protocol_flags(p):
    p.add_argument("--protocol", type=Path, default=None, help="EpisodeProtocol JSON file")
    p.add_argument("--min-way", type=int, default=None)
    p.add_argument("--max-way", type=int, default=None)
    p.add_argument("--min-shot", type=int, default=None)
    p.add_argument("--max-shot", type=int, default=None)
    p.add_argument("--query", type=int, default=None, dest="query_per_class")


def _protocol(args) -> EpisodeProtocol:
    base = {}
    if args.protocol is not None:
        base = json.loads(Path(args.protocol).read_text())
    for key in ("min_way", "max_way", "min_shot", "max_shot", "query_per_class", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    defaults = {
        "min_way": 2,
        "max_way": 5,
        "min_shot": 1,
        "max_shot": 5,
        "query_per_class": 5,
        "seed": 0,
    }
    defaults.update(base)
    return EpisodeProtocol(**defaults)


def _load_subject_model(args):
    if getattr(args, "model", None) is not None:
        model, provenance = read_checkpoint(args.model)
        return model, provenance
    bank = BackboneBank(args.bank)
    return bank.get(args.name)


def _parse_hidden(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise UsageError(f"--hidden expects comma-separated integers, got {text!r}")


def _held_out_batch(domain, size: int, seed: int) -> Batch:
    rng = np.random.default_rng([seed, 99])
    idx = rng.choice(domain.n, size=min(size, domain.n), replace=False)
    return Batch(domain.samples[idx], domain.local_labels()[idx])


def _cmd_gen_data(args) -> int:
    base = {}
    if args.config is not None:
        base = json.loads(Path(args.config).read_text())
    for key, flag in (
        ("n_domains", "domains"),
        ("classes_per_domain", "classes"),
        ("samples_per_class", "samples_per_class"),
        ("dim", "dim"),
        ("delta", "delta"),
        ("sigma", "sigma"),
        ("mean_scale", "mean_scale"),
        ("layout", "layout"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    defaults = {
        "n_domains": 3,
        "classes_per_domain": 4,
        "samples_per_class": 50,
        "dim": 8,
        "delta": 1.0,
        "sigma": 0.5,
        "mean_scale": 2.0,
        "layout": "shared",
    }
    defaults.update(base)
    spec = SyntheticSpec(**defaults)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domains = gen_synthetic_domains(spec, seed)
    (out / "spec.json").write_text(spec.to_json() + "\n")
    for dom in domains:
        save_domain(dom, out / f"{dom.name}.npz")
    print(f"wrote {len(domains)} domains to {out} (seed {seed})")
    return 0


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    domain = load_domain(args.data)
    if args.label_noise:
        domain = with_label_noise(domain, args.label_noise, cfg.seed)
    hidden = _parse_hidden(args.hidden)
    dims = [domain.dim] + hidden + [domain.n_classes]
    model = init_model(dims, args.activation, seed=cfg.seed)
    trained, history = train(model, domain, cfg)
    bank = BackboneBank(args.out)
    bank.put(
        args.name,
        trained,
        Provenance(
            objective=cfg.objective,
            rho=cfg.rho,
            source_dataset=domain.name,
            finetune_mode="none",
            train_config_hash=cfg.digest(),
        ),
    )
    final_loss = float(history.loss[-1]) if cfg.total_iterations else float("nan")
    print(
        f"trained {args.name} ({cfg.objective}, rho={cfg.rho}) on {domain.name}: "
        f"final loss {final_loss:.4f}, {history.wall_time:.1f}s, "
        f"{param_count(trained)} params"
    )
    return 0


def _cmd_finetune(args) -> int:
    cfg = _train_config(args)
    bank = BackboneBank(args.bank)
    base_model, base_prov = bank.get(args.base)
    domain = load_domain(args.data)
    if args.label_noise:
        domain = with_label_noise(domain, args.label_noise, cfg.seed)
    tuned, history = finetune(
        as_plain_backbone(base_model), domain, cfg, mode=args.mode, rank=args.rank
    )
    bank.put(
        args.name,
        tuned,
        Provenance(
            objective=cfg.objective,
            rho=cfg.rho,
            source_dataset=domain.name,
            parent=args.base,
            finetune_mode=args.mode,
            rank=args.rank if args.mode == "lora" else None,
            train_config_hash=cfg.digest(),
        ),
    )
    final_loss = float(history.loss[-1]) if cfg.total_iterations else float("nan")
    print(
        f"fine-tuned {args.base} -> {args.name} ({args.mode}) on {domain.name}: "
        f"final loss {final_loss:.4f}, {history.wall_time:.1f}s"
    )
    return 0


def _cmd_bank(args) -> int:
    bank = BackboneBank(args.bank)
    if args.bank_action == "list":
        for name in bank.list():
            p = bank.provenance(name)
            parent = f" parent={p.parent}" if p.parent else ""
            print(
                f"{name}: {p.objective} rho={p.rho} data={p.source_dataset} "
                f"mode={p.finetune_mode}{parent}"
            )
        return 0
    model, provenance = bank.get(args.name)
    print(
        json.dumps(
            {
                "name": args.name,
                "layer_dims": list(model.layer_dims),
                "activation": model.activation,
                "gates_on": model.gates_on,
                "param_count": param_count(model),
                "provenance": provenance.to_dict(),
            },
            sort_keys=True,
            indent=2,
        )
    )
    return 0


def _cmd_select(args) -> int:
    bank = BackboneBank(args.bank)
    domain = load_domain(args.data)
    protocol = _protocol(args)
    counts: dict[str, int] = {}
    records = []
    for task in range(args.tasks):
        episode = sample_episode(domain, protocol, task)
        report = select_backbone(bank, episode.support)
        counts[report.chosen] = counts.get(report.chosen, 0) + 1
        records.append({"task_index": task, **report.to_dict()})
    summary = {
        "domain": domain.name,
        "tasks": args.tasks,
        "chosen_counts": {k: counts[k] for k in sorted(counts)},
        "selections": records,
    }
    text = json.dumps(summary, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(f"selection on {domain.name}: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return 0


def _cmd_eval(args) -> int:
    if (args.bank is None) == (args.model is None):
        raise UsageError("eval needs exactly one of --bank or --model")
    subject = BackboneBank(args.bank) if args.bank else read_checkpoint(args.model)[0]
    domains = [load_domain(p) for p in args.data]
    protocol = _protocol(args)
    adapt = None
    if args.adapt_steps:
        adapt = AdaptConfig(
            steps=args.adapt_steps,
            lr=args.adapt_lr,
            rank=args.adapt_rank,
            seed=protocol.seed,
        )
    report = evaluate(subject, domains, args.tasks, protocol, mode=args.mode, adapt_cfg=adapt)
    if args.out:
        emit_report(report, "json", args.out)
    if args.csv:
        emit_report(report, "csv", args.csv)
    for d in report.domains:
        print(
            f"{d.domain}: {d.mean_accuracy * 100:.2f} +- {d.ci95_half_width * 100:.2f} "
            f"({d.n_tasks} tasks)"
        )
    return 0


def _cmd_flatness(args) -> int:
    if (args.bank is None or args.name is None) and args.model is None:
        raise UsageError("flatness needs --model or --bank with --name")
    model, _ = _load_subject_model(args)
    model = as_plain_backbone(model)
    domain = load_domain(args.data)
    if model.n_classes != domain.n_classes:
        raise UsageError(
            f"model head ({model.n_classes}) does not match domain classes ({domain.n_classes})"
        )
    seed = args.seed if args.seed is not None else 0
    batch = _held_out_batch(domain, args.batch_size, seed)
    report = flatness_report(
        model,
        batch,
        k=args.top_k,
        n_probes=args.probes,
        mode=args.mode,
        seed=seed,
        batch_label=f"{domain.name}[n={batch.n},seed={seed}]",
    )
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(
        f"trace {report.trace:.4f} +- {report.trace_stderr:.4f} ({report.trace_mode}), "
        f"top eigenvalues {[round(v, 4) for v in report.eigenvalues]}"
    )
    return 0


def _cmd_landscape(args) -> int:
    if (args.bank is None or args.name is None) and args.model is None:
        raise UsageError("landscape needs --model or --bank with --name")
    model, _ = _load_subject_model(args)
    model = as_plain_backbone(model)
    domain = load_domain(args.data)
    if model.n_classes != domain.n_classes:
        raise UsageError(
            f"model head ({model.n_classes}) does not match domain classes ({domain.n_classes})"
        )
    seed = args.seed if args.seed is not None else 0
    batch = _held_out_batch(domain, args.batch_size, seed)
    dirs = orthonormal_directions(param_count(model), args.dims, np.random.default_rng(seed))
    grid = landscape_slice(
        model, batch, dirs, half_range=args.half_range, steps=args.steps, rho=args.rho
    )
    grid.to_csv(args.out)
    print(f"wrote {args.dims}-D landscape grid ({args.steps} steps per axis) to {args.out}")
    return 0


def _cmd_bound(args) -> int:
    cfg = _train_config(args)
    bank = BackboneBank(args.bank)
    model, _ = bank.get(args.name)
    source = load_domain(args.source)
    if args.label_noise:
        source = with_label_noise(source, args.label_noise, cfg.seed)
    targets = [load_domain(p) for p in args.targets]
    protocol = _protocol(args)
    subject = bank if args.select else None
    report = bound_report(
        as_plain_backbone(model),
        source,
        subject,
        targets,
        protocol,
        cfg,
        n_tasks=args.tasks,
    )
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(
        f"flat-objective loss {report.sam_loss:.4f}, plain-min estimate {report.erm_min:.4f}, "
        f"gap {report.sam_erm_gap:.4f}, expected divergence {report.expected_divergence:.4f}, "
        f"target gap {report.target_gap:.4f}"
    )
    return 0


def _cmd_compare(args) -> int:
    rep_a = EvalReport.from_dict(json.loads(Path(args.report_a).read_text()))
    rep_b = EvalReport.from_dict(json.loads(Path(args.report_b).read_text()))
    result = compare_reports(rep_a, rep_b)
    print(json.dumps(result.to_dict(), sort_keys=True, indent=2))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="flatshot", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate synthetic domains")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, default=None, help="SyntheticSpec JSON file")
    p.add_argument("--domains", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--samples-per-class", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--mean-scale", type=float, default=None)
    p.add_argument("--layout", choices=("shared", "independent"), default=None)
    _add_seed(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a backbone into a bank")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="bank directory")
    p.add_argument("--name", required=True)
    p.add_argument("--hidden", default="32,16", help="comma-separated hidden widths")
    p.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    p.add_argument("--label-noise", type=float, default=0.0)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a bank entry")
    p.add_argument("--bank", required=True, type=Path)
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--name", required=True)
    p.add_argument("--mode", choices=("vanilla", "lora"), default="vanilla")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--label-noise", type=float, default=0.0)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("bank", help="list or inspect bank entries")
    bank_sub = p.add_subparsers(dest="bank_action", metavar="ACTION", parser_class=_Parser)
    pl = bank_sub.add_parser("list")
    pl.add_argument("--bank", required=True, type=Path)
    pl.set_defaults(func=_cmd_bank, bank_action="list")
    pi = bank_sub.add_parser("inspect")
    pi.add_argument("--bank", required=True, type=Path)
    pi.add_argument("--name", required=True)
    pi.set_defaults(func=_cmd_bank, bank_action="inspect")

    p = sub.add_parser("select", help="score backbones per task")
    p.add_argument("--bank", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--tasks", type=int, default=20)
    p.add_argument("--out", type=Path, default=None)
    _add_protocol_flags(p)
    _add_seed(p)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("eval", help="episodic evaluation")
    p.add_argument("--bank", type=Path, default=None)
    p.add_argument("--model", type=Path, default=None, help="checkpoint file")
    p.add_argument("--data", required=True, nargs="+", type=Path)
    p.add_argument("--mode", choices=("seen", "unseen"), default="unseen")
    p.add_argument("--tasks", type=int, default=100)
    p.add_argument("--adapt-steps", type=int, default=0)
    p.add_argument("--adapt-lr", type=float, default=0.05)
    p.add_argument("--adapt-rank", type=int, default=2)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--csv", type=Path, default=None)
    _add_protocol_flags(p)
    _add_seed(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("flatness", help="Hessian trace and eigenvalues")
    p.add_argument("--bank", type=Path, default=None)
    p.add_argument("--name", default=None)
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--mode", choices=("exact", "hutchinson"), default=None)
    p.add_argument("--out", type=Path, default=None)
    _add_seed(p)
    p.set_defaults(func=_cmd_flatness)

    p = sub.add_parser("landscape", help="loss slice grids")
    p.add_argument("--bank", type=Path, default=None)
    p.add_argument("--name", default=None)
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--dims", type=int, choices=(1, 2), default=1)
    p.add_argument("--half-range", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=21)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--out", required=True, type=Path)
    _add_seed(p)
    p.set_defaults(func=_cmd_landscape)

    p = sub.add_parser("bound", help="generalisation bound terms")
    p.add_argument("--bank", required=True, type=Path)
    p.add_argument("--name", required=True)
    p.add_argument("--source", required=True, type=Path)
    p.add_argument("--targets", required=True, nargs="+", type=Path)
    p.add_argument("--tasks", type=int, default=50)
    p.add_argument("--select", action="store_true", help="pick per task from the whole bank")
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--out", type=Path, default=None)
    _add_protocol_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_bound)

    p = sub.add_parser("compare", help="paired t-test of two eval reports")
    p.add_argument("report_a", type=Path)
    p.add_argument("report_b", type=Path)
    p.set_defaults(func=_cmd_compare)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        if getattr(args, "bank_action", None) is None and args.command == "bank":
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (FlatshotError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
