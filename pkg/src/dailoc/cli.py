"""Command-line entry point.

A run directory accumulates everything one experiment produces:

    RUN/scenario/...            from `generate`
    RUN/checkpoints/NNN_*.ckpt  one per lifecycle event
    RUN/events.json             append-only event log
    RUN/manifests/NNN_*.json    config echo + seeds per command
    RUN/reports/...             adapt reports, eval.json, report.txt/.tsv

Commands: generate, pretrain, onboard, adapt, evaluate, report, gradcheck.
Nothing here depends on wall-clock time, so repeated runs with the same
seeds produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import backend, cesa, dataio, evaluate, incremental, mlvae, nn, simgen
from .errors import DailocError


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_events(run: Path) -> list:
    path = run / "events.json"
    if not path.exists():
        return []
    return json.loads(path.read_text(encoding="utf-8"))

def _append_event(run: Path, event: dict) -> None:
    events = _read_events(run)
    event["index"] = len(events)
    events.append(event)
    _write_json(run / "events.json", events)


def _write_manifest(run: Path, command: str, args: argparse.Namespace) -> None:
    events = _read_events(run)
    echo = {k: v for k, v in vars(args).items() if k not in ("func", "run")}
    _write_json(run / "manifests" / f"{len(events):03d}_{command}.json",
                {"command": command, "config": echo, "backend": backend.BACKEND_NAME})


def _latest_checkpoint(run: Path) -> Path:
    events = _read_events(run)
    if not events:
        raise DailocError(f"{run}: no lifecycle events yet; run pretrain first")
    return run / events[-1]["checkpoint"]


def _next_ckpt_name(run: Path, label: str) -> str:
    return f"checkpoints/{len(_read_events(run)):03d}_{label}.ckpt"


def _adaptation_config(args) -> incremental.AdaptationConfig:
    cfg = incremental.AdaptationConfig(seed=args.seed)
    for name in ("epochs", "batch_size", "lr", "tau"):
        if getattr(args, name, None) is not None:
            cfg = dataclasses.replace(cfg, **{name: getattr(args, name)})
    if getattr(args, "no_cesa", False):
        cfg = dataclasses.replace(cfg, use_cesa=False)
    if getattr(args, "no_stage1", False):
        cfg = dataclasses.replace(cfg, use_stage1=False)
    if getattr(args, "no_disentangle", False):
        cfg = dataclasses.replace(cfg, per_sample_noise=True)
    return cfg


# -- subcommands ------------------------------------------------------------------


def cmd_generate(args) -> int:
    scenario = simgen.generate_scenario(
        seed=args.seed, preset=args.preset, n_epochs=args.epochs,
        samples_per_rp=args.samples_per_rp,
        train_samples_per_rp=args.train_samples_per_rp,
        drift_severity=args.drift_severity)
    simgen.save_scenario(Path(args.run) / "scenario", scenario)
    _write_manifest(Path(args.run), "generate", args)
    print(f"generated preset={args.preset} seed={args.seed} "
          f"rps={scenario.layout.n_rps} aps={scenario.layout.n_aps} "
          f"epochs={scenario.n_epochs} -> {args.run}/scenario")
    return 0


def cmd_pretrain(args) -> int:
    run = Path(args.run)
    scenario = simgen.load_scenario(run / "scenario")
    arch = mlvae.Architecture(input_dim=scenario.layout.n_aps,
                              n_rps=scenario.layout.n_rps)
    state = incremental.PipelineState.init(arch, seed=args.seed)
    cfg = _adaptation_config(args)
    if args.epochs is None:
        cfg = dataclasses.replace(cfg, epochs=200)
    base = scenario.base_device
    report = incremental.pretrain_offline(state, scenario.fetch("train", base, 0), cfg)
    _write_manifest(run, "pretrain", args)
    ckpt = _next_ckpt_name(run, f"pretrain_{base}_e0")
    (run / ckpt).parent.mkdir(parents=True, exist_ok=True)
    incremental.save_checkpoint(run / ckpt, state)
    _append_event(run, {"event": "pretrain", "device": base, "epoch": 0,
                        "checkpoint": ckpt, "accuracy": report.final_accuracy})
    print(f"pretrained on {base}@e0: accuracy={report.final_accuracy:.3f} "
          f"final_loss={report.curve[-1]['total']:.4f} -> {ckpt}")
    return 0


def cmd_onboard(args) -> int:
    run = Path(args.run)
    scenario = simgen.load_scenario(run / "scenario")
    state = incremental.load_checkpoint(_latest_checkpoint(run))
    epoch = args.epoch if args.epoch is not None else scenario.intro_epochs[args.device]
    cfg = _adaptation_config(args)
    report = incremental.onboard_device(
        state, scenario.fetch("onboard", args.device, epoch),
        incremental.DomainKey(args.device, epoch), cfg)
    _write_manifest(run, "onboard", args)
    ckpt = _next_ckpt_name(run, f"onboard_{args.device}_e{epoch}")
    incremental.save_checkpoint(run / ckpt, state)
    _append_event(run, {"event": "onboard", "device": args.device, "epoch": epoch,
                        "checkpoint": ckpt, "accuracy": report.final_accuracy})
    print(f"onboarded {args.device}@e{epoch}: accuracy={report.final_accuracy:.3f} "
          f"memory={state.memory.total()} prototypes -> {ckpt}")
    return 0


def cmd_adapt(args) -> int:
    run = Path(args.run)
    scenario = simgen.load_scenario(run / "scenario")
    state = incremental.load_checkpoint(_latest_checkpoint(run))
    cfg = _adaptation_config(args)
    probe = None if args.no_probe else scenario.fetch("test", args.device, args.epoch)
    report = incremental.adapt_unsupervised(
        state, scenario.fetch("adapt", args.device, args.epoch),
        incremental.DomainKey(args.device, args.epoch), cfg,
        probe_records=probe,
        coords=None if args.no_probe else scenario.coordinate_table())
    _write_manifest(run, "adapt", args)
    ckpt = _next_ckpt_name(run, f"adapt_{args.device}_e{args.epoch}")
    incremental.save_checkpoint(run / ckpt, state)
    index = len(_read_events(run))
    _append_event(run, {"event": "adapt", "device": args.device, "epoch": args.epoch,
                        "checkpoint": ckpt,
                        "pl_before": report.pl_error_before,
                        "pl_after": report.pl_error_after})
    _write_json(run / "reports" / f"adapt_{index:03d}_{args.device}_e{args.epoch}.json", {
        "device": args.device, "epoch": args.epoch,
        "stage1_curve": report.stage1_curve, "stage2_curve": report.stage2_curve,
        "pseudo_label_count": report.pseudo_label_count,
        "fraction_rejected": report.fraction_rejected,
        "pl_error_before": report.pl_error_before,
        "pl_error_after": report.pl_error_after,
        "param_drift_linf": max(report.param_drift.values()) if report.param_drift else 0.0,
        "frozen_ok": report.frozen_ok,
        "total_loss": report.total_loss,
    })
    before = "-" if report.pl_error_before is None else f"{report.pl_error_before:.3f}"
    after = "-" if report.pl_error_after is None else f"{report.pl_error_after:.3f}"
    print(f"adapted {args.device}@e{args.epoch}: pseudo_labels={report.pseudo_label_count} "
          f"pl_error {before} -> {after} -> {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    scenario = simgen.load_scenario(run / "scenario")
    events = _read_events(run)
    state = incremental.load_checkpoint(_latest_checkpoint(run))
    report = evaluate.evaluate_state(state, scenario)
    payload = {"per_domain": report.per_domain, "forgetting": None}
    if len(events) >= 2:
        coords = scenario.coordinate_table()
        checkpoints = []
        for ev in events:
            model = incremental.load_checkpoint(run / ev["checkpoint"]).model
            checkpoints.append((f"{ev['index']:03d}_{ev['event']}_{ev['device']}", model))
        domains = []
        for ev in events:
            if ev["event"] in ("pretrain", "onboard"):
                domains.append((ev["device"],
                                scenario.splits[("test", ev["device"], ev["epoch"])],
                                ev["index"]))
        payload["forgetting"] = evaluate.forgetting_report(checkpoints, domains, coords)
    _write_manifest(run, "evaluate", args)
    _write_json(run / "reports" / "eval.json", payload)
    worst = max((r["max"] for r in report.per_domain), default=0.0)
    print(f"evaluated {len(report.per_domain)} domains; worst-case ED {worst:.3f} m "
          f"-> reports/eval.json")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    eval_path = run / "reports" / "eval.json"
    if not eval_path.exists():
        raise DailocError(f"{eval_path}: missing; run `dailoc evaluate` first")
    payload = json.loads(eval_path.read_text(encoding="utf-8"))
    pl_rows = []
    for path in sorted((run / "reports").glob("adapt_*.json")):
        rep = json.loads(path.read_text(encoding="utf-8"))
        pl_rows.append({"device": rep["device"], "epoch": rep["epoch"],
                        "before": rep["pl_error_before"], "after": rep["pl_error_after"]})
    manifests = sorted((run / "manifests").glob("*.json"))
    echo = {p.stem: json.loads(p.read_text(encoding="utf-8")) for p in manifests}
    report = evaluate.EvalReport(per_domain=payload["per_domain"], pseudo_label=pl_rows,
                                 forgetting=payload.get("forgetting"),
                                 config_echo=echo)
    (run / "reports" / "report.txt").write_text(evaluate.render_text(report),
                                                encoding="utf-8")
    (run / "reports" / "report.tsv").write_text(evaluate.render_tsv(report),
                                                encoding="utf-8")
    _write_manifest(run, "report", args)
    print(f"wrote {run}/reports/report.txt and report.tsv")
    return 0


def cmd_gradcheck(args) -> int:
    """Finite-difference audit of every loss term on a small seeded model."""
    from .gradaudit import run_gradient_audit

    results = run_gradient_audit(seed=args.seed, h=args.h, tolerance=args.tolerance)
    ok = True
    for name, report in results.items():
        status = "PASS" if report.passed else "FAIL"
        ok = ok and report.passed
        print(f"gradcheck {name:<28} {status}  max_rel_err={report.max_rel_error:.3e} "
              f"worst={report.worst_param}")
    print(f"gradcheck overall: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dailoc",
        description="Domain-incremental Wi-Fi RSS indoor localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic multi-domain scenario")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--preset", default="toy", choices=sorted(simgen.PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=6, help="time epochs in the world")
    p.add_argument("--samples-per-rp", type=int, default=4)
    p.add_argument("--train-samples-per-rp", type=int, default=None)
    p.add_argument("--drift-severity", type=float, default=1.0)
    p.set_defaults(func=cmd_generate)

    for name, helptext in (("pretrain", "offline pretraining on the base device"),
                           ("onboard", "supervised onboarding of a new device"),
                           ("adapt", "two-stage unsupervised adaptation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--run", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int, default=None, help="training epochs")
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        if name in ("onboard", "adapt"):
            p.add_argument("--device", required=True)
            p.add_argument("--epoch", type=int, default=None if name == "onboard" else None,
                           required=(name == "adapt"))
        if name == "adapt":
            p.add_argument("--tau", type=float, default=None,
                           help="pseudo-label confidence threshold")
            p.add_argument("--no-cesa", action="store_true",
                           help="ablation: skip the class-alignment stage")
            p.add_argument("--no-stage1", action="store_true",
                           help="ablation: skip encoder adaptation")
            p.add_argument("--no-disentangle", action="store_true",
                           help="ablation: per-sample noise instead of the domain buffer")
            p.add_argument("--no-probe", action="store_true",
                           help="skip pseudo-label error measurement")
        p.set_defaults(func={"pretrain": cmd_pretrain, "onboard": cmd_onboard,
                             "adapt": cmd_adapt}[name])

    p = sub.add_parser("evaluate", help="evaluate the latest checkpoint on all test splits")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="assemble report.txt / report.tsv")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the training math")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DailocError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
