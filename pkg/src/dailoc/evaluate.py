"""Localization metrics, lifecycle driving, and report assembly.

The error metric is the Euclidean distance between the predicted RP's
coordinates and the true RP's coordinates. Reports are emitted as plain
text (for humans) and long-format TSV (for external plotting); both are
deterministic functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dataio, incremental, mlvae, simgen
from .errors import MetricError

# -- metrics -------------------------------------------------------------------------


def euclidean_error(pred_rp: int, true_rp: int, coords: dataio.CoordinateTable) -> float:
    """Distance in meters between predicted and true RP coordinates."""
    return float(np.linalg.norm(coords.position(pred_rp) - coords.position(true_rp)))


def predict_rps(model: mlvae.MlvaeModel, records: list[dataio.FingerprintRecord]) -> np.ndarray:
    x, _ = dataio.records_matrix(records)
    _, _, z_c = model.encode(x)
    return np.argmax(model.classify(z_c), axis=1)


def localization_errors(model: mlvae.MlvaeModel, records: list[dataio.FingerprintRecord],
                        coords: dataio.CoordinateTable) -> np.ndarray:
    """Per-sample ED of the classifier's predictions on a labeled split."""
    if not records:
        raise MetricError("localization_errors: empty test split")
    preds = predict_rps(model, records)
    return np.array([
        euclidean_error(int(p), int(r.rp_label), coords)
        for p, r in zip(preds, records)
    ])


def error_stats(errors: np.ndarray) -> dict:
    return {
        "mean": float(np.mean(errors)),
        "median": float(np.median(errors)),
        "p90": float(np.percentile(errors, 90)),
        "max": float(np.max(errors)),
        "count": int(errors.size),
    }


def pseudo_label_error(model: mlvae.MlvaeModel, probe_records: list[dataio.FingerprintRecord],
                       coords: dataio.CoordinateTable, tau: float = 0.0) -> float:
    """Mean ED between pseudo-labels and true labels on a held-out probe set.

    Samples whose confidence falls below tau are excluded; with the default
    tau = 0 nothing is excluded.
    """
    if not probe_records:
        raise MetricError("pseudo_label_error: empty probe set")
    if any(not r.labeled for r in probe_records):
        raise MetricError("pseudo_label_error: probe set must be labeled")
    x, y = dataio.records_matrix(probe_records)
    labels, _, keep = incremental.pseudo_label_batch(model, x, tau)
    if not keep.any():
        raise MetricError("pseudo_label_error: every probe fell below tau")
    return float(np.mean([
        euclidean_error(int(p), int(t), coords)
        for p, t, k in zip(labels, y, keep) if k
    ]))


def forgetting_report(checkpoints: list, domains: list,
                      coords: dataio.CoordinateTable) -> dict:
    """Forgetting matrix over a model timeline.

    checkpoints: ordered [(event_label, model)];
    domains: ordered [(domain_label, test_records, onboard_event_index)].
    Entry [e][d] is the mean ED of checkpoint e on domain d's test split,
    or None while d is not yet onboarded at event e.
    """
    if len(checkpoints) < 2:
        raise MetricError("forgetting_report needs at least 2 lifecycle events")
    matrix = []
    for e, (_, model) in enumerate(checkpoints):
        row = []
        for _, records, onboarded_at in domains:
            if onboarded_at > e:
                row.append(None)
            else:
                row.append(float(np.mean(localization_errors(model, records, coords))))
        matrix.append(row)
    return {
        "events": [label for label, _ in checkpoints],
        "domains": [label for label, _, _ in domains],
        "matrix": matrix,
    }


# -- lifecycle driver ------------------------------------------------------------------


@dataclass
class LifecycleResult:
    state: incremental.PipelineState
    events: list = field(default_factory=list)       # {event, device, epoch, ...}
    snapshots: list = field(default_factory=list)    # models after each event
    adapt_reports: list = field(default_factory=list)


def run_lifecycle(scenario: simgen.Scenario, config: incremental.AdaptationConfig, *,
                  arch: mlvae.Architecture | None = None,
                  pretrain_epochs: int | None = None,
                  ordering: list[str] | None = None,
                  adapt_epochs_range: range | None = None,
                  keep_snapshots: bool = False,
                  probe: bool = False) -> LifecycleResult:
    """Drive the standard deployment schedule over a scenario.

    Pretrain on the base device's epoch-0 split and onboard it, then per
    epoch: onboard the device introduced there (if any), and run
    unsupervised adaptation for every previously known device. `ordering`
    rearranges which device enters at which epoch (the base device always
    leads); the scenario must have been generated with matching
    intro_epochs.
    """
    coords = scenario.coordinate_table()
    if arch is None:
        arch = mlvae.Architecture(input_dim=scenario.layout.n_aps,
                                  n_rps=scenario.layout.n_rps)
    devices = ordering or [p.device_id for p in scenario.roster]
    if devices[0] != scenario.base_device:
        raise MetricError(f"ordering must start with the base device {scenario.base_device!r}")
    intro = {d: scenario.intro_epochs[d] for d in devices}
    state = incremental.PipelineState.init(arch, seed=config.seed)
    result = LifecycleResult(state=state)

    def _snapshot(event, device, epoch, **extra):
        result.events.append({"event": event, "device": device, "epoch": epoch, **extra})
        if keep_snapshots:
            result.snapshots.append(state.model.copy())

    pre_cfg = config if pretrain_epochs is None else _with_epochs(config, pretrain_epochs)
    report = incremental.pretrain_offline(
        state, scenario.fetch("train", scenario.base_device, 0), pre_cfg)
    _snapshot("pretrain", scenario.base_device, 0, accuracy=report.final_accuracy)

    by_epoch: dict[int, list[str]] = {}
    for d in devices:
        by_epoch.setdefault(intro[d], []).append(d)
    epochs = adapt_epochs_range or range(scenario.n_epochs)
    for epoch in epochs:
        known_before = [d for d in devices if intro[d] < epoch and
                        state.registry.is_known(d)]
        for device in by_epoch.get(epoch, []):
            rep = incremental.onboard_device(
                state, scenario.fetch("onboard", device, epoch),
                incremental.DomainKey(device, epoch), config)
            _snapshot("onboard", device, epoch, accuracy=rep.final_accuracy)
        for device in known_before:
            probe_records = scenario.fetch("test", device, epoch) if probe else None
            rep = incremental.adapt_unsupervised(
                state, scenario.fetch("adapt", device, epoch),
                incremental.DomainKey(device, epoch), config,
                probe_records=probe_records, coords=coords if probe else None)
            result.adapt_reports.append(
                {"device": device, "epoch": epoch, "report": rep})
            _snapshot("adapt", device, epoch,
                      pl_before=rep.pl_error_before, pl_after=rep.pl_error_after)
    return result


def _with_epochs(config: incremental.AdaptationConfig, epochs: int):
    from dataclasses import replace
    return replace(config, epochs=epochs)


# -- report rendering -------------------------------------------------------------------


@dataclass
class EvalReport:
    per_domain: list       # {device, epoch, mean, median, p90, max, count}
    pseudo_label: list     # {device, epoch, before, after}
    forgetting: dict | None
    config_echo: dict


def evaluate_state(state: incremental.PipelineState, scenario: simgen.Scenario,
                   config_echo: dict | None = None) -> EvalReport:
    """Per-(device, epoch) ED statistics over every test split."""
    coords = scenario.coordinate_table()
    rows = []
    for (kind, device, epoch) in scenario.split_keys():
        if kind != "test":
            continue
        errors = localization_errors(state.model, scenario.splits[(kind, device, epoch)],
                                     coords)
        rows.append({"device": device, "epoch": epoch, **error_stats(errors)})
    return EvalReport(per_domain=rows, pseudo_label=[], forgetting=None,
                      config_echo=config_echo or {})


def render_text(report: EvalReport) -> str:
    lines = ["dailoc evaluation report", "=" * 60]
    devices = sorted({r["device"] for r in report.per_domain})
    epochs = sorted({r["epoch"] for r in report.per_domain})
    cell = {(r["device"], r["epoch"]): r["mean"] for r in report.per_domain}
    lines.append("")
    lines.append("mean localization error (m), device x epoch")
    header = "device".ljust(10) + "".join(f"e{e}".rjust(9) for e in epochs)
    lines.append(header)
    for d in devices:
        row = d.ljust(10)
        for e in epochs:
            v = cell.get((d, e))
            row += (f"{v:9.3f}" if v is not None else "        -")
        lines.append(row)

    lines.append("")
    lines.append("per-domain percentiles (m)")
    lines.append("device".ljust(10) + "epoch".rjust(6) + "mean".rjust(9)
                 + "median".rjust(9) + "p90".rjust(9) + "max".rjust(9) + "n".rjust(6))
    for r in report.per_domain:
        lines.append(r["device"].ljust(10) + f"{r['epoch']:6d}"
                     + f"{r['mean']:9.3f}{r['median']:9.3f}{r['p90']:9.3f}"
                     + f"{r['max']:9.3f}{r['count']:6d}")

    if report.pseudo_label:
        lines.append("")
        lines.append("pseudo-label mean error before/after encoder adaptation (m)")
        lines.append("device".ljust(10) + "epoch".rjust(6) + "before".rjust(10)
                     + "after".rjust(10))
        for r in report.pseudo_label:
            before = f"{r['before']:10.3f}" if r["before"] is not None else "         -"
            after = f"{r['after']:10.3f}" if r["after"] is not None else "         -"
            lines.append(r["device"].ljust(10) + f"{r['epoch']:6d}" + before + after)

    if report.forgetting:
        lines.append("")
        lines.append("forgetting matrix: mean ED (m) on each onboarded domain after each event")
        domains = report.forgetting["domains"]
        lines.append("event".ljust(24) + "".join(d.rjust(12) for d in domains))
        for label, row in zip(report.forgetting["events"], report.forgetting["matrix"]):
            out = label.ljust(24)
            for v in row:
                out += (f"{v:12.3f}" if v is not None else "           -")
            lines.append(out)

    if report.config_echo:
        import json
        lines.append("")
        lines.append("config echo")
        lines.append(json.dumps(report.config_echo, sort_keys=True, indent=2))
    return "\n".join(lines) + "\n"


def render_tsv(report: EvalReport) -> str:
    """Long-format TSV: section, device, epoch, metric, value."""
    rows = ["section\tdevice\tepoch\tmetric\tvalue"]
    for r in report.per_domain:
        for metric in ("mean", "median", "p90", "max", "count"):
            rows.append(f"per_domain\t{r['device']}\t{r['epoch']}\t{metric}\t{r[metric]!r}")
    for r in report.pseudo_label:
        for metric in ("before", "after"):
            if r[metric] is not None:
                rows.append(f"pseudo_label\t{r['device']}\t{r['epoch']}\t{metric}\t{r[metric]!r}")
    if report.forgetting:
        for label, row in zip(report.forgetting["events"], report.forgetting["matrix"]):
            for domain, v in zip(report.forgetting["domains"], row):
                if v is not None:
                    rows.append(f"forgetting\t{domain}\t-\t{label}\t{v!r}")
    return "\n".join(rows) + "\n"
