"""Domain-incremental lifecycle orchestration.

The deployment story is a state machine over one model: offline pretraining
on a curated labeled set, supervised onboarding the first time a device
appears, and two-stage unsupervised adaptation for devices already known.
Stage 1 adapts the encoder and decoder (reconstruction + KL) with the
classifier frozen; pseudo-labels are generated only after that, through the
frozen classifier; stage 2 then updates the classifier alone against the
prototype memory (class alignment + pseudo-label cross-entropy). Raw data
from earlier domains is never read back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import cesa, dataio, mlvae
from .errors import DataError, LifecycleError, TrainingError
from .nn import AdamState, adam_step

logger = logging.getLogger(__name__)


class DomainKey(NamedTuple):
    """One domain: a device observed during one time epoch."""

    device_id: str
    epoch: int


@dataclass
class DomainRegistry:
    """Which devices have been supervised-onboarded, plus the event history."""

    known: set = field(default_factory=set)
    history: list = field(default_factory=list)  # (event, device_id, epoch), append-only

    def is_known(self, device_id: str) -> bool:
        return device_id in self.known

    def record(self, event: str, key: DomainKey) -> None:
        if event == "onboard":
            self.known.add(key.device_id)
        self.history.append((event, key.device_id, int(key.epoch)))

    def state(self) -> dict:
        return {"known": sorted(self.known),
                "history": [[e, d, t] for (e, d, t) in self.history]}

    @classmethod
    def from_state(cls, meta: dict) -> "DomainRegistry":
        reg = cls()
        reg.known = set(meta["known"])
        reg.history = [(e, d, int(t)) for e, d, t in meta["history"]]
        return reg


@dataclass
class AdaptationConfig:
    """Knobs shared by the lifecycle operations.

    The four loss weights default to 1.0 each (plain unweighted sum); the
    pseudo-label confidence threshold tau defaults to 0 (keep everything).
    """

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    weights: dict = field(default_factory=lambda: dict(mlvae.DEFAULT_WEIGHTS))
    tau: float = 0.0
    seed: int = 0
    # ablation / extension switches
    use_stage1: bool = True
    use_cesa: bool = True
    per_sample_noise: bool = False   # fresh eps per sample instead of the buffer
    align_in_stage1: bool = False    # extension: feed the MMD gradient to the encoder
    kernel: cesa.KernelConfig = field(default_factory=cesa.KernelConfig)


@dataclass
class PipelineState:
    """Everything a deployment owns: model, noise buffer, memory, registry."""

    model: mlvae.MlvaeModel
    buffer: mlvae.DomainNoiseBuffer
    memory: cesa.RepresentationMemory
    registry: DomainRegistry

    @classmethod
    def init(cls, arch: mlvae.Architecture, seed: int,
             memory_capacity: int = 1) -> "PipelineState":
        return cls(
            model=mlvae.MlvaeModel.init(arch, seed),
            buffer=mlvae.DomainNoiseBuffer(arch.latent_dim, seed),
            memory=cesa.RepresentationMemory(arch.n_rps, arch.latent_dim,
                                             capacity=memory_capacity, seed=seed),
            registry=DomainRegistry(),
        )


# -- shared minibatch loop -----------------------------------------------------------


def _train_epochs(state: PipelineState, x: np.ndarray, y: np.ndarray | None,
                  key: DomainKey, config: AdaptationConfig, *,
                  terms: tuple[str, ...], blocks: tuple[str, ...],
                  epochs: int, rng: np.random.Generator,
                  align_fn=None) -> list[dict]:
    """Adam minibatch training of the selected blocks; returns the loss curve."""
    n = x.shape[0]
    params = state.model.params(blocks=blocks)
    optimizer = AdamState(lr=config.lr)
    eps_row = None
    if not config.per_sample_noise and ("rec" in terms):
        eps_row = state.buffer.get_or_create(key)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = {t: 0.0 for t in (*terms, "total")}
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = np.ascontiguousarray(x[idx])
            yb = None if y is None else y[idx]
            if config.per_sample_noise and "rec" in terms:
                eps = rng.standard_normal((xb.shape[0], state.model.arch.latent_dim))
            else:
                eps = eps_row
            losses, grads = mlvae.loss_and_grads(
                state.model, xb, eps, labels=yb, terms=terms,
                weights=config.weights,
                train_encoder="encoder" in blocks,
                train_decoder="decoder" in blocks,
                train_classifier="classifier" in blocks,
                align_fn=align_fn,
            )
            adam_step(params, grads, optimizer)
            for t, v in losses.items():
                sums[t] = sums.get(t, 0.0) + v * xb.shape[0]
        epoch_losses = {t: v / n for t, v in sums.items()}
        if not all(np.isfinite(v) for v in epoch_losses.values()):
            raise TrainingError(f"non-finite loss at epoch {epoch}: {epoch_losses}")
        curve.append(epoch_losses)
    return curve


def _training_accuracy(model: mlvae.MlvaeModel, x: np.ndarray, y: np.ndarray) -> float:
    _, _, z_c = model.encode(x)
    pred = np.argmax(model.classify(z_c), axis=1)
    return float(np.mean(pred == y))


def _validate_labeled(records: list[dataio.FingerprintRecord], op: str) -> None:
    unlabeled = [r.sample_id for r in records if not r.labeled]
    if unlabeled:
        raise DataError(f"{op} requires labeled samples; unlabeled ids {unlabeled[:5]}")


# -- lifecycle operations -----------------------------------------------------------


@dataclass
class TrainReport:
    curve: list[dict]
    final_accuracy: float
    warnings: list = field(default_factory=list)


def pretrain_offline(state: PipelineState, records: list[dataio.FingerprintRecord],
                     config: AdaptationConfig) -> TrainReport:
    """Joint offline optimization of reconstruction, KL and classification.

    Expects the curated epoch-0 single-device labeled set. The memory stays
    empty here (no alignment term before deployment).
    """
    if not records:
        raise DataError("pretrain_offline: empty dataset")
    _validate_labeled(records, "pretrain_offline")
    devices = {r.device_id for r in records}
    epochs_seen = {r.epoch for r in records}
    if len(devices) != 1 or epochs_seen != {0}:
        raise DataError(
            f"pretrain_offline expects one device at epoch 0, got devices={sorted(devices)} "
            f"epochs={sorted(epochs_seen)}"
        )
    key = DomainKey(next(iter(devices)), 0)
    x, y = dataio.records_matrix(records)
    rng = np.random.default_rng(config.seed)
    curve = _train_epochs(state, x, y, key, config,
                          terms=("rec", "kl", "c"),
                          blocks=("encoder", "decoder", "classifier"),
                          epochs=config.epochs, rng=rng)
    state.registry.record("pretrain", key)
    return TrainReport(curve=curve, final_accuracy=_training_accuracy(state.model, x, y))


def onboard_device(state: PipelineState, records: list[dataio.FingerprintRecord],
                   key: DomainKey, config: AdaptationConfig) -> TrainReport:
    """Supervised onboarding of a device not seen before.

    Fine-tunes all three blocks, then snapshots class latents into the
    prototype memory (true labels only) and registers the device. Every RP
    must appear at least once in the batch; below 5 samples per RP is
    allowed but warned.
    """
    if state.registry.is_known(key.device_id):
        raise LifecycleError(
            f"device {key.device_id!r} is already known; use adapt_unsupervised"
        )
    if not records:
        raise DataError("onboard_device: empty batch")
    _validate_labeled(records, "onboard_device")
    n_rps = state.model.arch.n_rps
    counts = np.zeros(n_rps, dtype=int)
    for r in records:
        if not 0 <= r.rp_label < n_rps:
            raise DataError(f"sample {r.sample_id}: rp label {r.rp_label} out of range")
        counts[r.rp_label] += 1
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DataError(
            f"onboarding batch must cover every RP at least once; missing {missing.tolist()}"
        )
    warnings = []
    thin = np.flatnonzero(counts < 5)
    if thin.size:
        warnings.append(f"RPs with fewer than 5 onboarding samples: {thin.tolist()}")
        logger.warning("onboard %s: %s", key.device_id, warnings[-1])

    x, y = dataio.records_matrix(records)
    state.buffer.get_or_create(key)
    rng = np.random.default_rng(config.seed)
    curve = _train_epochs(state, x, y, key, config,
                          terms=("rec", "kl", "c"),
                          blocks=("encoder", "decoder", "classifier"),
                          epochs=config.epochs, rng=rng)
    _, _, z_c = state.model.encode(x)
    for label, z in zip(y, z_c):
        state.memory.insert(int(label), z)
    state.registry.record("onboard", key)
    return TrainReport(curve=curve, final_accuracy=_training_accuracy(state.model, x, y),
                       warnings=warnings)


def pseudo_label(model: mlvae.MlvaeModel, x: np.ndarray, key: DomainKey,
                 buffer: mlvae.DomainNoiseBuffer, tau: float = 0.0):
    """Frozen-classifier pseudo-label for one fingerprint.

    The class latent is deterministic, so the buffer is not consulted for
    the prediction itself; the key/buffer arguments pin the calling context
    (labels are only generated for domains the buffer tracks). Returns
    (rp or None, confidence); None when confidence < tau.
    """
    _, _, z_c = model.encode(np.asarray(x, dtype=np.float64))
    probs = model.classify(z_c)
    label = int(np.argmax(probs))
    conf = float(probs[label])
    if conf < tau:
        return None, conf
    return label, conf


def pseudo_label_batch(model: mlvae.MlvaeModel, x: np.ndarray, tau: float = 0.0):
    """(labels, confidences, keep mask) for a batch; rejected entries get -1."""
    _, _, z_c = model.encode(x)
    probs = model.classify(z_c)
    labels = np.argmax(probs, axis=1).astype(np.int64)
    conf = probs[np.arange(len(labels)), labels]
    keep = conf >= tau
    labels = np.where(keep, labels, -1)
    return labels, conf, keep


@dataclass
class AdaptReport:
    stage1_curve: list[dict]
    stage2_curve: list[dict]
    pseudo_label_count: int
    fraction_rejected: float
    param_drift: dict
    frozen_ok: dict
    total_loss: float
    pl_error_before: float | None = None
    pl_error_after: float | None = None
    skipped: bool = False


def adapt_unsupervised(state: PipelineState, records: list[dataio.FingerprintRecord],
                       key: DomainKey, config: AdaptationConfig,
                       probe_records: list[dataio.FingerprintRecord] | None = None,
                       coords: dataio.CoordinateTable | None = None) -> AdaptReport:
    """Two-stage unsupervised adaptation for a known device.

    Stage 1: encoder+decoder update on reconstruction + KL, classifier
    frozen. Pseudo-labels are generated only after stage 1. Stage 2:
    classifier-only updates via the alignment step. Freezing is verified by
    parameter checksums on every run. When a labeled probe set and the
    coordinate table are supplied, the mean pseudo-label error is measured
    before and after stage 1 (the probe is never trained on).
    """
    if not state.registry.is_known(key.device_id):
        raise LifecycleError(
            f"device {key.device_id!r} is unknown; use onboard_device first"
        )
    if not records:
        return AdaptReport([], [], 0, 0.0, {}, {}, 0.0, skipped=True)

    x, _ = dataio.records_matrix(records)
    before = {b: state.model.block_checksum(b) for b in ("encoder", "decoder", "classifier")}
    snapshot = {name: p.copy() for name, p in state.model.params().items()}
    rng = np.random.default_rng(config.seed)

    def _probe_error():
        if probe_records is None or coords is None:
            return None
        from .evaluate import pseudo_label_error
        return pseudo_label_error(state.model, probe_records, coords)

    pl_before = _probe_error()

    stage1_curve: list[dict] = []
    if config.use_stage1:
        align_fn = None
        terms: tuple[str, ...] = ("rec", "kl")
        # the stage-1 anchor is memory-guided alignment, so --no-cesa kills it too
        if config.use_cesa and config.align_in_stage1 and state.memory.total() > 0:
            align_fn = cesa.make_align_fn(state.memory, config.kernel)
            terms = ("rec", "kl", "align")
        stage1_curve = _train_epochs(state, x, None, key, config,
                                     terms=terms, blocks=("encoder", "decoder"),
                                     epochs=config.epochs, rng=rng, align_fn=align_fn)
    if state.model.block_checksum("classifier") != before["classifier"]:
        raise TrainingError("freezing contract violated: classifier changed in stage 1")

    labels, conf, keep = pseudo_label_batch(state.model, x, config.tau)
    pl_after = _probe_error()

    mid = {b: state.model.block_checksum(b) for b in ("encoder", "decoder")}
    stage2_curve = []
    if config.use_cesa and int(keep.sum()) > 0:
        optimizer = AdamState(lr=config.lr)
        xk = x[keep]
        yk = labels[keep]
        n = xk.shape[0]
        for _ in range(config.epochs):
            order = rng.permutation(n)
            sums: dict[str, float] = {}
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                report = cesa.align_step(state.model, xk[idx], yk[idx], state.memory,
                                         config.kernel, optimizer, weights=config.weights)
                for t, v in report.items():
                    if t != "skipped":
                        sums[t] = sums.get(t, 0.0) + v * len(idx)
            stage2_curve.append({t: v / n for t, v in sums.items()})
    for b in ("encoder", "decoder"):
        if state.model.block_checksum(b) != mid[b]:
            raise TrainingError(f"freezing contract violated: {b} changed in stage 2")

    drift = {
        name: float(np.max(np.abs(p - snapshot[name])))
        for name, p in state.model.params().items()
    }
    frozen_ok = {
        "classifier_stage1": True,
        "encoder_stage2": True,
        "decoder_stage2": True,
    }
    total = 0.0
    if stage1_curve:
        total += stage1_curve[-1]["total"]
    if stage2_curve:
        total += stage2_curve[-1].get("total", 0.0)
    state.registry.record("adapt", key)
    return AdaptReport(
        stage1_curve=stage1_curve,
        stage2_curve=stage2_curve,
        pseudo_label_count=int(keep.sum()),
        fraction_rejected=float(1.0 - keep.mean()),
        param_drift=drift,
        frozen_ok=frozen_ok,
        total_loss=total,
        pl_error_before=pl_before,
        pl_error_after=pl_after,
    )


# -- checkpointing -------------------------------------------------------------------

CHECKPOINT_SCHEMA = 1


def save_checkpoint(path, state: PipelineState) -> None:
    """Persist the full pipeline state; round-trips bit-exactly."""
    model_state = state.model.state()
    buffer_state = state.buffer.state()
    memory_state = state.memory.state()
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "arch": model_state["arch"],
        "buffer": {"latent_dim": buffer_state["latent_dim"],
                   "seed": buffer_state["seed"], "keys": buffer_state["keys"]},
        "memory": {k: memory_state[k] for k in
                   ("n_rps", "dim", "capacity", "seed", "seen", "counts")},
        "registry": state.registry.state(),
    }
    arrays = dict(model_state["arrays"])
    eps = buffer_state["eps"]
    arrays["buffer.eps"] = np.stack(eps) if eps else np.empty((0, state.buffer.latent_dim))
    arrays["memory.prototypes"] = memory_state["arrays"]
    dataio.save_container(path, meta, arrays)


def load_checkpoint(path) -> PipelineState:
    meta, arrays = dataio.load_container(path)
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise DataError(f"{path}: unsupported checkpoint schema {meta.get('schema')!r}")
    model = mlvae.MlvaeModel.from_state(meta["arch"], arrays)
    buffer = mlvae.DomainNoiseBuffer.from_state(meta["buffer"], list(arrays["buffer.eps"]))
    memory = cesa.RepresentationMemory.from_state(meta["memory"], arrays["memory.prototypes"])
    registry = DomainRegistry.from_state(meta["registry"])
    return PipelineState(model=model, buffer=buffer, memory=memory, registry=registry)
