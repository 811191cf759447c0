"""Finite-difference audit of the full training math on a small model.

Builds a seeded 4-AP / 3-RP model with narrow layers (so central
differences over every coordinate stay cheap) and checks each loss term
plus both staged objectives against the analytic gradients. This is what
`dailoc gradcheck` runs and what the acceptance suite pins.
"""

from __future__ import annotations

import numpy as np

from . import cesa, mlvae
from .nn import GradCheckReport, gradient_check

TOY_ARCH = mlvae.Architecture(
    input_dim=4, n_rps=3, trunk=(12, 10), latent_dim=4,
    class_hidden=8, decoder_hidden=(10, 12), classifier_hidden=8,
)


def toy_setup(seed: int = 7, batch: int = 6):
    """Seeded toy model plus a batch of valid inputs, labels, noise and
    prototypes."""
    model = mlvae.MlvaeModel.init(TOY_ARCH, seed=seed)
    rng = np.random.default_rng((seed, 0xA0D17))
    x = rng.uniform(0.05, 0.95, size=(batch, TOY_ARCH.input_dim))
    y = rng.integers(0, TOY_ARCH.n_rps, size=batch)
    eps = rng.standard_normal(TOY_ARCH.latent_dim)
    protos = rng.standard_normal((5, TOY_ARCH.latent_dim))
    return model, x, y, eps, protos


def run_gradient_audit(seed: int = 7, h: float = 1e-5,
                       tolerance: float = 1e-5) -> dict[str, GradCheckReport]:
    """Check every loss term and both staged totals; keys name the check."""
    model, x, y, eps, protos = toy_setup(seed)
    kernel = cesa.KernelConfig(bandwidths=(0.5, 1.0, 2.0))

    def protos_align(z_c, need_grad):
        return cesa.mmd_loss_grad(z_c, protos, kernel) if need_grad else (
            cesa.mmd_loss(z_c, protos, kernel), None)

    def check(params_blocks, **kwargs):
        params = model.params(blocks=params_blocks)

        def fn(_):
            losses, grads = mlvae.loss_and_grads(
                model, x, eps,
                train_encoder="encoder" in params_blocks,
                train_decoder="decoder" in params_blocks,
                train_classifier="classifier" in params_blocks,
                **kwargs)
            return losses["total"], grads

        return gradient_check(fn, params, h=h, tolerance=tolerance)

    return {
        "rec_loss/enc+dec": check(("encoder", "decoder"), terms=("rec",)),
        "kl_loss/encoder": check(("encoder",), terms=("kl",)),
        "class_loss/all": check(("encoder", "classifier"), labels=y, terms=("c",)),
        "align_loss/encoder": check(("encoder",), terms=("align",),
                                    align_fn=protos_align),
        "stage1_total/enc+dec": check(("encoder", "decoder"), terms=("rec", "kl")),
        "stage2_total/classifier": check(("classifier",), labels=y,
                                         terms=("c", "align"), align_fn=protos_align),
        "pretrain_total/all": check(("encoder", "decoder", "classifier"),
                                    labels=y, terms=("rec", "kl", "c")),
    }
