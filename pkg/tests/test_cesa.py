"""Prototype memory, MMD, and alignment-step tests."""

import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from dailoc import cesa, mlvae
from dailoc.cesa import KernelConfig, RepresentationMemory, align_step, mmd_loss
from dailoc.errors import LifecycleError
from dailoc.gradaudit import TOY_ARCH, toy_setup
from dailoc.nn import AdamState

# -- reservoir sampling -------------------------------------------------------------


def test_first_sample_always_stored():
    mem = RepresentationMemory(n_rps=3, dim=2, capacity=1, seed=0)
    z = np.array([1.0, 2.0])
    mem.insert(1, z)
    assert mem.total() == 1
    np.testing.assert_array_equal(mem.slots[1][0], z)


def test_strata_are_isolated():
    mem = RepresentationMemory(n_rps=6, dim=2, capacity=1, seed=0)
    mem.insert(3, np.array([3.0, 3.0]))
    snapshot = mem.slots[3][0].copy()
    for i in range(50):
        mem.insert(5, np.array([float(i), 0.0]))
    np.testing.assert_array_equal(mem.slots[3][0], snapshot)
    assert mem.seen[3] == 1 and mem.seen[5] == 50


def test_insert_bounds():
    mem = RepresentationMemory(n_rps=2, dim=2, capacity=1, seed=0)
    with pytest.raises(IndexError):
        mem.insert(2, np.zeros(2))


def test_reservoir_uniformity_chi_squared():
    """Capacity 1, stream of N: each item survives with probability 1/N.

    10,000 seeded trials, chi-squared goodness of fit must not reject at
    p > 0.01.
    """
    stream = 5
    trials = 10_000
    counts = np.zeros(stream, dtype=int)
    for t in range(trials):
        mem = RepresentationMemory(n_rps=1, dim=1, capacity=1, seed=t)
        for i in range(stream):
            mem.insert(0, np.array([float(i)]))
        counts[int(mem.slots[0][0][0])] += 1
    result = scipy.stats.chisquare(counts)
    assert result.pvalue > 0.01, f"counts {counts.tolist()} p={result.pvalue:.4f}"


def test_capacity_bounds_total():
    mem = RepresentationMemory(n_rps=4, dim=3, capacity=2, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(30):
        for rp in range(4):
            mem.insert(rp, rng.normal(size=3))
    assert mem.total() == 4 * 2
    assert mem.covered_rps() == [0, 1, 2, 3]


def test_memory_stores_copies_not_views():
    mem = RepresentationMemory(n_rps=1, dim=2, capacity=1, seed=0)
    z = np.array([1.0, 2.0])
    mem.insert(0, z)
    z[0] = 99.0
    assert mem.slots[0][0][0] == 1.0
    with pytest.raises(ValueError):
        mem.slots[0][0][1] = 5.0


# -- MMD ------------------------------------------------------------------------------


def test_mmd_identical_multisets_is_zero():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(7, 4))
    v = mmd_loss(a, a.copy(), KernelConfig())
    assert abs(v) < 1e-12


def test_mmd_singleton_closed_form():
    # 1-dim singletons {0} vs {1}, bandwidth 1/sqrt(2) so k(a,b)=exp(-|a-b|^2):
    # k(0,0) + k(1,1) - 2 k(0,1) = 1 + 1 - 2 e^-1
    cfg = KernelConfig(bandwidths=(1.0 / math.sqrt(2.0),))
    v = mmd_loss(np.array([[0.0]]), np.array([[1.0]]), cfg)
    expected = 1.0 + 1.0 - 2.0 * math.exp(-1.0)
    assert v == pytest.approx(expected, abs=1e-9)


def test_mmd_empty_inputs_signal_skip():
    assert mmd_loss(np.empty((0, 4)), np.ones((2, 4))) is None
    assert mmd_loss(np.ones((2, 4)), np.empty((0, 4))) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_mmd_symmetric_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rng.integers(1, 6), 3))
    b = rng.normal(size=(rng.integers(1, 6), 3))
    cfg = KernelConfig()
    ab = mmd_loss(a, b, cfg)
    ba = mmd_loss(b, a, cfg)
    assert ab == ba
    assert ab >= -1e-12


def test_mmd_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    y = rng.normal(size=(6, 3))
    cfg = KernelConfig(bandwidths=(0.7, 1.3))
    value, grad = cesa.mmd_loss_grad(x, y, cfg)
    h = 1e-6
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp = x.copy(); xp[i, j] += h
            xm = x.copy(); xm[i, j] -= h
            fd = (mmd_loss(xp, y, cfg) - mmd_loss(xm, y, cfg)) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_median_heuristic_fallback_on_degenerate_points():
    a = np.zeros((3, 2))
    v = mmd_loss(a, np.zeros((2, 2)), KernelConfig())
    assert abs(v) < 1e-12


# -- align_step ----------------------------------------------------------------------


def _aligned_setup(seed=0):
    model, x, y, _, _ = toy_setup(seed=seed)
    mem = RepresentationMemory(n_rps=TOY_ARCH.n_rps, dim=TOY_ARCH.latent_dim,
                               capacity=1, seed=seed)
    _, _, z_c = model.encode(x)
    for label, z in zip(y % TOY_ARCH.n_rps, z_c):
        mem.insert(int(label), z)
    return model, x, np.asarray(y), mem


def test_align_step_freezes_encoder_and_decoder_bitwise():
    model, x, y, mem = _aligned_setup()
    enc = model.block_checksum("encoder")
    dec = model.block_checksum("decoder")
    clf = model.block_checksum("classifier")
    report = align_step(model, x, y, mem, KernelConfig(), AdamState())
    assert model.block_checksum("encoder") == enc
    assert model.block_checksum("decoder") == dec
    assert model.block_checksum("classifier") != clf
    assert report["skipped"] is False and "align" in report and "c" in report


def test_align_step_empty_batch_is_warned_noop():
    model, x, y, mem = _aligned_setup()
    clf = model.block_checksum("classifier")
    report = align_step(model, np.empty((0, TOY_ARCH.input_dim)), np.empty(0), mem,
                        KernelConfig(), AdamState())
    assert report["skipped"] is True
    assert model.block_checksum("classifier") == clf


def test_align_step_requires_prototypes():
    model, x, y, _ = _aligned_setup()
    empty = RepresentationMemory(n_rps=TOY_ARCH.n_rps, dim=TOY_ARCH.latent_dim)
    with pytest.raises(LifecycleError):
        align_step(model, x, y, empty, KernelConfig(), AdamState())


def test_mmd_term_has_zero_classifier_gradient():
    """Gradient decomposition: with the encoder frozen, the alignment term
    contributes nothing to the classifier gradient; only the cross-entropy
    moves it."""
    model, x, y, mem = _aligned_setup()
    align_fn = cesa.make_align_fn(mem, KernelConfig(bandwidths=(1.0,)))
    _, g_both = mlvae.loss_and_grads(model, x, None, labels=y, terms=("c", "align"),
                                     train_encoder=False, train_decoder=False,
                                     train_classifier=True, align_fn=align_fn)
    _, g_c = mlvae.loss_and_grads(model, x, None, labels=y, terms=("c",),
                                  train_encoder=False, train_decoder=False,
                                  train_classifier=True)
    for name in g_both:
        np.testing.assert_array_equal(g_both[name], g_c[name])


def test_align_step_near_fixed_point_barely_moves():
    """Batch latents identical to the stored prototypes plus a saturated,
    correct classifier: the cross-entropy gradient vanishes and the
    alignment term carries none, so the step is negligible."""
    model, x, _, _ = _aligned_setup(seed=1)
    # make the classifier perfectly confident in its current argmax by
    # scaling the logits far into saturation
    _, _, z_c = model.encode(x)
    logits = model.layers["clf2"].apply(model.layers["clf1"].apply(z_c))
    margins = np.sort(logits, axis=1)
    min_margin = float(np.min(margins[:, -1] - margins[:, -2]))
    scale = 60.0 / max(min_margin, 1e-9)
    model.layers["clf2"].w *= scale
    model.layers["clf2"].b *= scale
    labels = np.argmax(model.classify(z_c), axis=1)

    mem = RepresentationMemory(n_rps=TOY_ARCH.n_rps, dim=TOY_ARCH.latent_dim,
                               capacity=len(x), seed=1)
    for label, z in zip(labels, z_c):
        mem.insert(int(label), z)

    report = align_step(model, x, labels, mem, KernelConfig(), AdamState(lr=1e-3))
    _, grads = mlvae.loss_and_grads(model, x, None, labels=labels, terms=("c",),
                                    train_encoder=False, train_decoder=False,
                                    train_classifier=True)
    gnorm = max(float(np.max(np.abs(g))) for g in grads.values())
    assert report["c"] < 1e-12
    assert report["align"] < 1e-12
    assert gnorm < 1e-8
