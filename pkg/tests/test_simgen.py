"""Synthetic world generator tests: presets, path-loss closed forms, device
transforms, determinism, split structure, and drift physics."""

import numpy as np
import pytest

from dailoc import dataio, evaluate, simgen
from dailoc.errors import DataError, LayoutError
from dailoc.simgen import (DEFAULT_ROSTER, DeviceProfile, default_schedule,
                           generate_building, generate_scenario, preset_building,
                           sample_fingerprint)


def _flat_schedule(n_aps, n_epochs):
    return simgen.DriftSchedule(power_deltas=np.zeros((n_epochs, n_aps)),
                                dropped=[[] for _ in range(n_epochs)],
                                noise_increment=np.zeros(n_epochs))


def _noiseless_device(**kwargs):
    return DeviceProfile("probe", noise_sigma_db=0.0,
                         detection_floor_dbm=-100.0, **kwargs)


# -- layouts ---------------------------------------------------------------------------


def test_preset_building1_dimensions():
    layout = preset_building("building1", seed=0)
    assert layout.n_rps == 60 and layout.n_aps == 193


def test_preset_building2_dimensions():
    layout = preset_building("building2", seed=0)
    assert layout.n_rps == 48 and layout.n_aps == 168


def test_layout_deterministic_under_seed():
    a = preset_building("toy", seed=5)
    b = preset_building("toy", seed=5)
    assert np.array_equal(a.rp_coords, b.rp_coords)
    assert np.array_equal(a.ap_coords, b.ap_coords)
    assert np.array_equal(a.tx_power_dbm, b.tx_power_dbm)


def test_rps_on_one_meter_grid_and_unique():
    layout = preset_building("toy", seed=1)
    xy = layout.rp_coords[:, :2]
    assert np.allclose(xy, np.round(xy))
    assert len({tuple(p) for p in map(tuple, layout.rp_coords)}) == layout.n_rps
    assert np.all(layout.rp_coords[:, 2] == layout.rp_coords[0, 2])  # single floor


def test_extent_too_small_is_layout_error():
    with pytest.raises(LayoutError, match="grid points"):
        generate_building(0, n_rps=50, n_aps=4, extent_m=(3.0, 3.0))


# -- path-loss physics --------------------------------------------------------------------


def test_colocated_ap_hits_distance_floor():
    """AP directly at the RP position: d clamps to 0.1 m, so the reading is
    P_tx + 10 n (log10(0.1) = -1)."""
    layout = generate_building(3, n_rps=2, n_aps=3, extent_m=(2.0, 1.0))
    layout.ap_coords[1] = layout.rp_coords[0]
    layout.tx_power_dbm[:] = -45.0
    layout.pl_exponent[:] = 2.5
    schedule = _flat_schedule(3, 1)
    rss = sample_fingerprint(layout, 0, _noiseless_device(), 0, schedule,
                             np.random.default_rng(0))
    assert rss[1] == pytest.approx(-45.0 + 10 * 2.5)


def test_device_offset_shifts_every_detected_ap():
    layout = preset_building("toy", seed=2)
    schedule = _flat_schedule(layout.n_aps, 1)
    base = sample_fingerprint(layout, 3, _noiseless_device(), 0, schedule,
                              np.random.default_rng(0))
    shifted = sample_fingerprint(layout, 3, _noiseless_device(offset_db=5.0), 0,
                                 schedule, np.random.default_rng(0))
    detected = (base > -95.0) & (base < -5.0)  # away from both clamps
    np.testing.assert_allclose(shifted[detected] - base[detected], 5.0, atol=1e-12)


def test_rss_always_within_range():
    layout = preset_building("toy", seed=4)
    schedule = default_schedule(4, layout.n_aps, 6, severity=3.0)
    rng = np.random.default_rng(9)
    for rp in range(layout.n_rps):
        for epoch in range(6):
            rss = sample_fingerprint(layout, rp, DEFAULT_ROSTER[rp % 6], epoch,
                                     schedule, rng)
            assert np.all(rss >= -100.0) and np.all(rss <= 0.0)


def test_rss_monotone_decreasing_with_distance():
    layout = generate_building(7, n_rps=4, n_aps=1, extent_m=(3.0, 1.0))
    layout.ap_coords[0] = [0.0, 0.0, simgen.RP_HEIGHT_M]  # same plane as RPs
    layout.tx_power_dbm[:] = -40.0
    schedule = _flat_schedule(1, 1)
    rng = np.random.default_rng(0)
    values = [sample_fingerprint(layout, rp, _noiseless_device(), 0, schedule, rng)[0]
              for rp in range(4)]  # RPs at x = 0,1,2,3 along the row
    assert all(a > b for a, b in zip(values, values[1:]))


def test_dropped_aps_read_as_missing():
    layout = preset_building("toy", seed=2)
    schedule = _flat_schedule(layout.n_aps, 2)
    schedule.dropped[1] = [0, 5]
    rss = sample_fingerprint(layout, 0, _noiseless_device(), 1, schedule,
                             np.random.default_rng(0))
    assert rss[0] == -100.0 and rss[5] == -100.0


# -- scenarios ------------------------------------------------------------------------------


def test_default_roster_names():
    assert [p.device_id for p in DEFAULT_ROSTER] == ["BLU", "HTC", "S7", "LG", "MOTO", "OP3"]


def test_scenario_default_shape():
    sc = generate_scenario(seed=0, samples_per_rp=1, train_samples_per_rp=1)
    assert sc.n_epochs == 6
    assert len(sc.roster) == 6
    devices = {d for (_, d, _) in sc.splits}
    assert devices == {p.device_id for p in DEFAULT_ROSTER}
    # every (device, epoch) has adapt and test splits
    for p in sc.roster:
        for e in range(6):
            assert ("adapt", p.device_id, e) in sc.splits
            assert ("test", p.device_id, e) in sc.splits
        assert ("onboard", p.device_id, sc.intro_epochs[p.device_id]) in sc.splits


def test_scenario_splits_disjoint_by_sample_id():
    sc = generate_scenario(seed=1, samples_per_rp=2, train_samples_per_rp=2)
    seen = set()
    for records in sc.splits.values():
        for r in records:
            assert r.sample_id not in seen
            seen.add(r.sample_id)


def test_scenario_fully_deterministic():
    a = generate_scenario(seed=42, samples_per_rp=2)
    b = generate_scenario(seed=42, samples_per_rp=2)
    assert a.split_keys() == b.split_keys()
    for key in a.split_keys():
        for ra, rb in zip(a.splits[key], b.splits[key]):
            assert ra.sample_id == rb.sample_id
            assert np.array_equal(ra.rss, rb.rss)


def test_scenario_labels_present_only_in_labeled_splits():
    sc = generate_scenario(seed=2, samples_per_rp=1)
    for (kind, _, _), records in sc.splits.items():
        expect = kind in ("train", "onboard", "test")
        assert all(r.labeled == expect for r in records)


def test_scenario_empty_roster_and_zero_samples_error():
    with pytest.raises(DataError):
        generate_scenario(seed=0, roster=())
    with pytest.raises(DataError):
        generate_scenario(seed=0, samples_per_rp=0)


def test_scenario_roundtrip_through_files(tmp_path):
    sc = generate_scenario(seed=5, samples_per_rp=1, train_samples_per_rp=1)
    simgen.save_scenario(tmp_path, sc)
    loaded = simgen.load_scenario(tmp_path)
    assert loaded.split_keys() == sc.split_keys()
    assert loaded.intro_epochs == sc.intro_epochs
    np.testing.assert_array_equal(loaded.layout.ap_coords, sc.layout.ap_coords)
    np.testing.assert_array_equal(loaded.schedule.power_deltas, sc.schedule.power_deltas)
    for key in sc.split_keys():
        for ra, rb in zip(loaded.splits[key], sc.splits[key]):
            assert ra.sample_id == rb.sample_id and ra.rp_label == rb.rp_label
            np.testing.assert_array_equal(ra.rss, rb.rss)


def test_access_log_records_fetches():
    sc = generate_scenario(seed=6, samples_per_rp=1, train_samples_per_rp=1)
    sc.fetch("train", "BLU", 0)
    sc.fetch("adapt", "HTC", 2)
    assert sc.access_log == [("train", "BLU", 0), ("adapt", "HTC", 2)]


# -- drift physics: monotone degradation -----------------------------------------------------


def _centroid_model_error(scenario, device_id, epoch):
    """Mean ED of a frozen epoch-0 nearest-centroid model on a drifted domain."""
    x0, y0 = dataio.records_matrix(scenario.splits[("train", scenario.base_device, 0)])
    n_rps = scenario.layout.n_rps
    centroids = np.stack([x0[y0 == k].mean(axis=0) for k in range(n_rps)])
    xt, yt = dataio.records_matrix(scenario.splits[("test", device_id, epoch)])
    pred = np.argmin(((xt[:, None, :] - centroids[None, :, :]) ** 2).sum(-1), axis=1)
    coords = scenario.coordinate_table()
    return float(np.mean([evaluate.euclidean_error(int(p), int(t), coords)
                          for p, t in zip(pred, yt)]))


def test_mean_error_increases_with_drift_severity():
    """Fig.-1 direction: more drift, strictly more error for a frozen model
    (averaged over 5 seeds)."""
    severities = (0.5, 1.0, 3.0)
    means = []
    for severity in severities:
        values = []
        for seed in range(5):
            sc = generate_scenario(seed=700 + seed, samples_per_rp=3,
                                   train_samples_per_rp=6, drift_severity=severity)
            values.append(_centroid_model_error(sc, "BLU", 5))
        means.append(np.mean(values))
    assert means[0] < means[1] < means[2], f"means {means}"


def test_mean_error_increases_with_device_offset():
    offsets = (0.0, 12.0, 25.0)
    means = []
    for offset in offsets:
        roster = (DEFAULT_ROSTER[0],
                  DeviceProfile("X", gain=1.0, offset_db=offset, noise_sigma_db=0.6))
        values = []
        for seed in range(5):
            sc = generate_scenario(seed=800 + seed, roster=roster, samples_per_rp=3,
                                   train_samples_per_rp=6, drift_severity=0.0)
            values.append(_centroid_model_error(sc, "X", 0))
        means.append(np.mean(values))
    assert means[0] < means[1] < means[2], f"means {means}"
