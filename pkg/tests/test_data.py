import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from blmrobust.data import (
    CHANNELING,
    NO_CHANNELING,
    PARTIAL_WELL,
    Event,
    GenParams,
    ScanTrace,
    generate_scan,
    label_windows,
    make_dataset,
    read_dataset,
    read_trace,
    window_label,
    write_dataset,
    write_trace,
)
from blmrobust.errors import FormatError, InvalidGenParams, InvalidSplit
from blmrobust.pipeline import SIGMA_MIN, channel_stats

P = GenParams()


def test_same_seed_same_trace():
    a, b = generate_scan(P, 3), generate_scan(P, 3)
    assert a.values.tobytes() == b.values.tobytes()
    assert generate_scan(P, 4).values.tobytes() != a.values.tobytes()


def test_noise_free_is_exact_baseline():
    q = GenParams(noise_sigma=(0, 0), common_amp=0.0, events_per_scan=0)
    tr = generate_scan(q, 1, L=50)
    t = np.arange(50) / 49
    expected = np.column_stack([1.0 + 0.05 * t, 0.3 + 0.02 * t])
    np.testing.assert_array_equal(tr.values, np.asarray(P.baseline) + np.outer(t, P.drift))
    np.testing.assert_allclose(tr.values, expected, rtol=0, atol=1e-15)


@given(st.integers(0, 10_000))
def test_event_dip_and_peak(seed):
    tr = generate_scan(P, seed, L=300, events=[(150.0, CHANNELING)])
    lo, hi = 150 - 18, 150 + 19
    b0 = P.baseline[0] + P.drift[0] * 150 / 299
    b1 = P.baseline[1] + P.drift[1] * 150 / 299
    assert tr.values[lo:hi, 0].min() < b0 - 0.5 * P.dip_depth
    assert tr.values[lo:hi, 1].max() > b1 + 0.5 * P.peak_height


def test_values_nonnegative_and_finite():
    tr = generate_scan(P, 9)
    assert np.all(np.isfinite(tr.values)) and np.all(tr.values >= 0)


def test_invalid_params():
    with pytest.raises(InvalidGenParams):
        GenParams(noise_sigma=(0.2, 0.2))  # partial amplitude no longer 5x noise
    with pytest.raises(InvalidGenParams):
        GenParams(partial_factor=1.0)
    with pytest.raises(InvalidGenParams):
        generate_scan(P, 0, L=1)


def test_label_rules():
    width, half = 6.0, 18.0
    ch = Event(100.0, CHANNELING, width, half)
    pw = Event(300.0, PARTIAL_WELL, width, half)
    assert window_label([ch, pw], 50, 178) == CHANNELING
    assert window_label([ch, pw], 130, 258) == NO_CHANNELING
    # support [282, 318): a window ending at 303.6 holds exactly 60% of it
    assert pw.coverage(260, 282 + 0.6 * 36) == pytest.approx(0.6)
    assert window_label([pw], 160, 282 + 21.6) == PARTIAL_WELL
    assert window_label([pw], 160, 282 + 21.5) == NO_CHANNELING
    # both events qualify: channeling wins
    both = [Event(100.0, PARTIAL_WELL, width, half), Event(140.0, CHANNELING, width, half)]
    assert window_label(both, 60, 188) == CHANNELING


def test_label_windows_all_origins():
    tr = generate_scan(P, 2, L=200, events=[(100.0, CHANNELING)])
    lw = label_windows(tr, 128)
    assert [w.origin for w in lw] == list(range(73))
    assert all(w.label == CHANNELING for w in lw)


def test_split_fractions():
    ds = make_dataset(n_scans=4, seed=1, split=(1, 0, 0))
    assert len(ds.val) == 0 and len(ds.test) == 0 and len(ds.train) > 0
    with pytest.raises(InvalidSplit):
        make_dataset(n_scans=4, split=(0.5, 0.5, 0.5))


def test_default_dataset(dataset):
    assert 250 <= len(dataset.test) <= 350
    for ws in dataset.splits().values():
        assert np.all(ws.class_counts() > 0)
    # no scan spans splits
    scans = [set(ws.scans.tolist()) for ws in dataset.splits().values()]
    assert not (scans[0] & scans[1] or scans[0] & scans[2] or scans[1] & scans[2])
    # every window passes the classifiability check
    for ws in dataset.splits().values():
        assert np.all(channel_stats(ws.windows)[2] > SIGMA_MIN)


def test_dataset_deterministic(dataset):
    again = make_dataset(seed=0)
    assert again.manifest_hash() == dataset.manifest_hash()
    assert again.test.windows.tobytes() == dataset.test.windows.tobytes()


def test_trace_round_trip(tmp_path):
    tr = generate_scan(P, 5, L=64)
    write_trace(tr, tmp_path / "t.csv")
    back = read_trace(tmp_path / "t.csv")
    assert back.values.tobytes() == tr.values.tobytes()


def test_malformed_row_reports_row_number(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("time_index,crystal_blm,secondary_blm\n0,1.0,0.3\n1\n")
    with pytest.raises(FormatError, match="row 3"):
        read_trace(p)
    p.write_text("a,b,c\n0,1,2\n")
    with pytest.raises(FormatError, match="row 1"):
        read_trace(p)
    p.write_text("time_index,crystal_blm,secondary_blm\n0,nan,0.3\n")
    with pytest.raises(FormatError):
        read_trace(p)


def test_dataset_round_trip(tmp_path):
    ds = make_dataset(n_scans=5, seed=3)
    h = write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert back.manifest_hash() == h == ds.manifest_hash()
    for name, ws in ds.splits().items():
        assert back.splits()[name].windows.tobytes() == ws.windows.tobytes()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["membership"]["test"] = manifest["membership"]["test"][1:]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        read_dataset(tmp_path)


def test_scan_trace_length():
    assert ScanTrace(np.zeros((7, 2))).L == 7
