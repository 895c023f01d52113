import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geega import dsp
from geega.signal_io import (
    BCI2A_22, HEADBAND_4, EegRecording, IngestionError, LabelError, SpecError, SyntheticSpec,
    binarize_label, ingest, load_montage, segment, synthesize, ten_ten_xy, write_binary, write_csv,
)


def _rec(c=4, t=2560, rate=256.0, score=7, seed=0):
    rng = np.random.default_rng(seed)
    return EegRecording("S01", [f"ch{i}" for i in range(c)], rate,
                        rng.standard_normal((c, t)).astype(np.float32), np.full(t, score))


def test_csv_shape_passthrough(tmp_path):
    rec = _rec(4, 2560)
    write_csv(rec, tmp_path / "a.csv")
    back = ingest(tmp_path / "a.csv")
    assert back.data.shape == (4, 2560)
    assert back.sample_rate_hz == pytest.approx(256.0)
    np.testing.assert_allclose(back.data, rec.data, rtol=1e-6)


def test_csv_22_channels_250hz(tmp_path):
    rec = _rec(22, 1000, rate=250.0)
    write_csv(rec, tmp_path / "b.csv")
    back = ingest(tmp_path / "b.csv")
    assert back.data.shape == (22, 1000)
    assert back.sample_rate_hz == pytest.approx(250.0)


def test_csv_nan_names_row_and_column(tmp_path):
    rec = _rec(4, 300)
    p = tmp_path / "nan.csv"
    write_csv(rec, p)
    lines = p.read_text().splitlines()
    cells = lines[11].split(",")
    cells[3] = "nan"
    lines[11] = ",".join(cells)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(IngestionError) as err:
        ingest(p)
    msg = str(err.value)
    assert "ch2" in msg and "row 12" in msg  # file line, header is line 1


def test_recording_rejects_nonfinite():
    data = np.zeros((2, 10), dtype=np.float32)
    data[1, 4] = np.inf
    with pytest.raises(IngestionError, match="ch1"):
        EegRecording("S", ["ch0", "ch1"], 256.0, data, np.ones(10))


def test_binary_round_trip_exact(tmp_path):
    rec = _rec(3, 777, rate=128.0, score=4)
    write_binary(rec, tmp_path / "r.geeg")
    back = ingest(tmp_path / "r.geeg")
    assert back.subject_id == rec.subject_id
    assert back.channels == rec.channels
    assert back.sample_rate_hz == rec.sample_rate_hz
    assert np.array_equal(back.data, rec.data)
    assert np.array_equal(back.label_track, rec.label_track)


def test_binary_bad_magic(tmp_path):
    p = tmp_path / "x.geeg"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(IngestionError, match="magic"):
        ingest(p)


@pytest.mark.parametrize("t,n", [(2560, 1), (5200, 2), (100, 0)])
def test_segment_counts(t, n):
    segs = segment(_rec(4, t), 10.0)
    assert len(segs) == n
    for s in segs:
        assert s.data.shape == (4, 2560)
        assert s.label == 1


def test_segment_drops_tail():
    rec = _rec(2, 5200)
    segs = segment(rec, 10.0)
    np.testing.assert_array_equal(segs[1].data, rec.data[:, 2560:5120])


@settings(max_examples=60, deadline=None)
@given(t=st.integers(1, 4000), length=st.integers(1, 600))
def test_segment_count_is_floor(t, length):
    rec = _rec(1, t)
    assert len(segment(rec, length / rec.sample_rate_hz)) == t // length


@pytest.mark.parametrize("score,label", [(1, 0), (5, 0), (6, 1), (9, 1)])
def test_binarize(score, label):
    assert binarize_label(score) == label


@pytest.mark.parametrize("score", [0, 10, -1])
def test_binarize_out_of_range(score):
    with pytest.raises(LabelError):
        binarize_label(score)


def test_binarize_binary_scheme():
    assert binarize_label(1, "binary") == 1
    with pytest.raises(LabelError):
        binarize_label(3, "binary")


def test_synthesize_deterministic():
    spec = SyntheticSpec(duration_s=20.0)
    a, b = synthesize(spec, 7), synthesize(spec, 7)
    assert len(a) == len(b) == 8
    for x, y in zip(a, b):
        assert x.data.tobytes() == y.data.tobytes()
    c = synthesize(spec, 8)
    assert a[0].data.tobytes() != c[0].data.tobytes()


def test_synthesize_counts_and_ids():
    recs = synthesize(SyntheticSpec(n_subjects=2, duration_s=10.0), 0)
    assert len(recs) == 4
    assert sorted({r.subject_id for r in recs}) == ["S01", "S02"]
    labels = sorted(binarize_label(r.label_track[0]) for r in recs)
    assert labels == [0, 0, 1, 1]


def test_synthesize_pure_alpha_dominates():
    amps = {"Delta": 0.0, "Theta": 0.0, "Alpha": 1.0, "Beta": 0.0, "Gamma": 0.0}
    spec = SyntheticSpec(n_subjects=1, duration_s=10.0, noise_level=0.0, band_amplitudes=amps)
    rec = [r for r in synthesize(spec, 3) if r.label_track[0] > 5][0]
    for ch in rec.data:
        est = dsp.psd(ch.astype(np.float64), rec.sample_rate_hz)
        powers = {b.name: dsp.band_power(est, b) for b in dsp.DEFAULT_BANDS}
        others = [v for k, v in powers.items() if k != "Alpha"]
        assert powers["Alpha"] > 10 * max(others)


def test_synthesize_class_one_has_more_frontal_alpha():
    spec = SyntheticSpec(n_subjects=1, duration_s=30.0)
    recs = synthesize(spec, 1)
    alpha = dsp.DEFAULT_BANDS[2]
    af7 = spec.channels.index("AF7")
    p = [dsp.band_power(dsp.psd(r.data[af7].astype(np.float64), 256.0), alpha) for r in recs]
    assert p[1] > 2.0 * p[0]


@pytest.mark.parametrize("kw", [{"channels": ()}, {"duration_s": 0.0}])
def test_synthesize_bad_spec(kw):
    with pytest.raises(SpecError):
        synthesize(SyntheticSpec(**kw), 0)


def test_montages_inside_unit_disc():
    for name, n in (("headband4", 4), ("bci2a22", 22)):
        m = load_montage(name)
        assert len(m) == n
        assert np.all(np.hypot(*m.xy.T) < 1.0)
    assert load_montage("headband4").channel_names == list(HEADBAND_4)
    assert load_montage("bci2a22").channel_names == list(BCI2A_22)


def test_ten_ten_geometry():
    assert ten_ten_xy("Cz") == pytest.approx((0.0, 0.0), abs=1e-12)
    fpz, oz = ten_ten_xy("Fpz"), ten_ten_xy("Oz")
    # front is +y; left hemisphere (odd numbers) is -x
    assert fpz[1] > 0 > oz[1]
    assert ten_ten_xy("AF7")[0] < 0 < ten_ten_xy("AF8")[0]
    assert ten_ten_xy("C3") == pytest.approx((-ten_ten_xy("C4")[0], ten_ten_xy("C4")[1]))
