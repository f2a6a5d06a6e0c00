import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmttt.config import dump_kv, to_kv
from tmttt.data import (
    RawSeries,
    SyntheticSpec,
    WindowSpec,
    apply_zscore,
    chronological_split,
    load_csv,
    make_windows,
    read_synth_spec,
    split_windows,
    synth_generate,
    train_stats,
    window_count,
    windowed,
    write_csv,
)
from tmttt.errors import ConfigError, DataError, InsufficientDataError, LoadError


def series_of(n, m=2):
    values = np.arange(m * n, dtype=float).reshape(m, n)
    stamps = np.arange(n, dtype=float)
    return RawSeries(tuple(f"c{i}" for i in range(m)), stamps, values)


class TestLoad:
    def test_toy(self, tmp_path):
        p = tmp_path / "toy.csv"
        p.write_text("date,a,b\n2020-01-01 00:00,1,2\n2020-01-01 01:00,3,4\n")
        s = load_csv(p)
        assert s.channel_names == ("a", "b")
        np.testing.assert_array_equal(s.values, [[1, 3], [2, 4]])
        assert s.timestamps.dtype == np.dtype("datetime64[s]")

    def test_bad_cell_names_row(self, tmp_path):
        p = tmp_path / "bad.csv"
        rows = ["t,a,b"] + [f"{i},{i},{i}" for i in range(3)] + ["3,1,oops"] + ["4,1,1"]
        p.write_text("\n".join(rows) + "\n")
        with pytest.raises(LoadError, match="row 5") as info:
            load_csv(p)
        assert info.value.row == 5 and info.value.column == 3

    @pytest.mark.parametrize("cell", ["", "nan", "inf"])
    def test_missing_is_error(self, tmp_path, cell):
        p = tmp_path / "m.csv"
        p.write_text(f"t,a\n0,1\n1,{cell}\n")
        with pytest.raises(LoadError):
            load_csv(p)

    def test_empty(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        with pytest.raises(LoadError):
            load_csv(p)

    def test_header_only(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("t,a\n")
        with pytest.raises(LoadError):
            load_csv(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "absent.csv")

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("t,a,b\n0,1,2\n1,3\n")
        with pytest.raises(LoadError, match="row 3"):
            load_csv(p)

    def test_non_increasing_time(self, tmp_path):
        p = tmp_path / "n.csv"
        p.write_text("t,a\n0,1\n2,1\n1,1\n")
        with pytest.raises(LoadError, match="row 4"):
            load_csv(p)

    def test_weather_shaped_file(self, tmp_path):
        M, N = 21, 52696
        rng = np.random.default_rng(0)
        stamps = np.datetime64("2020-01-01T00:10:00") + np.arange(N) * np.timedelta64(10, "m")
        s = RawSeries(tuple(f"w{i}" for i in range(M)), stamps, rng.normal(size=(M, N)).round(3))
        p = write_csv(s, tmp_path / "weather.csv")
        loaded = load_csv(p)
        assert (loaded.M, loaded.N) == (21, 52696)

    def test_write_roundtrip_bitwise(self, tmp_path):
        s = synth_generate(SyntheticSpec(M=3, N=50), seed=1)
        loaded = load_csv(write_csv(s, tmp_path / "s.csv"))
        assert np.array_equal(loaded.values, s.values)
        assert np.array_equal(loaded.timestamps, s.timestamps)
        assert loaded.channel_names == s.channel_names

    def test_values_read_only(self):
        s = series_of(5)
        with pytest.raises(ValueError):
            s.values[0, 0] = 1.0


class TestWindows:
    def test_count_example(self):
        assert len(make_windows(series_of(10), WindowSpec(4, 2))) == 5

    def test_boundary(self):
        assert len(make_windows(series_of(6), WindowSpec(4, 2))) == 1

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            make_windows(series_of(5), WindowSpec(4, 2))

    @pytest.mark.parametrize("kw", [{"L": 1, "T": 1}, {"L": 4, "T": 0}, {"L": 4, "T": 1, "stride": 0}])
    def test_bad_spec(self, kw):
        with pytest.raises(ConfigError):
            WindowSpec(**kw)

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(3, 80), L=st.integers(2, 20), T=st.integers(1, 20), stride=st.integers(1, 7))
    def test_count_formula(self, n, L, T, stride):
        spec = WindowSpec(L, T, stride)
        if n < L + T:
            with pytest.raises(InsufficientDataError):
                make_windows(series_of(n, 1), spec)
            return
        pairs = make_windows(series_of(n, 1), spec)
        assert len(pairs) == window_count(n, spec) == (n - L - T) // stride + 1

    @settings(max_examples=100, deadline=None)
    @given(n=st.integers(6, 60), L=st.integers(2, 10), T=st.integers(1, 10), stride=st.integers(1, 4))
    def test_no_leakage(self, n, L, T, stride):
        if n < L + T:
            return
        # values equal their own time index, so windows reveal their positions
        s = RawSeries(("a",), np.arange(n, dtype=float), np.arange(n, dtype=float)[None])
        for k, (x, y) in enumerate(make_windows(s, WindowSpec(L, T, stride))):
            start = k * stride
            np.testing.assert_array_equal(x[0], np.arange(start, start + L))
            np.testing.assert_array_equal(y[0], np.arange(start + L, start + L + T))

    def test_batches_cover_all(self, rng):
        ds = windowed(series_of(30), WindowSpec(4, 2))
        seen = np.concatenate([x[:, 0, 0] for x, _ in ds.batches(7, rng)])
        assert sorted(seen) == sorted(ds.X[:, 0, 0])


class TestSplit:
    def test_lengths(self):
        parts = chronological_split(series_of(100))
        assert [p.N for p in parts] == [70, 10, 20]

    def test_timestamp_order(self):
        tr, va, te = chronological_split(series_of(100))
        assert tr.timestamps.max() < va.timestamps.min() < te.timestamps.min()
        assert va.timestamps.max() < te.timestamps.min()

    @pytest.mark.parametrize("ratios", [(0.6, 0.1, 0.2), (0.7, 0.3, 0.0), (0.5, 0.5), (1.2, -0.1, -0.1)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(ConfigError):
            chronological_split(series_of(100), ratios)

    def test_no_window_crosses_boundary(self):
        n = 200
        s = RawSeries(("a",), np.arange(n, dtype=float), np.arange(n, dtype=float)[None])
        sw = split_windows(s, WindowSpec(8, 4))
        bounds = [(0, 140), (140, 160), (160, 200)]
        for ds, (lo, hi) in zip((sw.train, sw.val, sw.test), bounds):
            assert ds.X.min() >= lo and ds.Y.max() < hi

    def test_train_stats_zscore(self, rng):
        s = RawSeries(("a", "b"), np.arange(50.0), rng.normal(size=(2, 50)) * 3 + 7)
        z = apply_zscore(s, train_stats(s))
        np.testing.assert_allclose(z.values.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(z.values.std(axis=1), 1, atol=1e-12)


class TestSynthetic:
    def test_noiseless_sine(self):
        spec = SyntheticSpec(M=1, N=200, amplitudes=(1.0,), periods=(24.0,), phases=(0.0,), trend=0.0, sigma=0.0)
        s = synth_generate(spec)
        t = np.arange(200)
        assert np.abs(s.values[0] - np.sin(2 * np.pi * t / 24)).max() <= 1e-12

    def test_shift_mean(self):
        sigma, t0, n = 0.5, 1000, 2000
        spec = SyntheticSpec(M=1, N=n, amplitudes=(0.0,), periods=(24.0,), trend=0.0, sigma=sigma,
                             shift_t0=t0, shift_delta=(5.0,))
        v = synth_generate(spec, seed=3).values[0]
        diff = v[t0:].mean() - v[:t0].mean()
        # difference of two means over n/2 points each
        assert abs(diff - 5.0) <= 3 * sigma * np.sqrt(2 / t0)

    def test_per_channel_shift(self):
        spec = SyntheticSpec(M=2, N=10, amplitudes=(0.0,), periods=(5.0,), trend=0.0, sigma=0.0,
                             shift_t0=4, shift_delta=(1.0, -2.0))
        v = synth_generate(spec).values
        np.testing.assert_array_equal(v[:, 4:], [[1.0] * 6, [-2.0] * 6])
        assert not v[:, :4].any()

    def test_deterministic(self):
        spec = SyntheticSpec(M=3, N=100)
        assert np.array_equal(synth_generate(spec, 5).values, synth_generate(spec, 5).values)
        assert not np.array_equal(synth_generate(spec, 5).values, synth_generate(spec, 6).values)

    def test_hourly_stamps(self):
        s = synth_generate(SyntheticSpec(M=1, N=3))
        assert (np.diff(s.timestamps) == np.timedelta64(1, "h")).all()

    @pytest.mark.parametrize(
        "kw",
        [{"shift_t0": 100, "N": 100}, {"sigma": -1.0}, {"M": 0}],
    )
    def test_bad_spec(self, kw):
        with pytest.raises(ConfigError):
            SyntheticSpec(**kw)

    def test_component_count_mismatch(self):
        with pytest.raises(ConfigError):
            synth_generate(SyntheticSpec(M=2, amplitudes=(1.0, 2.0, 3.0)))

    def test_spec_file(self, tmp_path):
        spec = SyntheticSpec(M=2, N=300, periods=(12.0, 48.0), shift_t0=200, shift_delta=(3.0,))
        p = tmp_path / "synth.txt"
        p.write_text("# level shift\n" + dump_kv(to_kv(spec)))
        assert read_synth_spec(p) == spec

    def test_spec_file_unknown_key(self, tmp_path):
        p = tmp_path / "synth.txt"
        p.write_text("M=2\nwobble=3\n")
        with pytest.raises(ConfigError):
            read_synth_spec(p)
