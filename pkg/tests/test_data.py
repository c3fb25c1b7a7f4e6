import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsttn.data import (
    DataLayout,
    SynthConfig,
    TrafficSeries,
    fit_normalizer,
    load_graph,
    load_series,
    make_windows,
    merge_subseries,
    parse_synth_spec,
    periodic_indices,
    sample_mask,
    save_graph,
    save_series,
    split_dataset,
    split_subseries,
    synth_generate,
    transition_matrices,
)
from lsttn.errors import (
    ConfigError,
    DegenerateDataError,
    DegenerateMaskError,
    InsufficientDataError,
    LayoutError,
    ParseError,
    ValidationError,
)


def _series(values, mask=None):
    values = np.asarray(values, dtype=float)
    mask = np.ones(values.shape, bool) if mask is None else mask
    return TrafficSeries(values, np.arange(len(values)), mask)


# -- load_series --------------------------------------------------------------

def test_load_series_all_valid(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,a,b\n0,1.0,1.0\n1,1.0,1.0\n2,1.0,1.0\n")
    s = load_series(p)
    assert (s.num_steps, s.num_nodes) == (3, 2)
    assert s.missing_mask.all()
    assert s.node_ids == ["a", "b"]


def test_zero_and_empty_are_missing(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,a,b\n0,1.0,0\n1,2.0,\n2,3.0,4.0\n")
    s = load_series(p)
    assert s.missing_mask.tolist() == [[True, False], [True, False], [True, True]]


def test_iso_timestamps(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,a\n2012-03-01T00:00:00,1\n2012-03-01T00:05:00,2\n2012-03-01T00:10:00,3\n")
    assert load_series(p).num_steps == 3


def test_non_uniform_timestamps(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,a\n2012-03-01T00:00:00,1\n2012-03-01T00:05:00,2\n2012-03-01T00:15:00,3\n")
    with pytest.raises(LayoutError):
        load_series(p)


def test_parse_error_names_line_and_field(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,a,b\n0,1.0,2.0\n1,1.0,abc\n")
    with pytest.raises(ParseError, match=r"line 3.*'b'"):
        load_series(p)


def test_wrong_field_count(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,a,b\n0,1.0\n")
    with pytest.raises(ParseError, match="line 2"):
        load_series(p)


def test_metr_la_shaped_header(tmp_path):
    # 207 sensors, as in METR-LA
    p = tmp_path / "metr.csv"
    ids = [f"7{i:05d}" for i in range(207)]
    rows = ["timestamp," + ",".join(ids)]
    for t in range(5):
        rows.append(f"{t}," + ",".join("55.5" for _ in ids))
    p.write_text("\n".join(rows) + "\n")
    assert load_series(p).num_nodes == 207


def test_binary_round_trip(tmp_path):
    s, _ = synth_generate(SynthConfig(nodes=3, days=1, noise_sigma=1.0, missing_blocks=[(5, 9, 1)]))
    save_series(s, tmp_path / "s.npz")
    back = load_series(tmp_path / "s.npz")
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.missing_mask, s.missing_mask)


def test_csv_round_trip_lossless(tmp_path):
    s, g = synth_generate(SynthConfig(nodes=4, days=1, noise_sigma=2.0, missing_blocks=[(10, 20, None)]))
    save_series(s, tmp_path / "s.csv")
    save_graph(g, tmp_path / "g.csv")
    back = load_series(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.missing_mask, s.missing_mask)
    np.testing.assert_array_equal(load_graph(tmp_path / "g.csv", 4).adjacency, g.adjacency)


# -- graphs -------------------------------------------------------------------

def test_load_graph_single_edge(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("from,to,weight\n0,1,1.0\n")
    g = load_graph(p, 2)
    np.testing.assert_array_equal(g.adjacency, [[0, 1], [0, 0]])


def test_load_graph_empty(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("from,to,weight\n")
    g = load_graph(p, 3)
    assert not g.adjacency.any()
    np.testing.assert_array_equal(g.P_f, np.eye(3))
    np.testing.assert_array_equal(g.P_b, np.eye(3))


def test_load_graph_errors(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("from,to,weight\n0,5,1.0\n")
    with pytest.raises(IndexError):
        load_graph(p, 3)
    p.write_text("from,to,weight\n0,1,-1.0\n")
    with pytest.raises(ValidationError):
        load_graph(p, 3)


def test_graph_edge_count(tmp_path):
    rng = np.random.default_rng(0)
    V, E = 207, 1722
    pairs = set()
    while len(pairs) < E:
        i, j = rng.integers(0, V, size=2)
        pairs.add((int(i), int(j)))
    p = tmp_path / "g.csv"
    p.write_text("from,to,weight\n" + "".join(f"{i},{j},{rng.uniform(0.1, 1):.4f}\n" for i, j in pairs))
    assert load_graph(p, V).num_edges == 1722


def test_transition_symmetric_permutation():
    P_f, P_b = transition_matrices(np.array([[0.0, 1], [1, 0]]))
    np.testing.assert_array_equal(P_f, [[0, 1], [1, 0]])
    np.testing.assert_array_equal(P_b, [[0, 1], [1, 0]])


def test_transition_zero_degree_rows():
    P_f, P_b = transition_matrices(np.array([[0.0, 2], [0, 0]]))
    np.testing.assert_array_equal(P_f, [[0, 1], [0, 1]])
    np.testing.assert_array_equal(P_b, [[1, 0], [1, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1), st.floats(0.0, 0.9))
def test_transition_row_stochastic(V, seed, sparsity):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 3, size=(V, V)) * (rng.uniform(size=(V, V)) > sparsity)
    for P in transition_matrices(A):
        assert (P >= 0).all()
        rows = [sum(P[i, j] for j in range(V)) for i in range(V)]
        np.testing.assert_allclose(rows, 1.0, atol=1e-9)


# -- normalizer / split -------------------------------------------------------

def test_normalizer_constant_is_degenerate():
    with pytest.raises(DegenerateDataError):
        fit_normalizer(_series(np.full((4, 2), 3.0)))


def test_normalizer_population_std():
    n = fit_normalizer(_series([[1.0], [3.0]]))
    assert (n.mean, n.std) == (2.0, 1.0)


def test_normalizer_ignores_missing():
    mask = np.array([[True], [True], [False]])
    n = fit_normalizer(_series([[1.0], [3.0], [0.0]], mask))
    assert (n.mean, n.std) == (2.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalizer_round_trip(seed):
    x = np.random.default_rng(seed).normal(50, 20, size=(30, 3))
    n = fit_normalizer(_series(x))
    np.testing.assert_allclose(n.invert(n.apply(x)), x, atol=1e-9, rtol=0)


def test_split_lengths():
    train, val, test = split_dataset(_series(np.ones((100, 1)) + np.arange(100)[:, None]))
    assert (train.num_steps, val.num_steps, test.num_steps) == (70, 20, 10)
    assert train.timestamps[-1] < val.timestamps[0] and val.timestamps[-1] < test.timestamps[0]


def test_split_six_two_two():
    parts = split_dataset(_series(np.ones((100, 1))), (0.6, 0.2, 0.2))
    assert [p.num_steps for p in parts] == [60, 20, 20]


def test_split_bad_ratios():
    with pytest.raises(ValidationError):
        split_dataset(_series(np.ones((100, 1))), (0.5, 0.5, 0.1))


def test_split_insufficient():
    with pytest.raises(InsufficientDataError):
        split_dataset(_series(np.ones((100, 1))), min_length=20)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 500), st.floats(0.1, 0.8), st.floats(0.05, 0.15))
def test_split_chronology(T, a, b):
    s = _series(np.arange(T, dtype=float)[:, None] + 1)
    try:
        parts = split_dataset(s, (a, b, 1 - a - b))
    except InsufficientDataError:
        assert min(round(T * a), round(T * b), T - round(T * a) - round(T * b)) < 1
        return
    assert sum(p.num_steps for p in parts) == T
    np.testing.assert_array_equal(np.concatenate([p.timestamps for p in parts]), s.timestamps)


# -- windows ------------------------------------------------------------------

def test_windows_exact_length():
    lay = DataLayout(L=24, S=12, F=12, steps_per_day=24)
    assert len(make_windows(_series(np.ones((36, 2))), lay)) == 1


def test_windows_default_layout_count():
    lay = DataLayout()
    assert len(make_windows(_series(np.ones((4045, 1))), lay)) == 2


def test_windows_stride():
    lay = DataLayout(L=24, S=12, F=12, steps_per_day=24)
    assert len(make_windows(_series(np.ones((100, 1))), lay, stride=5)) == 13


def test_window_contents(rng):
    lay = DataLayout(L=36, S=12, F=6, steps_per_day=36)
    x = rng.normal(size=(120, 3)) + 10
    ws = make_windows(_series(x), lay)
    for i in rng.integers(0, len(ws), size=20):
        w = ws[int(i)]
        t = w.origin
        np.testing.assert_array_equal(w.X_long, x[t - 36:t])
        np.testing.assert_array_equal(w.Y, x[t:t + 6])
        np.testing.assert_array_equal(w.X_short, x[t - 36:t][-12:])
        assert not w.y_missing.any()


def test_window_batch_matches_samples(rng):
    lay = DataLayout(L=24, S=12, F=12, steps_per_day=24)
    mask = rng.uniform(size=(80, 2)) > 0.1
    x = np.where(mask, rng.normal(size=(80, 2)) + 5, 0)
    ws = make_windows(_series(x, mask), lay)
    b = ws.batch([0, 7, 20])
    for k, i in enumerate([0, 7, 20]):
        w = ws[i]
        np.testing.assert_array_equal(b["x_long"][k], w.X_long)
        np.testing.assert_array_equal(b["y_valid"][k], ~w.y_missing)


def test_windows_insufficient():
    with pytest.raises(InsufficientDataError):
        make_windows(_series(np.ones((30, 1))), DataLayout(L=24, S=12, F=12, steps_per_day=24))


def test_normalized_windows_zero_fill_missing():
    mask = np.ones((40, 1), bool)
    mask[3] = False
    x = np.where(mask, 7.0 + np.arange(40)[:, None], 0.0)
    from lsttn.data import Normalizer
    ws = make_windows(_series(x, mask), DataLayout(L=24, S=12, F=12, steps_per_day=24),
                      Normalizer(10.0, 2.0))
    w = ws[0]
    assert w.X_long[3, 0] == 0.0
    assert w.X_long[4, 0] == (11.0 - 10.0) / 2.0


# -- subseries ----------------------------------------------------------------

def test_split_subseries_counts():
    assert split_subseries(np.zeros((24, 3)), 12).shape == (2, 3, 12)
    assert split_subseries(np.zeros((4032, 2)), 12).shape == (336, 2, 12)


def test_split_subseries_not_divisible():
    with pytest.raises(LayoutError):
        split_subseries(np.zeros((25, 3)), 12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_split_subseries_round_trip(n, S, V, seed):
    x = np.random.default_rng(seed).normal(size=(n * S, V))
    tokens = split_subseries(x, S)
    for j in range(n):
        for v in range(V):
            np.testing.assert_array_equal(tokens[j, v], x[j * S:(j + 1) * S, v])
    np.testing.assert_array_equal(merge_subseries(tokens), x)


# -- masks --------------------------------------------------------------------

def test_mask_counts():
    m, u = sample_mask(336, 0.75, np.random.default_rng(0))
    assert (len(m), len(u)) == (252, 84)
    assert sorted(np.concatenate([m, u]).tolist()) == list(range(336))


def test_mask_determinism():
    a = sample_mask(50, 0.75, np.random.default_rng(3))
    b = sample_mask(50, 0.75, np.random.default_rng(3))
    np.testing.assert_array_equal(a[0], b[0])


def test_mask_degenerate():
    with pytest.raises(DegenerateMaskError):
        sample_mask(2, 0.1, np.random.default_rng(0))
    with pytest.raises(DegenerateMaskError):
        sample_mask(1, 0.5, np.random.default_rng(0))


def test_mask_frequency():
    rng = np.random.default_rng(11)
    counts = np.zeros(40)
    for _ in range(10_000):
        counts[sample_mask(40, 0.75, rng)[0]] += 1
    freq = counts / 10_000
    assert np.abs(freq - 0.75).max() < 0.02


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 400), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_mask_partition(n, ratio, seed):
    from lsttn.data import mask_count
    k = mask_count(n, ratio)
    if k in (0, n):
        return
    m, u = sample_mask(n, ratio, np.random.default_rng(seed))
    assert len(m) == k and not set(m) & set(u) and len(m) + len(u) == n


# -- periodic indices ---------------------------------------------------------

def test_periodic_indices_default():
    assert periodic_indices(DataLayout()) == (168, 312)


def test_periodic_indices_one_week_boundary():
    assert periodic_indices(DataLayout(L=288 * 7))[0] == 0


def test_periodic_indices_short_window():
    with pytest.raises(LayoutError):
        periodic_indices(DataLayout(L=288 * 6))


def test_periodic_offsets_in_steps():
    lay = DataLayout()
    w, d = periodic_indices(lay)
    # subseries j covers window rows [jS, (j+1)S); row r is time t - L + r
    assert w * lay.S - lay.L == -7 * 288
    assert d * lay.S - lay.L == -288


# -- synthetic ----------------------------------------------------------------

def test_synth_pure_daily_periodic():
    s, _ = synth_generate(SynthConfig(nodes=3, days=3, weekly_amp=0, trend_max=0, noise_sigma=0))
    np.testing.assert_allclose(s.values[288:], s.values[:-288], atol=1e-9, rtol=0)


def test_synth_missing_block():
    s, _ = synth_generate(SynthConfig(nodes=3, days=1, missing_blocks=[(10, 20, 1)]))
    expected = np.ones((288, 3), bool)
    expected[10:20, 1] = False
    np.testing.assert_array_equal(s.missing_mask, expected)


def test_synth_autocorrelation():
    s, _ = synth_generate(SynthConfig(nodes=5, days=10, noise_sigma=1.0, daily_amp=20))
    for v in range(5):
        x = s.values[:, v] - s.values[:, v].mean()
        r = (x[288:] * x[:-288]).sum() / np.sqrt((x[288:] ** 2).sum() * (x[:-288] ** 2).sum())
        assert r > 0.9


def test_synth_bad_duration():
    with pytest.raises(ValidationError):
        SynthConfig(days=0)


def test_synth_spec_parse():
    cfg = parse_synth_spec("nodes = 5\ndays = 2\nmissing_blocks = 0:10:1, 20:30\nseed = 4\n")
    assert cfg.nodes == 5 and cfg.missing_blocks == [(0, 10, 1), (20, 30, None)]
    with pytest.raises(ConfigError, match="colour"):
        parse_synth_spec("colour = red\n")


def test_synth_graph_row_stochastic():
    _, g = synth_generate(SynthConfig(nodes=12, days=1))
    np.testing.assert_allclose(g.P_f.sum(1), 1, atol=1e-9)
    np.testing.assert_allclose(g.P_b.sum(1), 1, atol=1e-9)


def test_synth_ar_noise_keeps_marginal_std():
    base = dict(nodes=4, days=20, daily_amp=0, noise_sigma=2.0)
    iid, _ = synth_generate(SynthConfig(**base))
    ar, _ = synth_generate(SynthConfig(**base, noise_ar=0.9))
    for s in (iid, ar):
        assert abs((s.values - s.values.mean(0)).std() - 2.0) < 0.15
    lag1 = np.mean([np.corrcoef(ar.values[1:, v], ar.values[:-1, v])[0, 1] for v in range(4)])
    assert abs(lag1 - 0.9) < 0.03
    with pytest.raises(ValidationError):
        SynthConfig(noise_ar=1.0)


def test_synth_rush_dips_on_weekdays_only():
    s, _ = synth_generate(SynthConfig(nodes=2, days=7, daily_amp=0, rush_amp=10))
    day = s.values.reshape(7, 288, 2)
    base = day[:, 0]
    assert (day[:5, 96] < base[:5] - 5).all()
    assert (day[:5, 204] < base[:5] - 5).all()
    np.testing.assert_allclose(day[5:, 96], base[5:], atol=1e-9)
