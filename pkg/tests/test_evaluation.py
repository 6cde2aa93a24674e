import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from radiomsm.errors import ConfigurationError, DimensionError, LabelError, MetricUndefined, SizeError
from radiomsm.evaluation import (
    PersistenceForecaster,
    ResourceGrid,
    block_means,
    confusion_matrix,
    forecast_occupancy_eval,
    merge_to_binary,
    occupancy_threshold,
    occupied_recall,
    parse_block,
    rollout_forecast,
    split_by_group,
    split_dataset,
    to_resource_grid,
)
from radiomsm.spectro import SentenceTokens, Spectrogram


def test_threshold_examples():
    assert occupancy_threshold(np.full((5, 7), -42.0)) == -42.0
    assert occupancy_threshold(np.array([0.0, 2.0] * 8)) == 1.5
    # mean -50, population std 10
    assert occupancy_threshold(np.array([-60.0, -40.0])) == -45.0
    with pytest.raises(SizeError):
        occupancy_threshold(np.array([]))


def _spec(values, df=1.0, dt=1.0):
    r, c = values.shape
    return Spectrogram(np.asarray(values, float), np.arange(r) * df, np.arange(c) * dt)


def test_block_means_example():
    m = np.array([[1, 1, 3, 3], [1, 1, 3, 3], [5, 5, 7, 7], [5, 5, 7, 7]], float)
    # 1 ms per column and 1 MHz per row -> 2 ms x 2 MHz blocks are 2x2 pixels
    grid = to_resource_grid(_spec(m, df=1e6, dt=1e-3), 2.0, 2.0, threshold=4.0)
    assert np.array_equal(grid.means, [[1, 3], [5, 7]])
    assert np.array_equal(grid.occupancy, [[False, False], [True, True]])
    assert grid.block_px == (2, 2)


def test_grid_shape_from_span():
    # 10 ms x 10 MHz spectrogram sampled at 0.1 ms x 0.1 MHz
    spec = _spec(np.zeros((100, 100)), df=1e5, dt=1e-4)
    grid = to_resource_grid(spec, 1.0, 5.0, 0.0)
    assert grid.means.shape == (2, 10)  # (frequency blocks, time blocks)


def test_partial_blocks_dropped_and_oversize():
    spec = _spec(np.ones((7, 9)), df=1.0, dt=1e-3)
    grid = to_resource_grid(spec, 2.0, 3e-6, 0.0)
    assert grid.means.shape == (2, 4)
    with pytest.raises(SizeError):
        to_resource_grid(spec, 20.0, 3e-6, 0.0)


def test_occupancy_is_strict():
    grid = to_resource_grid(_spec(np.ones((2, 2)), 1e6, 1e-3), 1.0, 1.0, threshold=1.0)
    assert not grid.occupancy.any()


def _grid(occ):
    occ = np.asarray(occ, bool)
    return ResourceGrid(1.0, 5.0, occ.astype(float), occ, 0.5)


def test_recall_examples():
    truth = _grid([[1, 1], [1, 1], [0, 0]])
    assert occupied_recall(truth, truth) == 1.0
    assert occupied_recall(_grid([[1, 1], [1, 0], [1, 1]]), truth) == 0.75
    assert occupied_recall(_grid(np.ones((3, 2))), truth) == 1.0
    with pytest.raises(MetricUndefined):
        occupied_recall(truth, _grid(np.zeros((3, 2))))
    with pytest.raises(DimensionError):
        occupied_recall(_grid(np.ones((2, 2))), truth)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_block_means_brute_force(nr, nc, br, bc, seed):
    x = np.random.default_rng(seed).standard_normal((nr * br + 1, nc * bc + 2))
    means = block_means(x, br, bc)
    for i in range(nr):
        for j in range(nc):
            tile = [x[i * br + a, j * bc + b] for a in range(br) for b in range(bc)]
            assert means[i, j] == pytest.approx(sum(tile) / len(tile), rel=1e-12, abs=1e-12)


class _LastToken(torch.nn.Module):
    def forecast(self, window):
        return window[:, -1:]


def test_rollout_with_persistence_stub(rng):
    ctx = rng.standard_normal((5, 4, 3)).astype(np.float32)
    out = rollout_forecast(_LastToken(), ctx, steps=4)
    assert out.shape == (4, 4, 3)
    assert all(np.array_equal(o, ctx[-1]) for o in out)
    persist = PersistenceForecaster().forecast(torch.from_numpy(ctx[None]))
    assert np.array_equal(persist[0, 0].numpy(), ctx[-1])
    with pytest.raises(ConfigurationError):
        rollout_forecast(_LastToken(), ctx, steps=0)


def test_rollout_first_step_is_forecast(tiny_model, rng, tiny_params):
    ctx = rng.standard_normal((3,) + tiny_params.token_shape).astype(np.float32)
    out = rollout_forecast(tiny_model, ctx, steps=3)
    with torch.no_grad():
        feats = tiny_model.backbone_forward(torch.from_numpy(ctx[None]))
        single = tiny_model.forecast_head_forward(feats)[0, 0].numpy()
    assert np.array_equal(out[0], single)
    assert out.shape == (3,) + tiny_params.token_shape


class _Oracle(torch.nn.Module):
    """Returns the true token that follows the window's last token."""

    def __init__(self, sentences):
        super().__init__()
        self.sentences = sentences

    def forecast(self, window):
        last = window[0, -1].numpy()
        for s in self.sentences:
            for i in range(len(s.tokens) - 1):
                if np.array_equal(s.tokens[i], last):
                    return torch.from_numpy(s.tokens[i + 1][None, None])
        raise AssertionError("window not found")


def _sentences(rng, n=3, t=8, f=32, w=4):
    out = []
    for _ in range(n):
        img = rng.standard_normal((f, t * w)).astype(np.float32)
        img[0:20] += 6.0
        img[20:24, ::3] += 4.0
        tok = np.ascontiguousarray(img.reshape(f, t, w).transpose(1, 0, 2))
        out.append(SentenceTokens(tok, -60.0, 5.0, duration_ms=16.0, sample_rate_hz=32e6))
    return out


def test_perfect_forecaster_has_unit_recall(rng):
    sents = _sentences(rng)
    blocks = [(1.0, 5.0), (2.0, 10.0)]
    report = forecast_occupancy_eval(_Oracle(sents), sents, blocks, steps=4)
    assert len(report["recall"]) == 2
    for row in report["recall"]:
        assert row["per_step"] == [1.0] * 4
        assert row["pooled"] == 1.0
        assert row["occupied"] > 0


def test_forecast_eval_matches_manual_count(rng):
    sents = _sentences(rng, n=2)
    model = _LastToken()
    report = forecast_occupancy_eval(model, sents, [(2.0, 4.0)], steps=4, context_tokens=3)
    hits = occ = 0
    for s in sents:
        truth = s.destandardize(np.concatenate(list(s.tokens[4:]), axis=1).astype(np.float64))
        pred = s.destandardize(np.concatenate([s.tokens[3]] * 4, axis=1).astype(np.float64))
        delta = truth.mean() + 0.5 * truth.std()
        # 16 ms over 32 columns -> 2 ms = 4 columns; 32 MHz over 32 rows -> 4 MHz = 4 rows
        for i in range(0, 32, 4):
            for j in range(0, 16, 4):
                t_occ = truth[i:i + 4, j:j + 4].mean() > delta
                p_occ = pred[i:i + 4, j:j + 4].mean() > delta
                occ += t_occ
                hits += t_occ and p_occ
    row = report["recall"][0]
    assert (row["hits"], row["occupied"]) == (hits, occ)
    assert row["pooled"] == pytest.approx(hits / occ)


def test_forecast_eval_context_check(rng):
    with pytest.raises(ConfigurationError):
        forecast_occupancy_eval(_LastToken(), _sentences(rng), [(1.0, 5.0)], steps=4, context_tokens=6)
    with pytest.raises(ConfigurationError):
        forecast_occupancy_eval(_LastToken(), [], [(1.0, 5.0)])


def test_parse_block():
    assert parse_block("1msx5mhz") == (1.0, 5.0)
    assert parse_block(" 2MSx10MHz ") == (2.0, 10.0)
    with pytest.raises(ConfigurationError):
        parse_block("1x5")


def test_confusion_matrix_identity(rng):
    labels = rng.integers(0, 3, size=(4, 16, 16))
    cm = confusion_matrix(labels, labels, 3)
    assert np.array_equal(cm.counts, np.diag(np.bincount(labels.ravel(), minlength=3)))
    assert cm.total == 4 * 16 * 16
    assert np.allclose(cm.recall, 1.0)


def test_confusion_brute_force(rng):
    p = rng.integers(0, 3, size=500)
    t = rng.integers(0, 3, size=500)
    counts = np.zeros((3, 3), int)
    for a, b in zip(t, p):
        counts[a, b] += 1
    cm = confusion_matrix(p, t, 3)
    assert np.array_equal(cm.counts, counts)
    assert np.allclose(cm.rates.sum(1), 1.0)
    d = cm.to_dict()
    assert d["class_names"] == ["Noise", "NR", "LTE"] and d["counts"] == counts.tolist()


def test_confusion_empty_row_and_errors():
    cm = confusion_matrix([0, 0], [0, 0], 3)
    assert np.array_equal(cm.rates[1], [0, 0, 0])
    with pytest.raises(LabelError):
        confusion_matrix([3], [0], 3)
    with pytest.raises(DimensionError):
        confusion_matrix([0, 1], [0], 3)


def test_merge_to_binary():
    assert merge_to_binary(np.array([0, 1, 2])).tolist() == [0, 1, 1]
    z = np.zeros((4, 4), np.uint8)
    assert np.array_equal(merge_to_binary(z), z)
    with pytest.raises(LabelError):
        merge_to_binary(np.array([3]))


@given(st.integers(0, 2**32 - 1))
def test_binary_merge_identity(seed):
    rng = np.random.default_rng(seed)
    p = rng.integers(0, 3, size=(2, 8, 8))
    t = rng.integers(0, 3, size=(2, 8, 8))
    c3 = confusion_matrix(p, t, 3).counts
    c2 = confusion_matrix(merge_to_binary(p), merge_to_binary(t), 2).counts
    summed = np.array([[c3[0, 0], c3[0, 1:].sum()], [c3[1:, 0].sum(), c3[1:, 1:].sum()]])
    assert np.array_equal(c2, summed)


def test_split_sizes_and_determinism():
    items = list(range(240))
    a, b = split_dataset(items, [0.5, 0.5], seed=3)
    assert (len(a), len(b)) == (120, 120)
    assert sorted(a + b) == items
    tr, te = split_dataset(range(120), [0.8, 0.2], seed=3)
    assert (len(tr), len(te)) == (96, 24)
    assert split_dataset(items, [0.5, 0.5], 3) == [a, b]
    assert split_dataset(items, [0.5, 0.5], 4) != [a, b]
    with pytest.raises(ConfigurationError):
        split_dataset(items, [0.5, 0.6], 0)


def test_split_by_group_keeps_groups_together():
    groups = [f"r{i % 10}" for i in range(100)]
    a, b = split_by_group(groups, [0.5, 0.5], seed=0)
    assert not {groups[i] for i in a} & {groups[i] for i in b}
    assert sorted(a + b) == list(range(100))
