import numpy as np
import pytest
from PIL import Image

from helpers import randomize_head, small_model, stage_data
from oceancast.errors import DataError, NumericError
from oceancast.grid import latitude_weights
from oceancast.metrics import compute_metrics
from oceancast.rollout import (
    SEASONS, difference_image, emit_reports, evaluate_rollouts, load_evaluation, rollout, save_evaluation,
    season_of,
)


@pytest.fixture(scope="module")
def setup():
    data, (tr, va, te) = stage_data(n_days=120)
    m = small_model()
    randomize_head(m, np.random.default_rng(0), 0.02)
    return m, data, te


def test_seasons():
    assert [season_of(np.datetime64(f"2020-{m:02d}-15")) for m in (12, 1, 3, 6, 9, 11)] == [
        "DJF", "DJF", "MAM", "JJA", "SON", "SON"]


def test_rollout_prefix_property(setup):
    m, data, te = setup
    prev, curr = te.data[0][None], te.data[1][None]
    full = rollout(m, prev, curr, 10)
    assert full.shape == (10, 1) + te.grid.shape
    for k in (1, 3, 7):
        assert rollout(m, prev, curr, k).tobytes() == full[:k].tobytes()


def test_batched_rollout_matches_single(setup):
    m, data, te = setup
    prev = np.stack([te.data[0], te.data[3]])[:, None]
    curr = np.stack([te.data[1], te.data[4]])[:, None]
    batched = rollout(m, prev, curr, 4)
    assert batched.shape == (2, 4, 1) + te.grid.shape
    single = rollout(m, prev[1], curr[1], 4)
    assert np.allclose(batched[1], single, atol=1e-12)


def test_rollout_reports_lead_of_blow_up():
    m = small_model()
    m.params["decoder.head.bias"].data[...] = np.inf
    with pytest.raises(NumericError, match="lead 1"):
        rollout(m, np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), 3)
    with pytest.raises(DataError):
        rollout(m, np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), 0)


def test_evaluation_bookkeeping(setup):
    m, data, te = setup
    ev = evaluate_rollouts(m, te, data.stats, steps=4, stride=3)
    assert len(ev.results) == (len(te) - 6) // 3 + 1
    assert ev.horizon == 4
    w = latitude_weights(te.grid).effective
    k_of = lambda a: a * data.stats.std + data.stats.mean
    r, p = ev.results[1], ev.persistence[1]
    assert r.start_date == te.times[4]
    assert p.metrics[2] == compute_metrics(k_of(te.data[4]), k_of(te.data[7]), w)
    assert np.allclose(r.targets[0], k_of(te.data[5]))
    for s in SEASONS:
        assert ev.seasonal.counts[s].shape == (4,)
    assert sum(int(ev.seasonal.counts[s][0]) for s in SEASONS) == len(ev.results)
    rows = ev.lead_means("model")
    assert [row["lead"] for row in rows] == [1, 2, 3, 4]
    assert rows[0]["rmse"] == pytest.approx(np.mean([x.metrics[0].rmse for x in ev.results]))


def test_evaluation_needs_long_enough_normalized_series(setup):
    m, data, te = setup
    with pytest.raises(DataError, match="too short"):
        evaluate_rollouts(m, te.select(slice(0, 5)), data.stats, steps=4)
    with pytest.raises(DataError, match="normalized"):
        evaluate_rollouts(m, te.with_data(te.data, unit="kelvin"), data.stats)


def test_saved_evaluation_reproduces_metrics(tmp_path, setup):
    m, data, te = setup
    ev = evaluate_rollouts(m, te, data.stats, steps=3, stride=5)
    save_evaluation(ev, tmp_path / "ev.npz")
    back = load_evaluation(tmp_path / "ev.npz", latitude_weights(te.grid).effective)
    assert [r.metrics for r in back.results] == [r.metrics for r in ev.results]
    assert [r.metrics for r in back.persistence] == [r.metrics for r in ev.persistence]


def test_reports(tmp_path, setup):
    m, data, te = setup
    ev = evaluate_rollouts(m, te, data.stats, steps=10, stride=4)
    written = emit_reports(ev, tmp_path / "rep", te.grid.land_mask, n_maps=2)
    names = {p.name for p in written}
    assert {"lead_metrics.csv", "persistence_lead_metrics.csv", "seasonal.csv", "summary.txt"} <= names
    lines = (tmp_path / "rep" / "lead_metrics.csv").read_text().splitlines()
    assert lines[0] == "lead,rmse,bias,acc,n" and len(lines) == 11
    pngs = sorted(n for n in names if n.endswith(".png"))
    assert len(pngs) == 20
    assert pngs[0].startswith(f"diff_{ev.results[0].start_date}_lead")
    img = Image.open(tmp_path / "rep" / pngs[0])
    assert img.mode == "RGB" and "value_range_K" in img.text


def test_difference_image_colours():
    land = np.zeros((3, 4), dtype=bool)
    land[:, 3] = True
    t = np.arange(12.0).reshape(3, 4)
    image, info = difference_image(t, t, land, scale=1)
    diff_panel = image[:, 2 * 4 + 2:]
    assert diff_panel.shape == (3, 4, 3)
    assert np.all(diff_panel[:, :3] == 255)  # zero difference is white
    assert np.all(diff_panel[:, 3] == 128)   # land is grey
    # south (row 0) is drawn at the bottom: the coldest target cell sits bottom-left
    target_panel = image[:, :4]
    assert tuple(target_panel[2, 0]) == (48, 18, 120)
    assert info["panels"] == "target,prediction,target-prediction"
