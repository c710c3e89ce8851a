"""Tests for the condensation lab: mock model, layer selection, training."""

import numpy as np
import pytest

import cft.condense as cd
import cft.synth as synth
from cft.metrics import LossWeights, box_to_region


@pytest.fixture(scope="module")
def model():
    return cd.MockAttnModel(seed=0)


def lab_set(n, seed, grid=(32, 32)):
    boxes = cd.sample_lab_boxes(n, seed=seed)
    return boxes, [box_to_region(b, grid) for b in boxes]


# -- model mechanics --------------------------------------------------------------


def test_graph_and_plain_paths_agree(model):
    boxes, _ = lab_set(5, seed=77)
    g = model.forward_batch(boxes).data
    n = model.heatmaps(boxes)
    assert np.allclose(g, n, atol=1e-14)


def test_heatmaps_are_row_stochastic(model):
    boxes, _ = lab_set(7, seed=78)
    heat = model.heatmaps(boxes)
    assert heat.shape == (7, model.layer_count, model.patches)
    assert np.all(heat > 0)
    assert np.allclose(heat.sum(axis=-1), 1.0, atol=1e-12)


def test_emit_is_valid_attention_tensor(model):
    boxes, regions = lab_set(1, seed=79)
    attn = model.emit(boxes[0])
    assert attn.weights.shape == (model.layer_count, 1, 1, model.patches)
    assert attn.grid == model.grid
    assert np.allclose(attn.weights.sum(axis=-1), 1.0, atol=1e-12)


def test_model_rejects_bad_modal_layer():
    with pytest.raises(ValueError):
        cd.MockAttnModel(layer_count=4, modal_layer=4)


def test_bump_geometry():
    from cft.boxes import BoxNorm
    b = BoxNorm(0.4, 0.4, 0.6, 0.6)
    bump = cd._bump(b, (32, 32)).reshape(32, 32)
    assert 0.0 <= bump.min() and bump.max() <= 1.0
    inside = bump[14:18, 14:18]
    assert inside.min() > 0.9            # plateau covers the box interior
    assert bump[0, 0] < 1e-6             # far corner is flat zero
    assert bump[16, 16] > bump[16, 12] > bump[16, 0]  # monotone across the edge
    assert bump[0, 0] == pytest.approx(bump[31, 31], abs=1e-12)  # symmetric box


# -- layer selection and histograms --------------------------------------------------


def test_select_designated_layer_planted():
    cfg = synth.SynthConfig(dispersion_temp=0.0, modal_layer=5, layer_count=8,
                            grid=(8, 8))
    tensors, regions = [], []
    for i in range(20):
        s = synth.gen_sample(3, i, cfg, with_attention=True)
        tensors.append(s.attention)
        regions.append(box_to_region(s.box, cfg.grid))
    assert cd.select_designated_layer(tensors, regions) == 5


def test_select_matches_mean_oracle(model):
    boxes, regions = lab_set(40, seed=81)
    tensors = [model.emit(b) for b in boxes]
    got = cd.select_designated_layer(tensors, regions)

    # independent recomputation straight from the weights
    means = np.zeros(model.layer_count)
    for attn, region in zip(tensors, regions):
        flat = attn.weights.mean(axis=(1, 2))  # (L, P), single head and query
        mask = region.mask().reshape(-1)
        region_mean = (flat * mask).sum(axis=1) / mask.sum()
        means += region_mean / (flat.sum(axis=1) / model.patches)
    assert got == int(np.argmax(means))


def test_select_validates_inputs(model):
    with pytest.raises(ValueError):
        cd.select_designated_layer([], [])
    boxes, regions = lab_set(2, seed=82)
    with pytest.raises(ValueError):
        cd.select_designated_layer([model.emit(boxes[0])], regions)


def test_peak_hist_delta_and_sum():
    cfg = synth.SynthConfig(dispersion_temp=0.0, modal_layer=0, layer_count=4,
                            grid=(8, 8))
    tensors, regions = [], []
    for i in range(10):
        s = synth.gen_sample(4, i, cfg, with_attention=True)
        tensors.append(s.attention)
        regions.append(box_to_region(s.box, cfg.grid))
    hist = cd.peak_hist(tensors, regions)
    assert hist[0] == pytest.approx(1.0)
    assert hist.sum() == pytest.approx(1.0, abs=1e-9)


def test_peak_hist_matches_recount(model):
    from cft.metrics import peak_layer
    boxes, regions = lab_set(30, seed=83)
    tensors = [model.emit(b) for b in boxes]
    hist = cd.peak_hist(tensors, regions)
    counts = np.zeros(model.layer_count)
    for t, r in zip(tensors, regions):
        counts[peak_layer(t, r)] += 1
    assert np.allclose(hist, counts / 30)


def test_model_peak_hist_matches_metrics_path(model):
    boxes, regions = lab_set(25, seed=84)
    fast = cd._model_peak_hist(model, boxes, regions)
    slow = cd.peak_hist([model.emit(b) for b in boxes], regions)
    assert np.allclose(fast, slow)


# -- calibration -----------------------------------------------------------------------


def test_untrained_baseline_share_in_band(model):
    boxes, regions = lab_set(1000, seed=900)
    hist = cd._model_peak_hist(model, boxes, regions)
    share = hist[model.modal_layer]
    assert 0.10 <= share <= 0.30, f"baseline share {share:.3f} out of band"
    tensors = [model.emit(b) for b in boxes[:200]]
    assert cd.select_designated_layer(tensors, regions[:200]) == model.modal_layer


# -- training --------------------------------------------------------------------------


def test_short_training_moves_share_up():
    model = cd.MockAttnModel(seed=0)
    train_boxes = cd.sample_lab_boxes(400, seed=800)
    held = cd.sample_lab_boxes(300, seed=901)
    hyper = cd.CondenseHyper(steps=300, epoch_len=100)
    rep = cd.train_condense(model, train_boxes, 21, LossWeights(alpha=0.003),
                            hyper, seed=0, heldout_boxes=held)
    assert rep.post_share > rep.baseline_share
    assert rep.heldout_lac[-1] < rep.heldout_lac[0]
    assert rep.designated_layer == 21
    assert len(rep.heldout_lac) == 1 + 300 // 100


def test_alpha_zero_is_exact_noop():
    model = cd.MockAttnModel(seed=0)
    before = {k: t.data.copy() for k, t in model.params.items()}
    train_boxes = cd.sample_lab_boxes(100, seed=800)
    held = cd.sample_lab_boxes(200, seed=901)
    hyper = cd.CondenseHyper(steps=40, epoch_len=20)
    rep = cd.train_condense(model, train_boxes, 21, LossWeights(alpha=0.0),
                            hyper, seed=0, heldout_boxes=held)
    assert all(np.array_equal(model.params[k].data, before[k]) for k in before)
    assert rep.post_hist == rep.baseline_hist


def test_training_is_deterministic():
    reports = []
    for _ in range(2):
        model = cd.MockAttnModel(seed=3)
        hyper = cd.CondenseHyper(steps=60, epoch_len=30)
        reports.append(cd.train_condense(
            model, cd.sample_lab_boxes(100, seed=800), 21,
            LossWeights(alpha=0.003), hyper, seed=1,
            heldout_boxes=cd.sample_lab_boxes(150, seed=901)))
    assert reports[0] == reports[1]


def test_divergence_carries_last_stable():
    model = cd.MockAttnModel(seed=0)
    model.params["base"].data[21, 0] = np.nan  # poison the designated layer
    hyper = cd.CondenseHyper(steps=10, epoch_len=5)
    with np.errstate(invalid="ignore"):
        with pytest.raises(cd.CondenseDiverged) as exc_info:
            cd.train_condense(model, cd.sample_lab_boxes(50, seed=1), 21,
                              LossWeights(alpha=0.003), hyper, seed=0,
                              heldout_boxes=cd.sample_lab_boxes(50, seed=2))
    assert exc_info.value.step == 1
    assert exc_info.value.last_stable is None


def test_train_validates_inputs():
    model = cd.MockAttnModel(seed=0)
    hyper = cd.CondenseHyper(steps=1)
    boxes = cd.sample_lab_boxes(5, seed=1)
    with pytest.raises(ValueError):
        cd.train_condense(model, boxes, 99, LossWeights(), hyper, 0, boxes)
    with pytest.raises(ValueError):
        cd.train_condense(model, [], 21, LossWeights(), hyper, 0, boxes)


def test_report_validates_histograms():
    with pytest.raises(ValueError, match="sum to 1"):
        cd.CondenseReport(designated_layer=0, baseline_share=1.0,
                          post_share=1.0, baseline_hist=[0.5, 0.4],
                          post_hist=[1.0, 0.0])


def test_batched_lac_matches_metrics_single(model):
    from cft import autodiff as ad
    from cft.metrics import condensation_loss
    boxes, regions = lab_set(3, seed=85)
    heat = model.heatmaps(boxes)
    for i, (b, r) in enumerate(zip(boxes, regions)):
        layer = heat[i, 21, :]
        got = condensation_loss(ad.Tensor(layer), r)
        mask = r.mask().reshape(-1)
        s = (layer * mask).sum() / mask.sum() / (layer.sum() / model.patches)
        assert float(got.data) == pytest.approx(-np.log(s), rel=1e-12)