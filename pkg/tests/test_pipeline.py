import copy
import io
import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from geco.config import GecoConfig, ResizeConfig
from geco.data import Scene, SynthConfig, mean_extent, resize_decision_for_extent, synth_generate
from geco.errors import EmptyDataset, NonFiniteLoss
from geco.model import DetectionField, GeCo
from geco.pipeline import (evaluate_dataset, fit, fit_zero_shot, infer, infer_zero_shot_two_pass,
                           make_batch, prepare_image)

TOY = ResizeConfig.toy()


class BlobModel(nn.Module):
    """Stand-in network: objectness is the pooled red channel, boxes have a fixed canvas fraction."""

    def __init__(self, cfg, frac=0.05):
        super().__init__()
        self.cfg = cfg
        self.frac = frac
        self.gain = nn.Parameter(torch.ones(()))
        self.seen_exemplars = []

    def forward(self, x, exemplars=None):
        self.seen_exemplars.append(None if exemplars is None else exemplars.shape[1])
        y_o = (F.avg_pool2d(x[:, :1], 2) * self.gain).permute(0, 2, 3, 1)
        y_bb = torch.full(y_o.shape[:3] + (4,), self.frac, dtype=x.dtype)
        return DetectionField(y_o, y_bb)


def blob_image(size, centres, sigma):
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    red = np.zeros((size, size))
    for cy, cx in centres:
        red = np.maximum(red, np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2)))
    img = np.zeros((size, size, 3))
    img[..., 0] = red
    return img


def cfg(**kw):
    return GecoConfig(resize=TOY, **kw)


def test_infer_count_and_coordinates():
    model = BlobModel(cfg())
    img = blob_image(128, [(30, 30), (30, 90), (90, 60)], 3)
    res = infer(model, img, None)
    assert res.count == len(res.boxes) == 3
    for b in res.boxes:
        assert 0 <= b.box[0] < b.box[2] <= 128 and 0 <= b.box[1] < b.box[3] <= 128


def test_infer_blank_image_finds_nothing():
    res = infer(BlobModel(cfg()), np.zeros((64, 64, 3)), [[10, 10, 30, 30]])
    assert res.count == 0


def test_duplicates_are_removed():
    model = BlobModel(cfg(), frac=0.2)
    # two separate maxima whose wide boxes overlap almost entirely
    img = blob_image(128, [(60, 60), (60, 68)], 1.5)
    assert infer(model, img, None, cfg(dedup_iou=1.0)).count == 2
    assert infer(model, img, None).count == 1


def test_scale_round_trip():
    model = BlobModel(cfg())
    centres = [(26, 26), (26, 98), (98, 62), (70, 30)]
    small = infer(model, blob_image(128, centres, 4), [[0, 0, 40, 40]])
    big = infer(model, blob_image(256, [(2 * y, 2 * x) for y, x in centres], 8), [[0, 0, 80, 80]])
    assert small.resize.scale_factor == pytest.approx(0.5)
    assert big.resize.scale_factor == pytest.approx(0.25)
    assert small.count == big.count == 4
    a = np.array(sorted(b.box.tolist() for b in small.boxes))
    b = np.array(sorted((b.box / 2).tolist() for b in big.boxes))
    assert np.abs(a - b).max() <= 2.0


def test_prepare_image_pads_with_zeros():
    img = np.ones((40, 60, 3))
    d = resize_decision_for_extent(40, (40, 60), TOY)
    x, (sy, sx) = prepare_image(img, d)
    assert x.shape == (1, 3, 128, 128)
    assert (sy, sx) == (0.5, 0.5)
    assert torch.all(x[..., :20, :30] == 1) and torch.all(x[..., 20:, :] == 0) and torch.all(x[..., 30:] == 0)


def test_two_pass_fallback_and_rescale():
    model = BlobModel(cfg())
    blank = np.zeros((64, 64, 3))
    first = infer(model, blank, None)
    second = infer_zero_shot_two_pass(model, blank)
    assert second.count == 0 and second.resize == first.resize

    img = blob_image(128, [(30, 30), (90, 90)], 3)
    first = infer(model, img, None)
    res = infer_zero_shot_two_pass(model, img)
    expected = resize_decision_for_extent(mean_extent([b.box for b in first.boxes]), (128, 128), TOY)
    assert res.resize == expected


def scenes_from_blobs(n=4):
    out = []
    for i in range(n):
        centres = [(30, 30 + 20 * i), (90, 60)]
        gts = np.array([[x - 6, y - 6, x + 6, y + 6] for y, x in centres], dtype=float)
        extra = np.array([[100.0, 10.0, 112.0, 22.0], [5.0, 100.0, 17.0, 112.0]])
        out.append(Scene(blob_image(128, centres, 3), gts, np.concatenate([gts, extra[:1]]), id=str(i)))
    return out


def test_evaluate_dataset_modes():
    model = BlobModel(cfg())
    scenes = scenes_from_blobs()
    for mode, seen in (("few", 3), ("one", 1)):
        model.seen_exemplars.clear()
        rep = evaluate_dataset(scenes, model, mode=mode)
        assert model.seen_exemplars == [seen] * len(scenes)
        assert {"mae", "rmse", "ap", "ap50"} <= set(json.loads(rep.to_json()))
    model.seen_exemplars.clear()
    evaluate_dataset(scenes, model, mode="zero")
    assert set(model.seen_exemplars) == {None}
    with pytest.raises(EmptyDataset):
        evaluate_dataset([], model)
    with pytest.raises(ValueError):
        evaluate_dataset(scenes, model, mode="two")


def test_evaluate_dataset_repeatable():
    torch.manual_seed(0)
    model = GeCo(GecoConfig(d=16, heads=2, d_hq=8, resize=TOY, tau=0.0))
    scenes = synth_generate(SynthConfig(n_images=3), 4)
    a = evaluate_dataset(scenes, model, mode="few").to_json()
    b = evaluate_dataset(scenes, model, mode="few").to_json()
    assert a == b


# training ---------------------------------------------------------------------

SMALL = ResizeConfig(small_extent=4.0, small_canvas=96, target_extent=20.0, canvas=64)


def tiny_cfg(**kw):
    base = dict(d=16, heads=2, d_hq=8, batch=4, lr=1e-3, pretrain_epochs=1, epochs=1, zero_shot_epochs=1,
                resize=SMALL, tau=0.3)
    base.update(kw)
    return GecoConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    sc = SynthConfig(n_images=8, size=64, max_objects=4, min_extent=8, max_extent=14)
    return synth_generate(sc, 0), synth_generate(SynthConfig(**{**sc.__dict__, "n_images": 3}), 1)


def test_make_batch_shapes(tiny_data):
    train, _ = tiny_data
    batch = make_batch(train[:3], np.random.default_rng(0), tiny_cfg())
    shapes = {img.shape for img, _, _ in batch}
    assert len(shapes) == 1
    (shape,) = shapes
    assert shape[1] % 16 == 0 and shape[2] % 16 == 0 and shape[1] >= 64
    assert all(ex.shape == (3, 4) for _, ex, _ in batch)
    assert all(ex is None for _, ex, _ in make_batch(train[:3], np.random.default_rng(0), tiny_cfg(), True))


def test_fit_pretrain_only(tiny_data):
    train, val = tiny_data
    model, hist = fit(train, val, tiny_cfg(epochs=0))
    assert [e["phase"] for e in hist.epochs] == ["pretrain"]
    assert hist.epochs[0]["mode"] == "gauss"


def test_fit_deterministic_and_best(tiny_data):
    train, val = tiny_data
    runs = [fit(train, val, tiny_cfg(epochs=2)) for _ in range(2)]
    (m1, h1), (m2, h2) = runs
    assert h1.epochs == h2.epochs
    for k, v in m1.state_dict().items():
        assert torch.equal(v, m2.state_dict()[k]), k
    assert [e["phase"] for e in h1.epochs] == ["pretrain", "main", "main"]
    assert h1.best_val_mae == min(e["val_mae"] for e in h1.epochs)
    assert h1.best_val_mae <= h1.epochs[-1]["val_mae"]


def test_fit_step_log(tiny_data):
    train, val = tiny_data
    buf = io.StringIO()
    fit(train, val, tiny_cfg(epochs=1), step_log=buf)
    records = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(records) == 4
    assert [r["mode"] for r in records] == ["gauss", "gauss", "dense", "dense"]
    assert {"step", "total", "giou_term", "tp", "fp", "fn", "lr", "grad_norm"} <= set(records[0])


def test_fit_cosine_schedule(tiny_data):
    train, val = tiny_data
    buf = io.StringIO()
    fit(train, val, tiny_cfg(epochs=3, lr_schedule="cosine"), step_log=buf)
    lrs = [(r["mode"], r["lr"]) for r in map(json.loads, buf.getvalue().splitlines())]
    assert [lr for mode, lr in lrs if mode == "gauss"] == [1e-3, 1e-3]
    main = [lr for mode, lr in lrs if mode == "dense"]
    # six steps over half a cosine period, starting from the base rate
    assert main == pytest.approx([1e-3 * (1 + np.cos(np.pi * i / 6)) / 2 for i in range(6)])


def test_fit_rejects_unknown_schedule(tiny_data):
    train, val = tiny_data
    with pytest.raises(ValueError):
        fit(train, val, tiny_cfg(lr_schedule="step"))


def test_fit_nonfinite_keeps_history(tiny_data):
    train, val = tiny_data
    torch.manual_seed(0)
    model = GeCo(tiny_cfg())
    with torch.no_grad():
        model.objectness.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss) as info:
        fit(train, val, tiny_cfg(), model=model)
    assert info.value.history.epochs == []


def test_fit_rejects_empty_split(tiny_data):
    train, _ = tiny_data
    with pytest.raises(EmptyDataset):
        fit(train, [], tiny_cfg())


def test_fit_zero_shot_freezes_everything_else(tiny_data):
    train, val = tiny_data
    torch.manual_seed(1)
    model = GeCo(tiny_cfg())
    before = copy.deepcopy(model.state_dict())
    zero_names = {n for n, p in model.named_parameters()
                  if any(p is q for q in model.zero_shot_parameters())}
    assert zero_names and all(n.startswith("zero_shot") for n in zero_names)
    model, hist = fit_zero_shot(model, train, tiny_cfg(zero_shot_epochs=2), val)
    assert len(hist.epochs) == 2
    changed = set()
    for name, value in model.state_dict().items():
        if not torch.equal(value, before[name]):
            changed.add(name)
    assert changed and changed <= zero_names
    assert all(p.requires_grad for p in model.parameters())
    assert GecoConfig().zero_shot_epochs == 10
