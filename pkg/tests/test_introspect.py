"""Tests for explanation maps and filter export.

Oracles: a purely linear model, where the input gradient of the picked
logit is the weight slice itself; hand-built masks for the split identity;
delta and constant filters with analytic concentration scores.
"""

import csv

import numpy as np
import pytest

from pixeldrop import autodiff as ad
from pixeldrop import introspect as I
from pixeldrop.autodiff import Tensor
from pixeldrop.masking import Mask, sample_mask
from pixeldrop.models import ModelSpec, build, checkpoint_from_model
from pixeldrop.models import Checkpoint
from pixeldrop.rng import rng_for


class LinearModel:
    """logits_c = <A_c, x> via a full-image convolution kernel."""

    def __init__(self, a):
        self.a = Tensor(np.asarray(a, dtype=np.float32))

    def forward(self, x, training=False):
        return ad.global_avg_pool(ad.conv2d(x, self.a, stride=1, padding=0))


def read_ppm(path):
    with open(path, "rb") as fh:
        assert fh.readline() == b"P6\n"
        w, h = map(int, fh.readline().split())
        assert fh.readline() == b"255\n"
        body = np.frombuffer(fh.read(), dtype=np.uint8)
    return body.reshape(h, w, 3).transpose(2, 0, 1)


# -- explanation maps -----------------------------------------------------------

def test_linear_model_map_is_weight_magnitude():
    rng = rng_for(90, "introspect", "linear")
    a = rng.normal(size=(5, 3, 6, 6)).astype(np.float32)
    x = rng.normal(size=(3, 6, 6)).astype(np.float32)
    model = LinearModel(a)
    emap = I.explanation_map(model, x)

    logits = np.einsum("cihw,ihw->c", a.astype(np.float64), x.astype(np.float64))
    k = int(np.argmax(logits))
    assert emap.source == f"logit[{k}]"
    assert np.allclose(emap.per_channel, np.abs(a[k]), atol=1e-6)
    assert np.allclose(emap.values, np.abs(a[k]).sum(axis=0), atol=1e-5)
    assert (emap.values >= 0).all()


def test_constant_model_gives_zero_map():
    model = LinearModel(np.zeros((4, 3, 5, 5), dtype=np.float32))
    x = rng_for(91, "x").normal(size=(3, 5, 5)).astype(np.float32)
    emap = I.explanation_map(model, x)
    assert np.all(emap.values == 0.0)


def test_loss_target_matches_hand_gradient():
    rng = rng_for(92, "introspect", "loss")
    a = rng.normal(size=(4, 3, 4, 4)).astype(np.float32)
    x = rng.normal(size=(3, 4, 4)).astype(np.float32)
    y = 2
    emap = I.explanation_map(LinearModel(a), x, target=("loss", y))
    assert emap.source == "loss[y=2]"

    # d loss / d x = sum_c (p_c - [c==y]) A_c for the linear model
    logits = np.einsum("cihw,ihw->c", a.astype(np.float64), x.astype(np.float64))
    p = np.exp(logits - logits.max())
    p /= p.sum()
    coeff = p.copy()
    coeff[y] -= 1.0
    grad = np.einsum("c,cihw->ihw", coeff, a.astype(np.float64))
    assert np.allclose(emap.per_channel, np.abs(grad), atol=1e-5)


def test_map_is_deterministic_and_input_shape_checked():
    model = build(ModelSpec(n=1, widths=(4, 8, 16), num_classes=4, side=16),
                  init_seed=93)
    model.head_weight.data = rng_for(93, "head").normal(
        size=model.head_weight.data.shape).astype(np.float32)
    x = rng_for(93, "x").uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)
    first = I.explanation_map(model, x)
    second = I.explanation_map(model, x)
    assert np.array_equal(first.values, second.values)
    with pytest.raises(ValueError):
        I.explanation_map(model, x[None])
    with pytest.raises(ValueError):
        I.explanation_map(model, x, target="probability")


# -- mask split -------------------------------------------------------------------

def test_mask_split_partition_identity():
    rng = rng_for(94, "split")
    emap = I.ExplanationMap(values=rng.uniform(0, 1, size=(8, 8)),
                            per_channel=rng.uniform(0, 1, size=(3, 8, 8)),
                            source="logit[0]")
    mask = sample_mask((3, 8, 8), 0.5, rng_for(94, "mask"))
    kept, dropped = I.mask_split(emap, mask)
    assert np.allclose(kept + dropped, emap.values, atol=0)
    assert (kept * dropped == 0).all()

    all_ones = Mask(bits=np.ones((3, 8, 8), dtype=np.float32), rate=0.0)
    kept, dropped = I.mask_split(emap, all_ones)
    assert np.array_equal(kept, emap.values) and np.all(dropped == 0)

    with pytest.raises(ValueError):
        I.mask_split(emap, Mask(bits=np.ones((3, 4, 4), dtype=np.float32), rate=0.0))


def test_any_kept_rule_and_mass_fraction():
    values = np.array([[1.0, 2.0], [3.0, 4.0]])
    emap = I.ExplanationMap(values=values, per_channel=np.tile(values / 3, (3, 1, 1)),
                            source="logit[0]")
    bits = np.zeros((3, 2, 2), dtype=np.float32)
    bits[0, 0, 0] = 1.0            # position (0,0) kept through one channel only
    bits[:, 1, 1] = 1.0            # position (1,1) fully kept
    mask = Mask(bits=bits, rate=0.5)
    kept, dropped = I.mask_split(emap, mask)
    assert kept[0, 0] == 1.0 and kept[1, 1] == 4.0
    assert dropped[0, 1] == 2.0 and dropped[1, 0] == 3.0
    # dropped mass = (2+3) / (1+2+3+4)
    assert I.dropped_mass_fraction(emap, mask) == pytest.approx(0.5)


# -- filter export --------------------------------------------------------------------

def test_center_concentration_hand_values():
    delta = np.zeros((3, 3, 3))
    delta[:, 1, 1] = (1.0, -2.0, 0.5)
    assert I.center_concentration(delta) == pytest.approx(1.0)
    const = np.full((3, 5, 5), 0.2)
    assert I.center_concentration(const) == pytest.approx(1 / 25)
    assert I.center_concentration(np.zeros((3, 3, 3))) == 0.0


def test_export_filters_files_and_csv(tmp_path):
    model = build(ModelSpec(n=1, widths=(4, 8, 16), num_classes=4, side=16),
                  init_seed=95)
    ckpt = checkpoint_from_model(model)
    out = I.export_filters(ckpt, tmp_path / "filters")
    assert len(out) == 4
    for i, image, score in out:
        disk = read_ppm(tmp_path / "filters" / f"filter_{i:03d}.ppm")
        assert disk.shape == (3, 3, 3)
        assert np.array_equal(disk, image)
        assert 0.0 <= score <= 1.0
    with open(tmp_path / "filters" / "filters_summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert float(rows[0]["center_concentration"]) == pytest.approx(out[0][2], abs=1e-6)


def test_filter_bytes_invariant_to_positive_rescale(tmp_path):
    rng = rng_for(96, "filters")
    w = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    spec = ModelSpec(n=1, widths=(4, 8, 16), num_classes=4, side=16)
    a = I.export_filters(Checkpoint(spec=spec, tensors={"stem.weight": w}),
                         tmp_path / "a")
    b = I.export_filters(Checkpoint(spec=spec, tensors={"stem.weight": 3.7 * w}),
                         tmp_path / "b")
    for (_, img_a, sc_a), (_, img_b, sc_b) in zip(a, b):
        assert np.array_equal(img_a, img_b)
        assert sc_a == pytest.approx(sc_b, abs=1e-6)   # float32 rescale rounding
    assert (tmp_path / "a" / "filter_000.ppm").read_bytes() == \
           (tmp_path / "b" / "filter_000.ppm").read_bytes()


def test_export_filters_rejects_bad_checkpoints(tmp_path):
    spec = ModelSpec(n=1, widths=(4, 8, 16), num_classes=4, side=16)
    with pytest.raises(ValueError):
        I.export_filters(Checkpoint(spec=spec, tensors={}), tmp_path)
    mono = np.zeros((4, 1, 3, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        I.export_filters(Checkpoint(spec=spec, tensors={"stem.weight": mono}), tmp_path)
