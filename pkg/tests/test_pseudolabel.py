import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import darcnn.model as model_mod
from darcnn.core import Domain, ImageSample, PipelineConfig, access_context
from darcnn.data import AugmentationParams, augment, write_label_png
from darcnn.errors import ConsistencyError, EmptyPseudoLabelError
from darcnn.model import Detections
from darcnn.pseudolabel import (
    Provenance, PseudoLabel, PseudoLabelSet, build_stage2_dataset, generate_pseudo_labels,
    load_pseudo_labels, save_pseudo_labels,
)

from conftest import make_model


def _images(n=3, size=32):
    rng = np.random.default_rng(0)
    return [ImageSample(f"t{k}", rng.integers(0, 255, (size, size), dtype=np.uint8), Domain.TARGET)
            for k in range(n)]


def _fake_detect(scores_per_image, seen=None):
    """Stand-in detector: image k gets boxes along the diagonal with the given scores."""
    def detect(model, x, domain, max_detections=100, score_threshold=0.0, **kw):
        if seen is not None:
            seen.append(x.clone())
        out = []
        for _ in range(x.shape[0]):
            scores = scores_per_image[len(out) % len(scores_per_image)]
            boxes = torch.tensor([[4.0 * k, 4.0 * k, 4.0 * k + 6, 4.0 * k + 6]
                                  for k in range(len(scores))]).reshape(-1, 4)
            probs = torch.ones((len(scores), 28, 28))
            out.append(Detections(boxes, torch.tensor(scores, dtype=torch.float32).reshape(-1),
                                  probs, tuple(x.shape[-2:])))
        return out
    return detect


def test_threshold_keeps_only_confident(monkeypatch):
    monkeypatch.setattr(model_mod, "detect", _fake_detect([[0.6, 0.4]]))
    labels = generate_pseudo_labels(make_model(), _images(1), PipelineConfig(z_pseudo_conf=0.5))
    kept = labels.labels["t0"]
    assert len(kept) == 1 and kept[0].confidence == pytest.approx(0.6)
    assert kept[0].mask.sum() == 36


def test_zero_threshold_keeps_all_and_order_is_descending(monkeypatch):
    monkeypatch.setattr(model_mod, "detect", _fake_detect([[0.2, 0.9, 0.5]]))
    labels = generate_pseudo_labels(make_model(), _images(2), PipelineConfig(z_pseudo_conf=0.0))
    confs = [l.confidence for l in labels.labels["t1"]]
    assert confs == sorted(confs, reverse=True) and len(confs) == 3


def test_boundary_confidence_is_kept(monkeypatch):
    monkeypatch.setattr(model_mod, "detect", _fake_detect([[0.5, 0.25]]))
    labels = generate_pseudo_labels(make_model(), _images(1), PipelineConfig(z_pseudo_conf=0.5))
    assert [l.confidence for l in labels.labels["t0"]] == [0.5]


def test_nothing_confident_raises(monkeypatch):
    monkeypatch.setattr(model_mod, "detect", _fake_detect([[0.1, 0.2]]))
    with pytest.raises(EmptyPseudoLabelError):
        generate_pseudo_labels(make_model(), _images(2), PipelineConfig())


scores = st.lists(st.floats(0.0, 1.0, width=32), min_size=1, max_size=6)


@settings(max_examples=40, deadline=None)
@given(st.lists(scores, min_size=1, max_size=3), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_monotone_in_z_and_never_below_z(per_image, z1, z2):
    lo, hi = sorted((z1, z2))
    model = make_model()
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(model_mod, "detect", _fake_detect(per_image))
        sets = {}
        for z in (lo, hi, 0.5):
            try:
                sets[z] = generate_pseudo_labels(model, _images(3), PipelineConfig(z_pseudo_conf=z))
            except EmptyPseudoLabelError:
                sets[z] = None
    if sets[hi] is not None:
        assert sets[lo] is not None
        for iid, items in sets[hi].labels.items():
            assert all(any(a == b for b in sets[lo].labels[iid]) for a in items)
            assert len(items) <= len(sets[lo].labels[iid])
    if sets[0.5] is not None:
        assert all(l.confidence >= 0.5 for v in sets[0.5].labels.values() for l in v)


def _foreground_model(seed):
    """Untrained model whose target mask head leans to foreground, so masks are non-empty."""
    model = make_model(seed)
    with torch.no_grad():
        model.M_t.mask_logit.bias.fill_(2.0)
    return model


def test_monotone_in_z_with_a_real_model(small_target):
    model = _foreground_model(5)
    images = [s.replace(annotations=None) for s in small_target]
    cfg = PipelineConfig(z_pseudo_conf=0.0)
    base = generate_pseudo_labels(model, images, cfg)
    prev = base.total()
    confs = sorted(l.confidence for v in base.labels.values() for l in v)
    for z in confs[:: max(1, len(confs) // 5)]:
        again = generate_pseudo_labels(model, images, cfg.replace(z_pseudo_conf=z))
        assert again == base.filtered(z)
        assert again.total() <= prev
        assert all(l.confidence >= z for v in again.labels.values() for l in v)
        prev = again.total()


def test_generation_is_deterministic(small_target):
    images = [s.replace(annotations=None) for s in small_target[:4]]
    cfg = PipelineConfig(z_pseudo_conf=0.0)
    a = generate_pseudo_labels(_foreground_model(2), images, cfg, checkpoint_hash="h")
    b = generate_pseudo_labels(_foreground_model(2), images, cfg, checkpoint_hash="h")
    assert a == b
    assert a.provenance == Provenance("h", 0.0, (1.0, 1.5, -150.0), 0, "train_augmented")


def test_label_augmented_infers_on_augmented_pixels(monkeypatch):
    seen = []
    monkeypatch.setattr(model_mod, "detect", _fake_detect([[0.9]], seen))
    imgs = _images(2)
    cfg = PipelineConfig()
    generate_pseudo_labels(make_model(), imgs, cfg, mode="train_augmented")
    generate_pseudo_labels(make_model(), imgs, cfg, mode="label_augmented")
    params = AugmentationParams.from_config(cfg)
    expected = np.stack([augment(s, params, cfg.seed).pixels for s in imgs]) / 255.0
    assert torch.allclose(seen[0][:, 0], torch.tensor(np.stack([s.pixels for s in imgs]) / 255.0,
                                                      dtype=torch.float32))
    assert torch.allclose(seen[1][:, 0], torch.tensor(expected, dtype=torch.float32))
    with pytest.raises(ValueError):
        generate_pseudo_labels(make_model(), imgs, cfg, mode="sideways")


def _label(y, x, conf, size=32, side=5):
    m = np.zeros((size, size), bool)
    m[y:y + side, x:x + side] = True
    return PseudoLabel(m, (float(x), float(y), float(x + side), float(y + side)), conf)


def _set(z=0.5):
    labels = {"t0": (_label(2, 2, 0.9), _label(4, 4, 0.7)), "t1": (), "t2": (_label(20, 10, 0.55),)}
    return PseudoLabelSet(labels, Provenance("abc", z, (1.0, 1.5, -150.0), 3, "train_augmented"),
                          ["t0", "t1", "t2"])


def test_set_validation_and_filtering():
    with pytest.raises(ConsistencyError):
        PseudoLabelSet({"a": (_label(0, 0, 0.3),)}, Provenance("", 0.5, (1, 1.5, -150), 0, "both"))
    s = _set()
    assert s.counts() == {"t0": 2, "t1": 0, "t2": 1} and s.total() == 3
    assert s.filtered(0.8).total() == 1
    with pytest.raises(ValueError):
        s.filtered(0.1)


def test_round_trip_is_bit_exact(tmp_path):
    labels, images = _set(), _images(3)
    save_pseudo_labels(labels, images, tmp_path / "a")
    back, clean = load_pseudo_labels(tmp_path / "a")
    assert back == labels
    assert all(np.array_equal(a.pixels, b.pixels) and a.id == b.id for a, b in zip(images, clean))
    assert not any(c.has_annotations for c in clean)
    # writing the loaded set again gives byte-identical files
    save_pseudo_labels(back, clean, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes(), f
    prov = json.loads((tmp_path / "a" / "provenance.json").read_text())
    assert prov["format"] == "darcnn-pseudo/1" and prov["order"] == "blur>contrast_brightness"


def test_tampered_label_png_is_detected(tmp_path):
    save_pseudo_labels(_set(), _images(3), tmp_path)
    write_label_png(np.zeros((32, 32), np.uint16), tmp_path / "labels" / "t0.png")
    with pytest.raises(ConsistencyError):
        load_pseudo_labels(tmp_path)


def test_stage2_dataset_modes():
    labels, images = _set(), _images(3)
    params = AugmentationParams(1.0, 1.5, -150.0)
    train_aug = build_stage2_dataset(labels, images, params, "train_augmented", seed=3)
    assert [s.id for s in train_aug] == ["t0", "t1", "t2"]
    assert np.array_equal(train_aug[0].pixels, augment(images[0], params, 3).pixels)
    assert all(s.pseudo and s.domain is Domain.TARGET for s in train_aug)
    with access_context("trainer"):
        anns = train_aug[0].annotations
    # overlap resolved in favour of the more confident label
    assert anns[0].mask.sum() == 25 and anns[1].mask.sum() == 25 - 9
    label_aug = build_stage2_dataset(labels, images, params, "label_augmented")
    assert np.array_equal(label_aug[0].pixels, images[0].pixels)
    both = build_stage2_dataset(labels, images, params, "train_augmented", include_clean=True)
    assert [s.id for s in both] == ["t0", "t1", "t2", "t0_aug", "t1_aug", "t2_aug"]
    ident = build_stage2_dataset(labels, images, AugmentationParams.identity(), include_clean=True)
    assert [s.id for s in ident] == ["t0", "t1", "t2"]
    assert np.array_equal(ident[2].pixels, images[2].pixels)


def test_stage2_dataset_id_mismatch():
    with pytest.raises(ConsistencyError):
        build_stage2_dataset(_set(), _images(2), AugmentationParams.identity())
