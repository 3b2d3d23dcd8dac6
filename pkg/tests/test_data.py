import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darcnn.core import Domain, ImageSample, InstanceAnnotation, access_context
from darcnn.data import (
    AugmentationParams, augment, augment_pixels, crop_patches, generate_synthetic,
    invert_intensity, load_dataset, load_synthetic_spec, save_dataset, save_synthetic_spec,
    source_spec, target_spec,
)
from darcnn.errors import ConfigError, GenerationError, SizeError


def _equal_samples(a, b):
    assert a.id == b.id and a.domain == b.domain
    assert a.pixels.dtype == b.pixels.dtype and np.array_equal(a.pixels, b.pixels)
    with access_context("evaluator"):
        assert np.array_equal(a.label_map(), b.label_map())


def test_generation_is_deterministic():
    a = generate_synthetic(target_spec(), 2, 7)
    b = generate_synthetic(target_spec(), 2, 7)
    for x, y in zip(a, b):
        _equal_samples(x, y)
    c = generate_synthetic(target_spec(), 2, 8)
    assert not np.array_equal(a[0].pixels, c[0].pixels)


def test_sample_depends_only_on_index():
    full = generate_synthetic(source_spec(), 4, 3)
    tail = generate_synthetic(source_spec(), 2, 3, start=2)
    _equal_samples(full[2], tail[0])


def test_homogeneous_background_without_noise_is_constant():
    spec = target_spec(noise_std=0.0, texture_sigma=0.0)
    for s in generate_synthetic(spec, 3, 1):
        with access_context("evaluator"):
            fg = s.label_map() > 0
        assert len(np.unique(s.pixels[~fg])) == 1


def test_instance_count_range():
    for s in generate_synthetic(source_spec(instances_per_image=(3, 5)), 6, 2):
        assert 3 <= len(s.annotations) <= 5


def test_target_annotations_are_evaluation_only():
    s = generate_synthetic(target_spec(), 1, 0)[0]
    assert s.domain is Domain.TARGET and s.has_annotations
    with access_context("trainer"):
        with pytest.raises(Exception):
            s.annotations


def test_instances_never_touch():
    from scipy import ndimage
    for s in generate_synthetic(source_spec(instances_per_image=(5, 6)), 4, 0):
        masks = [a.mask for a in s.annotations]
        for i, m in enumerate(masks):
            grown = ndimage.binary_dilation(m)
            assert not any((grown & o).any() for j, o in enumerate(masks) if j != i)


def test_infeasible_placement_raises():
    spec = source_spec(image_size=(16, 16), instances_per_image=(20, 20),
                       radius_range=(5.0, 6.0))
    with pytest.raises(GenerationError):
        generate_synthetic(spec, 1, 0)


def test_spec_validation():
    with pytest.raises(ConfigError):
        source_spec(instances_per_image=(4, 2))
    with pytest.raises(ConfigError):
        source_spec(noise_std=-1.0)


def test_spec_file_round_trip(tmp_path):
    spec = target_spec(noise_std=3.5, instances_per_image=(2, 4))
    save_synthetic_spec(spec, tmp_path / "t.ini")
    assert load_synthetic_spec(tmp_path / "t.ini") == spec


def _big_sample():
    m1 = np.zeros((64, 64), bool)
    m1[5:10, 5:12] = True
    m2 = np.zeros((64, 64), bool)
    m2[40:50, 40:60] = True
    pix = np.arange(64 * 64, dtype=np.int64).reshape(64, 64) % 251
    return ImageSample("big", pix.astype(np.uint8), Domain.SOURCE,
                       [InstanceAnnotation.from_mask(1, m1), InstanceAnnotation.from_mask(2, m2)])


def test_crop_patch_shapes_and_identity():
    s = generate_synthetic(source_spec(image_size=(64, 64)), 1, 0)[0]
    patches = crop_patches(_big_sample(), (32, 32), 4, 0)
    assert len(patches) == 4 and all(p.shape == (32, 32) for p in patches)
    same = crop_patches(s, (64, 64), 1, 0)[0]
    assert np.array_equal(same.pixels, s.pixels)
    assert np.array_equal(same.label_map(), s.label_map())
    with pytest.raises(SizeError):
        crop_patches(s, (65, 64), 1, 0)


def test_crop_drops_outside_instances_and_retightens():
    s = _big_sample()
    for p in crop_patches(s, (24, 24), 20, 1):
        y0, x0 = p.metadata["offset"]
        for a in p.annotations:
            original = next(o for o in s.annotations if o.instance_id == a.instance_id)
            window = original.mask[y0:y0 + 24, x0:x0 + 24]
            assert np.array_equal(a.mask, window)  # subset of the original, pixel-aligned
        kept = {a.instance_id for a in p.annotations}
        for o in s.annotations:
            if not o.mask[y0:y0 + 24, x0:x0 + 24].any():
                assert o.instance_id not in kept


def test_invert_examples():
    pix = np.tile(np.array([[0, 200], [255, 10]], dtype=np.uint8), (8, 8))
    s = ImageSample("i", pix, Domain.TARGET)
    inv = invert_intensity(s)
    assert inv.pixels[0, 0] == 255 and inv.pixels[0, 1] == 55
    assert np.array_equal(invert_intensity(inv).pixels, pix)


def test_augment_paper_example_on_constant_image():
    pix = np.full((16, 16), 160, np.uint8)
    out = augment_pixels(pix, AugmentationParams(1.0, 1.5, -150.0))
    assert (out == 90).all()


def test_augment_identity_and_blur_of_constant():
    s = generate_synthetic(target_spec(), 1, 0)[0]
    assert np.array_equal(augment(s, AugmentationParams(0.0, 1.0, 0.0), 0).pixels, s.pixels)
    const = np.full((20, 20), 77.0)
    assert np.allclose(augment_pixels(const, AugmentationParams(2.0, 1.0, 0.0)), 77.0)


def test_augment_blur_uses_three_sigma_radius_and_reflect():
    from scipy import ndimage
    img = np.zeros((21, 21))
    img[10, 10] = 100.0
    out = augment_pixels(img, AugmentationParams(1.0, 1.0, 0.0))
    x = np.arange(-3, 4)
    k = np.exp(-x ** 2 / 2.0)
    k /= k.sum()
    expected = np.zeros_like(img)
    expected[7:14, 7:14] = 100.0 * np.outer(k, k)
    assert np.allclose(out, expected, atol=1e-12)
    assert out[10, 14] == 0.0  # nothing beyond radius 3
    border = np.zeros((9, 9))
    border[0, 4] = 10.0
    ref = ndimage.convolve1d(ndimage.convolve1d(border, k, 0, mode="reflect"), k, 1, mode="reflect")
    assert np.allclose(augment_pixels(border, AugmentationParams(1.0, 1.0, 0.0)), ref)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 3), st.floats(0.1, 3), st.floats(-200, 200))
def test_augment_keeps_geometry_and_range(sigma, scale, delta):
    s = generate_synthetic(source_spec(image_size=(24, 24), instances_per_image=(1, 2),
                                       radius_range=(3.0, 5.0)), 1, 0)[0]
    out = augment(s, AugmentationParams(sigma, scale, delta), 0)
    assert out.pixels.shape == s.pixels.shape and out.pixels.dtype == np.uint8
    assert np.array_equal(out.label_map(), s.label_map())


def test_augmentation_params_validation():
    with pytest.raises(ConfigError):
        AugmentationParams(-1.0, 1.0, 0.0)
    with pytest.raises(ConfigError):
        AugmentationParams(1.0, 0.0, 0.0)
    assert AugmentationParams.identity().is_identity()


def test_dataset_round_trip(tmp_path):
    src = generate_synthetic(source_spec(), 3, 0)
    tgt = generate_synthetic(target_spec(split="val"), 2, 0)
    unl = [s.replace(annotations=None, id=s.id + "_u") for s in generate_synthetic(target_spec(), 1, 0)]
    save_dataset(src + tgt + unl, tmp_path / "val")
    back = load_dataset(tmp_path / "val")
    assert [s.id for s in back] == [s.id for s in src + tgt + unl]
    for a, b in zip(src + tgt, back):
        _equal_samples(a, b)
        assert b.split.value == "val"
    assert not back[-1].has_annotations
    manifest = (tmp_path / "val" / "manifest.tsv").read_text(encoding="utf-8").splitlines()
    assert manifest[0].split("\t") == ["id", "image", "label", "domain"]
    assert manifest[-1].split("\t")[2] == "-"


def test_label_png_is_16_bit(tmp_path):
    from PIL import Image
    lm = np.zeros((16, 16), np.uint16)
    lm[2:5, 2:5] = 300
    s = ImageSample("big_id", np.zeros((16, 16), np.uint8), Domain.SOURCE,
                    [InstanceAnnotation.from_mask(300, lm == 300)])
    save_dataset([s], tmp_path / "d")
    with Image.open(tmp_path / "d" / "labels" / "big_id.png") as im:
        arr = np.array(im)
    assert arr.dtype == np.uint16 and arr.max() == 300
