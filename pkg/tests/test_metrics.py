import json

import numpy as np
import pytest

from mcldm import ContractError
from mcldm.data import generate_dataset
from mcldm.metrics import (EvalReport, FeatureExtractor, MaskSegmenter, attribute_accuracy,
                           diversity_lpips, frechet_distance, kernel_distance,
                           kernel_distance_subsets, mask_accuracy, miou, pairwise_diversity)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(400, seed=21)


@pytest.fixture(scope="module")
def extractor(small_data):
    return FeatureExtractor(epochs=2, random_state=0).fit(small_data.images, small_data.attrs)


def test_frechet_self_distance_zero(rng):
    a = rng.normal(size=(500, 8))
    assert abs(frechet_distance(a, a)) <= 1e-6


def test_frechet_gaussian_shift(rng):
    a = rng.normal(0.0, 1.0, size=(10_000, 1))
    b = rng.normal(1.0, 1.0, size=(10_000, 1))
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=0.1)


def test_frechet_symmetry_and_closed_form(rng):
    a = rng.normal(size=(300, 4)) @ rng.normal(size=(4, 4))
    b = rng.normal(size=(300, 4)) * 2 + 1
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-8
    # independent route: scipy's general matrix square root on the raw product
    from scipy.linalg import sqrtm

    ca = np.cov(a, rowvar=False) + 1e-6 * np.eye(4)
    cb = np.cov(b, rowvar=False) + 1e-6 * np.eye(4)
    ref = (np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca) + np.trace(cb)
           - 2 * np.trace(sqrtm(ca @ cb).real))
    assert frechet_distance(a, b) == pytest.approx(ref, rel=1e-8)


def test_frechet_singular_covariance(rng):
    a = np.zeros((10, 3))
    b = np.ones((10, 3))
    assert frechet_distance(a, b) == pytest.approx(3.0, abs=1e-5)


def test_feature_contract():
    with pytest.raises(ContractError):
        frechet_distance(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(ContractError):
        kernel_distance(np.zeros((5, 3)), np.zeros((5, 4)))
    with pytest.raises(ContractError):
        kernel_distance(np.zeros((1, 3)), np.zeros((5, 3)))


def test_kid_same_rows_near_zero(rng):
    a = rng.normal(size=(400, 8))
    assert abs(kernel_distance(a, a)) < 0.05


def test_kid_grows_with_separation(rng):
    base = rng.normal(size=(200, 4))
    vals = [kernel_distance(base, rng.normal(size=(200, 4)) + d) for d in (2.0, 4.0, 8.0)]
    assert 0 < vals[0] < vals[1] < vals[2]


def test_kid_unbiased_over_splits(rng):
    vals = []
    for _ in range(200):
        x = rng.normal(size=(40, 4))
        vals.append(kernel_distance(x[:20], x[20:]))
    vals = np.array(vals)
    assert abs(vals.mean()) < 3 * vals.std() / np.sqrt(len(vals))


def test_kid_subset_average_matches_full(rng):
    a = rng.normal(size=(1000, 6))
    b = rng.normal(size=(1000, 6)) + 0.3
    full = kernel_distance(a, b)
    mean, std = kernel_distance_subsets(a, b, n_subsets=100, subset_size=200, seed=1)
    assert abs(mean - full) < 3 * std / np.sqrt(100)


def _one_class(pixels, shape=(1, 2, 2)):
    m = np.zeros(shape, np.uint8)
    for p in pixels:
        m[(0,) + p] = 1
    return m


def test_miou_hand_cases():
    a = _one_class([(0, 0), (0, 1)])
    b = _one_class([(0, 1), (1, 0)])
    assert miou(a, a) == 1.0
    assert miou(_one_class([(0, 0)]), _one_class([(1, 1)])) == 0.0
    assert miou(a, b) == pytest.approx(1 / 3, abs=1e-15)


def test_miou_skips_classes_empty_in_both():
    a = np.zeros((3, 2, 2), np.uint8)
    b = np.zeros((3, 2, 2), np.uint8)
    a[0, 0, 0] = b[0, 0, 0] = 1
    a[1, 1, 1] = 1
    assert miou(a, b) == pytest.approx(0.5)


def test_miou_properties(small_data, rng):
    m = small_data.masks[:20]
    other = small_data.masks[20:40]
    v = miou(m, other)
    assert 0 <= v <= 1
    assert v == miou(other, m)
    assert miou(m, m) == 1.0
    with pytest.raises(ContractError):
        miou(m, m[:, :, :16])


def test_mask_accuracy(small_data):
    m = small_data.masks[:5]
    assert mask_accuracy(m, m) == 1.0
    blank = np.zeros_like(m)
    bg = float(np.mean(m.sum(axis=1) == 0))
    assert mask_accuracy(blank, m) == pytest.approx(bg)


class _Oracle:
    def __init__(self, attrs):
        self.attrs = attrs

    def predict(self, images):
        return self.attrs


def test_attribute_accuracy_oracle(small_data):
    assert attribute_accuracy(small_data.images, small_data.attrs, _Oracle(small_data.attrs)) == 1.0
    with pytest.raises(ContractError):
        attribute_accuracy(small_data.images[:3], small_data.attrs[:2], _Oracle(small_data.attrs))


def test_attribute_accuracy_chance_on_noise(extractor, rng):
    n = 500
    noise = rng.uniform(-1, 1, size=(n, 3, 32, 32)).astype(np.float32)
    attrs = rng.integers(0, 2, size=(n, 8))
    acc = attribute_accuracy(noise, attrs, extractor)
    sigma = np.sqrt(0.25 / (n * 8))
    assert abs(acc - 0.5) < 3 * sigma * np.sqrt(8)  # bits of one image are correlated


def test_extractor_learns(extractor, small_data):
    assert extractor.score(small_data.images, small_data.attrs) > 0.8
    assert extractor.transform(small_data.images[:3]).shape == (3, 128)


def test_perceptual_distance_properties(extractor, small_data):
    x = small_data.images[:6]
    y = small_data.images[6:12]
    assert np.all(extractor.perceptual_distance(x, x) == 0)
    np.testing.assert_allclose(extractor.perceptual_distance(x, y),
                               extractor.perceptual_distance(y, x), rtol=1e-6)
    assert np.all(extractor.perceptual_distance(x, y) > 0)


def test_diversity_of_identical_images_is_zero(extractor, small_data):
    same = np.repeat(small_data.images[:1], 10, axis=0)
    assert pairwise_diversity(same, extractor) == 0.0
    assert pairwise_diversity(small_data.images[:10], extractor) > 0


def test_diversity_requires_stochastic_sampler(extractor):
    with pytest.raises(ContractError):
        diversity_lpips(None, None, 10, extractor, eta=0.0)
    with pytest.raises(ContractError):
        diversity_lpips(None, None, 1, extractor, eta=1.0)


def test_segmenter_fits(small_data):
    seg = MaskSegmenter(epochs=1).fit(small_data.images[:200], small_data.masks[:200])
    pred = seg.predict(small_data.images[:5])
    assert pred.shape == (5, 6, 32, 32)
    assert set(np.unique(pred.sum(axis=1))) <= {0, 1}


def test_eval_report_serialization():
    rep = EvalReport(fid=1.5, kid=0.01, attr_acc=0.9, mask_acc=0.8, miou=0.7, lpips_mean=0.2, n=50)
    d = json.loads(rep.to_json())
    assert d["n"] == 50 and d["fid"] == 1.5
    lines = rep.to_csv().strip().splitlines()
    assert lines[0].split(",")[:7] == ["fid", "kid", "attr_acc", "mask_acc", "miou", "lpips_mean", "n"]
    with pytest.raises(ContractError):
        EvalReport(fid=1.0, kid=0.0, attr_acc=1.5, mask_acc=0.5, miou=0.5, lpips_mean=0.1, n=1)
