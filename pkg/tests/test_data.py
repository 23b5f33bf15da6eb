import csv
import json

import numpy as np
import pytest

from mcldm import ConfigurationError, ContractError
from mcldm.data import (ATTRIBUTES, PARTS, PairedDataset, RendererSpec, SamplePair, check_mask,
                        export_dataset, generate_dataset, ingest_external, mask_component_swap,
                        split_of)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(300, seed=5)


def test_determinism_bytes():
    a = generate_dataset(20, seed=3)
    b = generate_dataset(20, seed=3)
    for x, y in [(a.images, b.images), (a.masks, b.masks), (a.attrs, b.attrs)]:
        assert x.tobytes() == y.tobytes()
    assert a.ids == b.ids
    c = generate_dataset(20, seed=4)
    assert a.images.tobytes() != c.images.tobytes()


def test_sample_depends_only_on_index():
    small = generate_dataset(5, seed=9)
    big = generate_dataset(12, seed=9)
    assert np.array_equal(small.images, big.images[:5])


def test_shapes_and_ranges(ds):
    assert ds.images.shape == (300, 3, 32, 32)
    assert ds.masks.shape == (300, len(PARTS), 32, 32)
    assert ds.attrs.shape == (300, len(ATTRIBUTES))
    assert ds.images.min() >= -1 and ds.images.max() <= 1


def test_masks_one_hot(ds):
    check_mask(ds.masks)
    assert set(np.unique(ds.masks.sum(axis=1))) <= {0, 1}


def test_attribute_mask_consistency(ds):
    area = ds.masks.reshape(len(ds), len(PARTS), -1).sum(-1)
    bit = {n: ds.attrs[:, i] for i, n in enumerate(ATTRIBUTES)}
    assert np.array_equal(area[:, PARTS.index("glasses")] > 0, bit["has_glasses"] == 1)
    assert np.array_equal(area[:, PARTS.index("hat")] > 0, bit["has_hat"] == 1)
    assert not np.any(bit["face_left"] & bit["face_right"])
    # face offset shows in the skin centroid
    skin = ds.masks[:, PARTS.index("skin")].astype(float)
    cols = np.arange(32) + 0.5
    cx = (skin.sum(axis=1) * cols).sum(-1) / skin.sum(axis=(1, 2))
    assert np.all(cx[bit["face_left"] == 1] < 14.5)
    assert np.all(cx[bit["face_right"] == 1] > 17.5)
    # smiling mouths are wider than neutral ones
    mouth = area[:, PARTS.index("mouth")]
    assert mouth[bit["smiling"] == 1].min() > mouth[bit["smiling"] == 0].max()


def test_bits_roughly_balanced(ds):
    means = ds.attrs.mean(axis=0)
    assert np.all(means > 0.2) and np.all(means < 0.8)


@pytest.mark.parametrize("kwargs", [dict(parts=()), dict(parts=("skin", "tail")),
                                    dict(parts=("eyes",)), dict(size=30), dict(p_hat=2.0)])
def test_bad_renderer_spec(kwargs):
    with pytest.raises(ConfigurationError):
        RendererSpec(**kwargs)


def test_bad_n():
    with pytest.raises(ConfigurationError):
        generate_dataset(0)


def test_reduced_parts_spec():
    d = generate_dataset(30, seed=1, spec=RendererSpec(parts=("skin", "hair")))
    assert d.masks.shape[1] == 2
    assert d.attrs[:, ATTRIBUTES.index("has_glasses")].sum() == 0


def test_split_is_deterministic_and_about_five_to_one(ds):
    train, val = ds.split()
    assert len(train) + len(val) == len(ds)
    assert set(train.ids).isdisjoint(val.ids)
    assert 0.08 < len(val) / len(ds) < 0.28
    assert [split_of(i) for i in val.ids] == ["val"] * len(val)


def _find_pair(ds):
    left = int(np.flatnonzero(ds.attrs[:, ATTRIBUTES.index("face_left")])[0])
    right = int(np.flatnonzero(ds.attrs[:, ATTRIBUTES.index("face_right")])[0])
    return ds[left], ds[right]


def test_swap_nothing(ds):
    a, b = ds[0], ds[1]
    res = mask_component_swap(a, b, [])
    assert np.array_equal(res.first, a.mask) and np.array_equal(res.second, b.mask)
    assert res.coherent


def test_swap_everything(ds):
    a, b = ds[0], ds[1]
    first, second = mask_component_swap(a, b, PARTS)
    assert np.array_equal(first, b.mask) and np.array_equal(second, a.mask)


def test_swap_eyes_between_offsets_flags_overlap(ds):
    a, b = _find_pair(ds)
    res = mask_component_swap(a, b, ["eyes"])
    eyes = PARTS.index("eyes")
    others_a = np.delete(a.mask, eyes, axis=0).sum(0)
    expected = (b.mask[eyes] == 1) & (others_a == 1)
    assert expected.sum() > 0
    assert np.array_equal(res.conflicts_first, expected)
    assert not res.coherent
    # no re-alignment: the swapped channel is copied verbatim
    assert np.array_equal(res.first[eyes], b.mask[eyes])


def test_swap_unknown_part(ds):
    with pytest.raises(ContractError):
        mask_component_swap(ds[0], ds[1], ["nose"])


def test_export_ingest_roundtrip(tmp_path, ds):
    sub = ds.subset(range(25))
    export_dataset(sub, tmp_path, seed=5, spec=RendererSpec())
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["channels"]["1"] == "skin" and manifest["seed"] == 5
    back, issues = ingest_external(tmp_path)
    assert issues == []
    assert list(back) == list(sub)


def test_ingest_empty_directory(tmp_path):
    back, issues = ingest_external(tmp_path)
    assert len(back) == 0 and issues == []


def test_ingest_reports_two_hot_mask(tmp_path, ds):
    sub = ds.subset(range(4))
    export_dataset(sub, tmp_path)
    bad = sub[2].mask.copy()
    bad[0, 0, 0] = bad[1, 0, 0] = 1
    (tmp_path / "masks" / f"{sub.ids[2]}.png").unlink()
    np.save(tmp_path / "masks" / f"{sub.ids[2]}.npy", bad)
    back, issues = ingest_external(tmp_path)
    assert [i.id for i in issues] == [sub.ids[2]]
    assert "more than one part" in issues[0].reason
    assert len(back) == 3


def test_ingest_accounts_for_every_entry(tmp_path, ds):
    sub = ds.subset(range(6))
    export_dataset(sub, tmp_path)
    (tmp_path / "images" / f"{sub.ids[0]}.png").unlink()
    (tmp_path / "masks" / f"{sub.ids[1]}.png").unlink()
    with open(tmp_path / "attributes.csv", "a", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ghost"] + ["2"] * len(ATTRIBUTES))
        w.writerow(["short", "1"])
    extra = sub[3]
    from PIL import Image
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(tmp_path / "images" / "orphan.png")
    back, issues = ingest_external(tmp_path)
    reported = {i.id for i in issues}
    assert reported == {sub.ids[0], sub.ids[1], "ghost", "short", "orphan"}
    assert len(back) + len(issues) == 6 + 3
    assert extra.id in back.ids


def test_sample_pair_equality(ds):
    assert ds[0] == ds[0]
    assert ds[0] != ds[1]
    assert isinstance(ds[0], SamplePair)


def test_from_pairs_roundtrip(ds):
    pairs = [ds[i] for i in range(5)]
    again = PairedDataset.from_pairs(pairs)
    assert list(again) == pairs
    assert len(PairedDataset.from_pairs([])) == 0
