import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import perceptron_separable
from slimssl.data import (
    CifarFormatError,
    DataConfig,
    FeatureDropout,
    GaussianNoise,
    HorizontalFlip,
    Identity,
    ImageRecord,
    RandomCrop,
    augment_batch,
    build_policy,
    default_policy,
    hflip,
    load_dataset,
    parse_cifar,
    records_to_arrays,
    synthetic_blobs,
    two_view_augment,
    write_cifar,
)
from slimssl.evaluation import linear_probe


def random_records(n, variant, seed=0):
    rng = np.random.default_rng(seed)
    nl = 1 if variant == "cifar10" else 2
    return [
        ImageRecord(tuple(int(v) for v in rng.integers(0, 100 if nl == 2 else 10, size=nl)),
                    rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8))
        for _ in range(n)
    ]


@pytest.mark.parametrize("variant,size", [("cifar10", 3073), ("cifar100", 3074)])
def test_cifar_round_trip_is_byte_exact(tmp_path, variant, size):
    recs = random_records(10, variant)
    path = tmp_path / "data.bin"
    write_cifar(recs, path, variant)
    raw = path.read_bytes()
    assert len(raw) == 10 * size
    parsed = parse_cifar(path, variant)
    assert parsed == recs
    path2 = tmp_path / "again.bin"
    write_cifar(parsed, path2, variant)
    assert path2.read_bytes() == raw


def test_cifar_layout_is_label_then_planar_pixels():
    pixels = np.zeros((3, 32, 32), dtype=np.uint8)
    pixels[0, 0, 1] = 7  # red plane, row 0, column 1
    pixels[2, 31, 31] = 9  # last byte of the blue plane
    raw = bytes([3]) + pixels.tobytes()
    assert raw[1 + 1] == 7 and raw[-1] == 9
    (rec,) = parse_cifar(raw, "cifar10")
    assert rec.label == 3 and np.array_equal(rec.pixels, pixels)


def test_cifar100_uses_fine_label():
    raw = bytes([4, 57]) + bytes(3072)
    (rec,) = parse_cifar(raw, "cifar100")
    assert rec.labels == (4, 57) and rec.label == 57


def test_cifar_counts_and_errors():
    assert len(parse_cifar(bytes(30730), "cifar10")) == 10
    with pytest.raises(CifarFormatError) as exc:
        parse_cifar(bytes(30731), "cifar10")
    assert exc.value.offset == 30730
    with pytest.raises(CifarFormatError) as exc:
        parse_cifar(bytes(3073 * 2 + 100), "cifar10")
    assert exc.value.offset == 3073 * 2
    with pytest.raises(ValueError):
        parse_cifar(bytes(3073), "svhn")


def test_records_to_arrays_scales_pixels():
    recs = random_records(3, "cifar10")
    X, y = records_to_arrays(recs)
    assert X.shape == (3, 3, 32, 32) and X.max() <= 1.0
    assert np.array_equal(y, [r.label for r in recs])


def test_blobs_deterministic_and_balanced():
    a, ya = synthetic_blobs(101, 5, 3, seed=7)
    b, yb = synthetic_blobs(101, 5, 3, seed=7)
    assert np.array_equal(a, b) and np.array_equal(ya, yb)
    counts = np.bincount(ya)
    assert counts.max() - counts.min() <= 1


def test_blobs_small_spread_linearly_separable():
    X, y = synthetic_blobs(100, 8, 2, spread=0.2, seed=0)
    assert perceptron_separable(X, y)


def test_blobs_huge_spread_probe_is_chance():
    X, y = synthetic_blobs(2000, 8, 2, spread=1e4, seed=1)
    acc = linear_probe(X[:1000], y[:1000], X[1000:], y[1000:])
    assert abs(acc - 0.5) <= 0.05


def test_blobs_invalid_sizes():
    with pytest.raises(ValueError):
        synthetic_blobs(10, 4, 1)
    with pytest.raises(ValueError):
        synthetic_blobs(2, 4, 3)


def test_identity_policy_gives_equal_views():
    rec = random_records(1, "cifar10")[0]
    pair = two_view_augment(rec, [Identity()], np.random.default_rng(0), source_id=5)
    assert np.array_equal(pair.view1, pair.view2) and pair.source_id == 5


def test_fixed_rng_reproducible_pair():
    rec = random_records(1, "cifar10")[0]
    policy = default_policy("images")
    a = two_view_augment(rec, policy, np.random.default_rng(3))
    b = two_view_augment(rec, policy, np.random.default_rng(3))
    assert np.array_equal(a.view1, b.view1) and np.array_equal(a.view2, b.view2)
    assert not np.array_equal(a.view1, a.view2)
    assert len(a.log) == 2


@given(st.integers(0, 10_000))
def test_hflip_is_an_involution(seed):
    x = np.random.default_rng(seed).integers(0, 256, size=(3, 32, 32))
    assert np.array_equal(hflip(hflip(x)), x)


def test_crop_preserves_shape_and_content_window():
    X = np.arange(2 * 3 * 32 * 32, dtype=float).reshape(2, 3, 32, 32)
    out, params = RandomCrop(4).apply(X, np.random.default_rng(0))
    assert out.shape == X.shape
    dy, dx = params["dy"][0] - 4, params["dx"][0] - 4
    if dy >= 0 and dx >= 0:
        assert out[0, 0, 0, 0] == X[0, 0, dy, dx]


def test_vector_ops_and_policy_building():
    X = np.ones((4, 10))
    out, _ = augment_batch(X, [HorizontalFlip(1.0), GaussianNoise(0.0), FeatureDropout(0.0)], np.random.default_rng(0))
    assert np.array_equal(out, X)
    ops = build_policy([{"op": "noise", "sigma": 0.2}, {"op": "dropout", "p": 0.3}])
    assert [o.name for o in ops] == ["noise", "dropout"] and ops[0].sigma == 0.2
    with pytest.raises(ValueError):
        build_policy([{"op": "solarize"}])
    with pytest.raises(ValueError):
        augment_batch(X, [], np.random.default_rng(0))


def test_load_dataset_blobs_split(tmp_path):
    Xtr, ytr, Xte, yte = load_dataset(DataConfig(n_train=50, n_test=20, d=4, classes=2))
    assert Xtr.shape == (50, 4) and Xte.shape == (20, 4)
    recs = random_records(6, "cifar10")
    write_cifar(recs, tmp_path / "train.bin")
    write_cifar(recs[:2], tmp_path / "test.bin")
    Xtr, ytr, Xte, yte = load_dataset(DataConfig(kind="cifar10", path=str(tmp_path / "train.bin"),
                                                 test_path=str(tmp_path / "test.bin"), n_train=4))
    assert Xtr.shape == (4, 3, 32, 32) and Xte.shape == (2, 3, 32, 32)
    with pytest.raises(ValueError):
        DataConfig(kind="cifar10")
