import numpy as np
import pytest

from multiexit import autodiff as ad
from multiexit.autodiff import Tensor
from multiexit.data import (
    DatasetSpec,
    generate_synthetic,
    idx_bytes,
    load_idx,
    load_idx_dataset,
    parse_idx,
    read_idx,
    write_idx,
)
from multiexit.errors import ConfigError, IdxFormatError


def spec(**kw):
    base = dict(n_train=1000, n_val=200, n_test=300, input_dim=8, classes=5, seed=4)
    base.update(kw)
    return DatasetSpec(**base)


@pytest.mark.parametrize("kind", ["synthetic_blobs", "synthetic_easy_hard"])
def test_same_seed_same_bytes(kind):
    a, b = generate_synthetic(spec(kind=kind)), generate_synthetic(spec(kind=kind))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != generate_synthetic(spec(kind=kind, seed=5)).fingerprint()


def test_split_sizes_and_balance():
    d = generate_synthetic(spec(n_train=1003))
    assert (len(d.y_train), len(d.y_val), len(d.y_test)) == (1003, 200, 300)
    for y in (d.y_train, d.y_val, d.y_test):
        counts = np.bincount(y, minlength=5)
        assert np.all(np.abs(counts / len(y) - 0.2) <= 0.02)


def test_hard_fraction_is_exact():
    d = generate_synthetic(spec(n_train=0, n_val=0, n_test=1000, difficulty_mix=0.3))
    assert d.hard_test.sum() == 300


def test_too_many_classes():
    with pytest.raises(ConfigError):
        DatasetSpec(input_dim=3, classes=7)
    with pytest.raises(ConfigError):
        DatasetSpec(classes=1)


def test_all_easy_is_linearly_separable():
    d = generate_synthetic(spec(kind="synthetic_easy_hard", difficulty_mix=0.0, classes=10,
                                input_dim=16, n_train=2000, n_test=2000))
    w = Tensor(np.zeros((16, 10)), requires_grad=True)
    b = Tensor(np.zeros(10), requires_grad=True)
    for _ in range(200):
        loss = ad.cross_entropy_loss(Tensor(d.x_train) @ w + b, d.y_train)
        w.zero_grad(), b.zero_grad()
        ad.backward(loss)
        w.data -= 0.5 * w.grad
        b.data -= 0.5 * b.grad
    pred = (d.x_test @ w.data + b.data).argmax(axis=1)
    assert np.mean(pred == d.y_test) >= 0.99


def test_hard_samples_need_more_than_a_linear_probe():
    d = generate_synthetic(spec(difficulty_mix=1.0, n_train=2000, n_test=1000))
    # logistic regression fit on the same split stays well below the all-easy case
    w = Tensor(np.zeros((8, 5)), requires_grad=True)
    for _ in range(200):
        loss = ad.cross_entropy_loss(Tensor(d.x_train) @ w, d.y_train)
        w.zero_grad()
        ad.backward(loss)
        w.data -= 0.5 * w.grad
    assert np.mean((d.x_test @ w.data).argmax(axis=1) == d.y_test) < 0.8


# IDX


def test_magic_0803_three_dim_accepted():
    blob = bytes([0, 0, 8, 3]) + (2).to_bytes(4, "big") + (3).to_bytes(4, "big") \
        + (4).to_bytes(4, "big") + bytes(range(24))
    arr = parse_idx(blob)
    assert arr.shape == (2, 3, 4) and arr.dtype == np.uint8
    assert arr[1, 2, 3] == 23


@pytest.mark.parametrize("dtype", ["u1", "i1", "i2", "i4", "f4", "f8"])
def test_idx_round_trip(tmp_path, dtype):
    arr = (np.arange(60).reshape(3, 4, 5) - (0 if dtype == "u1" else 20)).astype(dtype)
    write_idx(tmp_path / "a.idx", arr)
    back = read_idx(tmp_path / "a.idx")
    assert back.dtype == arr.dtype and np.array_equal(back, arr)
    assert idx_bytes(back) == (tmp_path / "a.idx").read_bytes()


def test_idx_big_endian_payload():
    blob = idx_bytes(np.array([1, 256], dtype=np.int32))
    assert blob[8:] == b"\x00\x00\x00\x01\x00\x00\x01\x00"


def test_truncated_payload_names_lengths():
    blob = idx_bytes(np.zeros((4, 5), dtype=np.uint8))[:-3]
    with pytest.raises(IdxFormatError, match="expected 20 bytes, got 17") as e:
        parse_idx(blob)
    assert e.value.offset == 12 + 17


@pytest.mark.parametrize("blob,offset", [
    (b"\x01\x00\x08\x01\x00\x00\x00\x01\x05", 0),
    (b"\x00\x00\x07\x01\x00\x00\x00\x01\x05", 2),
    (b"\x00\x00\x08\x02\x00\x00\x00\x01", 8),
    (b"\x00\x00", 0),
])
def test_bad_headers(blob, offset):
    with pytest.raises(IdxFormatError) as e:
        parse_idx(blob)
    assert e.value.offset == offset
    assert f"offset {offset}" in str(e.value)


def test_load_idx_normalizes_and_flattens(tmp_path):
    imgs = np.array([[[0, 255], [51, 102]]] * 3, dtype=np.uint8)
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", np.array([0, 1, 2], dtype=np.uint8))
    x, y = load_idx(tmp_path / "i", tmp_path / "l")
    assert x.shape == (3, 4)
    np.testing.assert_array_equal(x[0], [0.0, 1.0, 0.2, 0.4])
    assert y.tolist() == [0, 1, 2]


def test_idx_dataset_holds_out_validation(tmp_path):
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "tri", rng.integers(0, 256, (50, 3, 3), dtype=np.uint8))
    write_idx(tmp_path / "trl", (np.arange(50) % 10).astype(np.uint8))
    write_idx(tmp_path / "tei", rng.integers(0, 256, (20, 3, 3), dtype=np.uint8))
    write_idx(tmp_path / "tel", (np.arange(20) % 10).astype(np.uint8))
    s = DatasetSpec(kind="idx_files", n_train=0, n_val=10, n_test=0,
                    train_images=str(tmp_path / "tri"), train_labels=str(tmp_path / "trl"),
                    test_images=str(tmp_path / "tei"), test_labels=str(tmp_path / "tel"))
    d = load_idx_dataset(s)
    assert (len(d.y_train), len(d.y_val), len(d.y_test)) == (40, 10, 20)
    assert d.y_val.tolist() == list(range(10))
    assert d.input_dim == 9
