import gzip
import struct

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from flmn import episodes as ep
from flmn.episodes import AugmentationSpec, DatasetError


# ---------------------------------------------------------------------------
# fixtures


def write_omniglot_tree(root, n_alphabets=2, chars=(2, 1), samples=20, size=105, seed=0,
                        short=None):
    """Fake Omniglot layout: black ink on white, like the real PNGs."""
    rng = np.random.default_rng(seed)
    for a in range(n_alphabets):
        for c in range(chars[a]):
            d = root / f"alphabet{a}" / f"character{c:02d}"
            d.mkdir(parents=True)
            n = samples - 1 if short == (a, c) else samples
            for s in range(n):
                ink = rng.random((size, size)) < 0.1
                Image.fromarray(np.where(ink, 0, 255).astype(np.uint8)).save(d / f"{s:02d}.png")
    return root


def write_idx(path, arr, magic, gz=False):
    header = struct.pack(">i", magic) + struct.pack(f">{arr.ndim}i", *arr.shape)
    data = header + arr.astype(np.uint8).tobytes()
    with (gzip.open(path, "wb") if gz else open(path, "wb")) as f:
        f.write(data)


@pytest.fixture
def mnist_files(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), 25)
    rng.shuffle(labels)
    imgs = rng.integers(0, 256, (len(labels), 28, 28))
    write_idx(tmp_path / "img.idx", imgs, 2051)
    write_idx(tmp_path / "lab.idx.gz", labels, 2049, gz=True)
    return tmp_path / "img.idx", tmp_path / "lab.idx.gz", imgs, labels


# ---------------------------------------------------------------------------
# downscale / augmentation


def test_area_downscale_matches_block_mean():
    img = np.random.default_rng(0).random((40, 40))
    np.testing.assert_allclose(ep.downscale(img), img.reshape(20, 2, 20, 2).mean(axis=(1, 3)))


def test_area_downscale_preserves_mean():
    img = np.random.default_rng(1).random((105, 105))
    assert ep.downscale(img).mean() == pytest.approx(img.mean(), rel=1e-12)


def test_area_downscale_matches_opencv():
    cv2 = pytest.importorskip("cv2")
    img = np.random.default_rng(2).random((105, 105)).astype(np.float32)
    ref = cv2.resize(img, (20, 20), interpolation=cv2.INTER_AREA)
    np.testing.assert_allclose(ep.downscale(img), ref, atol=1e-5)


def test_identity_transform_is_plain_downscale():
    img = np.random.default_rng(3).random((105, 105))
    np.testing.assert_allclose(ep.transform_image(img, 0.0, 0, 0), ep.downscale(img), atol=1e-6)


def _smooth_blob(size=105, cx=52.0, cy=52.0, sigma=12.0):
    y, x = np.mgrid[:size, :size]
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2 * 0.5) / (2 * sigma ** 2))


def test_rotation_round_trip():
    from scipy import ndimage

    img = _smooth_blob(cx=45, cy=58)
    theta = np.degrees(np.pi / 16)
    there = ndimage.rotate(img, theta, reshape=False, order=1, mode="constant")
    back = ndimage.rotate(there, -theta, reshape=False, order=1, mode="constant")
    interior = (slice(20, 85), slice(20, 85))
    assert np.abs(back[interior] - img[interior]).mean() < 0.05


def _centroid_x(img):
    cols = np.arange(img.shape[1])
    return float((img.sum(axis=0) * cols).sum() / img.sum())


def test_shift_moves_centroid():
    img = _smooth_blob(sigma=8.0)
    base = ep.transform_image(img, 0.0, 0, 0)
    moved = ep.transform_image(img, 0.0, 10, 0)
    assert _centroid_x(moved) - _centroid_x(base) == pytest.approx(10 * 20 / 105, abs=0.05)


def test_augment_image_stays_in_range():
    img = (np.random.default_rng(4).random((105, 105)) < 0.2).astype(float)
    rng = np.random.default_rng(0)
    for _ in range(20):
        out = ep.augment_image(img, AugmentationSpec(), rng)
        assert out.shape == (20, 20) and out.min() >= 0 and out.max() <= 1


def test_augmentation_spec_bounds():
    spec = AugmentationSpec()
    assert spec.max_angle == pytest.approx(np.pi / 16) and spec.max_shift == 10


# ---------------------------------------------------------------------------
# loaders


def test_load_omniglot_fixture(tmp_path):
    root = write_omniglot_tree(tmp_path / "omni")
    lib = ep.load_omniglot(root)
    assert len(lib) == 3
    assert all(x.shape == (20, 20, 20) for x in lib.images)
    # ink is high after polarity normalisation
    assert all(0.0 <= x.min() and x.max() <= 1.0 and x.mean() < 0.5 for x in lib.images)


def test_load_omniglot_background_evaluation_layout(tmp_path):
    write_omniglot_tree(tmp_path / "images_background", seed=1)
    write_omniglot_tree(tmp_path / "images_evaluation", n_alphabets=1, chars=(1,), seed=2)
    lib = ep.load_omniglot(tmp_path, keep_native=True)
    assert len(lib) == 4
    assert lib.native[0].shape == (20, 105, 105) and lib.native[0].dtype == np.uint8


def test_load_omniglot_from_data_root(tmp_path):
    # data root holding omniglot/ next to the MNIST files
    write_omniglot_tree(tmp_path / "omniglot" / "images_background", seed=1)
    (tmp_path / "t10k-images-idx3-ubyte").write_bytes(b"")
    assert len(ep.load_omniglot(tmp_path)) == 3


def test_load_omniglot_short_class(tmp_path):
    root = write_omniglot_tree(tmp_path / "omni", short=(0, 1))
    with pytest.raises(DatasetError, match="character01"):
        ep.load_omniglot(root)


def test_load_omniglot_unreadable(tmp_path):
    root = write_omniglot_tree(tmp_path / "omni")
    (root / "alphabet0" / "character00" / "00.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="00.png"):
        ep.load_omniglot(root)


def test_load_mnist(mnist_files):
    img_path, lab_path, imgs, labels = mnist_files
    lib = ep.load_mnist_idx(img_path, lab_path)
    assert lib.ids == list(range(10))
    assert sum(len(x) for x in lib.images) == len(labels)
    first = np.flatnonzero(labels == 3)[0]
    np.testing.assert_allclose(lib.images[3][0], ep.downscale(imgs[first] / 255.0))


def test_mnist_bad_magic(tmp_path, mnist_files):
    img_path, lab_path, imgs, _ = mnist_files
    raw = bytearray(img_path.read_bytes())
    raw[:4] = raw[:4][::-1]
    bad = tmp_path / "swapped.idx"
    bad.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="magic"):
        ep.load_mnist_idx(bad, lab_path)


def test_mnist_count_mismatch(tmp_path, mnist_files):
    img_path, _, _, labels = mnist_files
    write_idx(tmp_path / "few.idx", labels[:-1], 2049)
    with pytest.raises(DatasetError, match="count"):
        ep.load_mnist_idx(img_path, tmp_path / "few.idx")


def test_mnist_truncated(tmp_path, mnist_files):
    img_path, lab_path, _, _ = mnist_files
    cut = tmp_path / "cut.idx"
    cut.write_bytes(img_path.read_bytes()[:-10])
    with pytest.raises(DatasetError, match="truncated"):
        ep.load_mnist_idx(cut, lab_path)


def test_minimnist(mnist_files):
    lib = ep.load_mnist_idx(*mnist_files[:2])
    mini = ep.make_minimnist(lib, 20, seed=3)
    assert len(mini) == 10 and all(len(x) == 20 for x in mini.images)
    again = ep.make_minimnist(lib, 20, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(mini.images, again.images))
    with pytest.raises(ValueError):
        ep.make_minimnist(lib, 0)
    with pytest.raises(ValueError):
        ep.make_minimnist(lib, 26)


def test_split_sizes_and_disjoint():
    lib = ep.synthetic_library(30, 2, noise=0.0, seed=0)
    train, test = ep.split_classes(lib, 21, seed=5)
    assert len(train) == 21 and len(test) == 9
    assert not set(train.ids) & set(test.ids)
    again, _ = ep.split_classes(lib, 21, seed=5)
    assert train.ids == again.ids
    for bad in (0, 30, 31):
        with pytest.raises(ValueError):
            ep.split_classes(lib, bad)


def test_omniglot_sized_split():
    lib = ep.ClassLibrary(list(range(1623)), [np.zeros((1, 20, 20))] * 1623)
    train, test = ep.split_classes(lib, 1209, seed=0)
    assert (len(train), len(test)) == (1209, 414)
    assert not set(train.ids) & set(test.ids)


def test_library_cache_round_trip(tmp_path):
    lib = ep.synthetic_library(4, 3, noise=0.2, seed=1)
    ep.save_library(tmp_path / "lib.bin", lib)
    raw = (tmp_path / "lib.bin").read_bytes()
    assert raw[:8] == b"FLMNLIB1" and struct.unpack("<I", raw[8:12])[0] == 4
    assert len(raw) == 12 + 4 * (8 + 3 * 400 * 4)
    back = ep.load_library(tmp_path / "lib.bin")
    assert back.ids == lib.ids
    for a, b in zip(lib.images, back.images):
        np.testing.assert_array_equal(b, a.astype(np.float32))
    (tmp_path / "cut.bin").write_bytes(raw[:-4])
    with pytest.raises(DatasetError):
        ep.load_library(tmp_path / "cut.bin")


# ---------------------------------------------------------------------------
# synthetic library


def test_synthetic_zero_noise_samples_identical():
    lib = ep.synthetic_library(3, 5, noise=0.0, seed=0)
    for imgs in lib.images:
        assert all(np.array_equal(imgs[0], x) for x in imgs)


def test_synthetic_deterministic():
    a, b = ep.synthetic_library(5, 4, seed=9), ep.synthetic_library(5, 4, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))


def test_synthetic_prototypes_far_apart():
    lib = ep.synthetic_library(25, 2, noise=0.0, seed=0)
    protos = [x[0].ravel() for x in lib.images]
    for i in range(25):
        for j in range(i):
            assert np.mean(protos[i] != protos[j]) >= 0.25


def test_synthetic_nearest_prototype_oracle():
    lib = ep.synthetic_library(25, 20, noise=0.1, seed=0)
    clean = ep.synthetic_library(25, 1, noise=0.0, seed=0)
    # same seed draws the same prototypes before any noise
    protos = np.stack([x[0].ravel() for x in clean.images])
    correct = 0
    for c, imgs in enumerate(lib.images):
        d = ((imgs.reshape(len(imgs), 1, -1) - protos[None]) ** 2).sum(-1)
        correct += int((d.argmin(1) == c).sum())
    assert correct == 25 * 20


# ---------------------------------------------------------------------------
# episodes


def test_episode_shape_and_offsets():
    lib = ep.synthetic_library(25, 20, seed=0)
    b = ep.make_episode_batch(lib, 5, 10, 3, seed=1)
    assert b.images.shape == (3, 50, 400) and b.offset_labels.shape == (3, 50, 5)
    assert (b.offset_labels[:, 0] == 0).all()
    onehot = np.eye(5)[b.targets]
    np.testing.assert_array_equal(b.offset_labels[:, 1:], onehot[:, :-1])


def test_episode_counts_and_instances():
    lib = ep.synthetic_library(25, 20, seed=0)
    b = ep.make_episode_batch(lib, 5, 10, 4, seed=2)
    for e in range(4):
        _, counts = np.unique(b.classes[e], return_counts=True)
        assert len(counts) == 5 and (counts == 10).all()
        for k in range(1, 11):
            assert (b.instance[e] == k).sum() == 5
        # label slots are a bijection of the chosen classes
        assert sorted(b.slots[e].tolist()) == list(range(5))


def test_episode_stream_is_batch_independent():
    lib = ep.synthetic_library(25, 20, seed=0)
    whole = ep.make_episode_batch(lib, 5, 10, 4, seed=7)
    tail = ep.make_episode_batch(lib, 5, 10, 2, seed=7, first_index=2)
    np.testing.assert_array_equal(whole.images[2:], tail.images)
    np.testing.assert_array_equal(whole.targets[2:], tail.targets)


def test_episode_errors():
    lib = ep.synthetic_library(4, 5, seed=0)
    with pytest.raises(ValueError):
        ep.make_episode_batch(lib, 5, 2, 1)
    with pytest.raises(ValueError):
        ep.make_episode_batch(lib, 3, 6, 1)


def test_label_slot_uniformity():
    lib = ep.synthetic_library(25, 20, seed=0)
    b = ep.make_episode_batch(lib, 5, 10, 1000, seed=11)
    slots = [int(b.slots[e][list(b.chosen[e]).index(0)]) for e in range(1000) if 0 in b.chosen[e]]
    counts = np.bincount(slots, minlength=5)
    assert stats.chisquare(counts).pvalue > 0.001


def test_augmented_episode_uses_native(tmp_path):
    root = write_omniglot_tree(tmp_path / "omni", chars=(3, 3))
    lib = ep.load_omniglot(root, keep_native=True)
    b = ep.make_episode_batch(lib, 5, 4, 2, augment=AugmentationSpec(), seed=0)
    plain = ep.make_episode_batch(lib, 5, 4, 2, seed=0)
    assert b.images.shape == plain.images.shape
    assert not np.array_equal(b.images, plain.images)
    assert b.images.min() >= 0 and b.images.max() <= 1
