import numpy as np
import pytest

from splitmask.data import LabeledDataset, patchify, synth_generate
from splitmask.errors import CapacityError
from splitmask.numerics import DimensionError
from splitmask.tokenizer import (
    Vocabulary,
    build_kmeans,
    build_random_patches,
    build_random_projection,
    build_vocabulary,
    kmeans,
    kmeans_plus_plus,
    load_vocabulary,
    sample_patch_positions,
    save_vocabulary,
    tokenize,
    tokenize_image,
    tokenize_patches,
)


def naive_token(patch, vectors):
    best, best_score = 0, -np.inf
    for i, e in enumerate(vectors.astype(np.float64)):
        score = sum(float(a) * float(b) for a, b in zip(patch, e))
        if score > best_score:
            best, best_score = i, score
    return best


def plain_lloyd(x, centers, iters):
    """Textbook Lloyd loop, one point at a time; returns final objective."""
    c = centers.copy()
    for _ in range(iters):
        assign = [int(np.argmin([((p - cj) ** 2).sum() for cj in c])) for p in x]
        for j in range(len(c)):
            members = [x[i] for i in range(len(x)) if assign[i] == j]
            if members:
                c[j] = np.mean(members, axis=0)
    assign = [int(np.argmin([((p - cj) ** 2).sum() for cj in c])) for p in x]
    return sum(((x[i] - c[assign[i]]) ** 2).sum() for i in range(len(x)))


def tiny_dataset(n_images=2, size=8, seed=0):
    px = np.random.default_rng(seed).random((n_images, 3, size, size)).astype(np.float32)
    return LabeledDataset([(i, 0) for i in range(n_images)], 1, pixels=px)


# --- random projection ------------------------------------------------------


def test_random_projection_unit_rows_at_full_size():
    vocab = build_random_projection(8192, 192, seed=0)
    assert vocab.vectors.shape == (8192, 192)
    np.testing.assert_allclose(np.linalg.norm(vocab.vectors, axis=1), 1.0, atol=1e-5)


def test_random_projection_seeded():
    a, b, c = (build_random_projection(64, 48, s) for s in (1, 1, 2))
    np.testing.assert_array_equal(a.vectors, b.vectors)
    cos = a.vectors.astype(np.float64) @ c.vectors.T.astype(np.float64)
    assert cos.max(axis=1).max() < 0.999


# --- random patches ---------------------------------------------------------


def test_random_patches_exactly_v_distinct():
    ds = tiny_dataset(2, 8)  # 2 images x 4 patches of 4x4
    vocab = build_random_patches(ds, 8, 4, seed=3)
    expected = patchify(ds.image(0), 4).patches.tolist() + patchify(ds.image(1), 4).patches.tolist()
    expected = np.array(expected)
    expected /= np.linalg.norm(expected, axis=1, keepdims=True)
    got = sorted(map(tuple, np.round(vocab.vectors, 5)))
    assert got == sorted(map(tuple, np.round(expected.astype(np.float32), 5)))


def test_random_patches_reject_duplicates():
    px = np.zeros((3, 3, 8, 8), dtype=np.float32)
    px[0] = 0.5  # four identical patches
    px[1, :, :4, :4] = 0.2  # one distinct patch plus three zeros
    px[2] = np.random.default_rng(0).random((3, 8, 8))
    ds = LabeledDataset([(i, 0) for i in range(3)], 1, pixels=px)
    vocab = build_random_patches(ds, 5, 4, seed=0)
    assert len(np.unique(vocab.vectors, axis=0)) == 5
    with pytest.raises(CapacityError):
        build_random_patches(ds, 8, 4, seed=0)


def test_random_patches_capacity():
    with pytest.raises(CapacityError):
        build_random_patches(tiny_dataset(1, 8), 5, 4)


def test_patch_positions_uniform_chi_square():
    rng = np.random.default_rng(0)
    counts = np.zeros((10, 16))
    for _ in range(1000):
        img, pos = sample_patch_positions(10, 16, 100, rng)
        assert len(set(zip(img.tolist(), pos.tolist()))) == 100
        np.add.at(counts, (img, pos), 1)
    # 1e5 draws over 160 cells; each cell ~ Binomial(1000, 100/160)
    expected = 1000 * 100 / 160
    sigma = np.sqrt(1000 * (100 / 160) * (60 / 160))
    assert np.abs(counts - expected).max() < 4 * sigma
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 159 + 4 * np.sqrt(2 * 159)


# --- k-means -----------------------------------------------------------------


def test_kmeans_objective_never_increases():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((300, 5)) + rng.integers(0, 4, (300, 1))
        res = kmeans(x, 6, iters=30, tol=0.0, rng=rng)
        assert all(b <= a + 1e-9 * abs(a) for a, b in zip(res.history, res.history[1:]))


def test_kmeans_exact_recovery():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((8, 12)) * 10
    res = kmeans(pts, 8, rng=rng)
    assert res.objective == pytest.approx(0.0, abs=1e-18)
    assert sorted(map(tuple, res.centroids)) == sorted(map(tuple, pts))


def test_build_kmeans_recovers_well_separated_points():
    base = np.random.default_rng(1).random((6, 3, 2, 2)).astype(np.float32)
    px = np.repeat(base, 5, axis=0)  # every distinct 2x2 image appears five times
    ds = LabeledDataset([(i, 0) for i in range(30)], 1, pixels=px)
    vocab = build_kmeans(ds, 6, 2, sample_budget=30, seed=0)
    expected = base.reshape(6, -1) / np.linalg.norm(base.reshape(6, -1), axis=1, keepdims=True)
    got = np.sort(vocab.vectors, axis=0)
    np.testing.assert_allclose(got, np.sort(expected, axis=0), atol=1e-6)


def test_kmeans_matches_plain_lloyd_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((200, 2))
    init = kmeans_plus_plus(x, 4, np.random.default_rng(9))
    ours = kmeans(x, 4, iters=10, tol=0.0, init=init)
    assert abs(ours.objective - plain_lloyd(x, init, 10)) < 1e-6


def test_kmeans_budget_below_v():
    with pytest.raises(CapacityError):
        build_kmeans(tiny_dataset(), 16, 4, sample_budget=8)


def test_kmeans_vocabulary_invariants():
    train, _ = synth_generate(0, 32, 0)
    vocab = build_vocabulary("kmeans", train, 32, 8, seed=0, sample_budget=400, iters=5)
    np.testing.assert_allclose(np.linalg.norm(vocab.vectors, axis=1), 1.0, atol=1e-5)
    assert len(np.unique(vocab.vectors, axis=0)) == 32
    again = build_vocabulary("kmeans", train, 32, 8, seed=0, sample_budget=400, iters=5)
    np.testing.assert_array_equal(vocab.vectors, again.vectors)


# --- tokenization ------------------------------------------------------------------


def test_tokenize_orthonormal_identity():
    vocab = Vocabulary(np.eye(6, dtype=np.float32), "random_projection", 0)
    assert tokenize(np.eye(6)[3], vocab) == 3


def test_tokenize_matches_naive_oracle_and_scaling():
    rng = np.random.default_rng(0)
    vocab = build_random_projection(64, 48, seed=5)
    patches = rng.random((1000, 48))
    fast = tokenize_patches(patches, vocab)
    for p, t in zip(patches, fast):
        assert t == naive_token(p, vocab.vectors)
    scales = rng.uniform(0.01, 100, size=(1000, 1))
    np.testing.assert_array_equal(tokenize_patches(patches * scales, vocab), fast)


def test_tokenize_ties_pick_smallest_index_and_zero_patch():
    vocab = Vocabulary(np.array([[1, 0], [0, 1], [1, 0.0]]) * [[1], [1], [-1]], "kmeans", 0)
    assert tokenize(np.array([1.0, 1.0]), vocab) == 0
    assert tokenize(np.zeros(2), vocab) == 0


def test_tokenize_dimension_mismatch():
    vocab = build_random_projection(4, 12, 0)
    with pytest.raises(DimensionError):
        tokenize(np.ones(10), vocab)


def test_vocabulary_rows_tokenize_to_themselves():
    vocab = build_random_projection(50, 12, 3)
    np.testing.assert_array_equal(tokenize_patches(vocab.vectors, vocab), np.arange(50))


def test_tokenize_image_shape_constant_and_oracle():
    vocab = build_random_projection(32, 192, 0)
    const = np.full((3, 32, 32), 0.3, dtype=np.float32)
    toks = tokenize_image(const, vocab, 8)
    assert toks.shape == (16,) and len(set(toks.tolist())) == 1
    rng = np.random.default_rng(1)
    for _ in range(100):
        img = rng.random((3, 32, 32)).astype(np.float32)
        expected = [tokenize(p, vocab) for p in patchify(img, 8).patches]
        assert tokenize_image(img, vocab, 8).tolist() == expected


# --- file format -----------------------------------------------------------------


@pytest.mark.parametrize("center", [False, True])
def test_vocabulary_file_round_trip(tmp_path, center):
    vocab = build_random_projection(20, 12, seed=2**40 + 7)
    vocab = Vocabulary(vocab.vectors, "random_patches", vocab.seed, center)
    path = save_vocabulary(vocab, tmp_path / "v.pvoc")
    back = load_vocabulary(path)
    assert back.vectors.tobytes() == vocab.vectors.tobytes()
    assert (back.kind, back.seed, back.center) == ("random_patches", 2**40 + 7, center)
    assert save_vocabulary(back, tmp_path / "w.pvoc").read_bytes() == path.read_bytes()


def test_vocabulary_file_rejects_garbage(tmp_path):
    (tmp_path / "bad.pvoc").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        load_vocabulary(tmp_path / "bad.pvoc")
