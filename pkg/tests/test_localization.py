import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from comprint.errors import DegenerateInputError, InputError
from comprint.localization import (N_ORBITS, PATTERN_TO_ORBIT, FeatureField,
                                   LocalizationConfig, cooccurrence_features,
                                   cooccurrence_histograms, em_segment,
                                   highpass_residual_provider, localize,
                                   normalize_fingerprint, posterior_to_heatmap, stack_features)
from oracles import all_orbits, brute_histogram, coverage_mean


def histogram_from_oracle(q, window, stride):
    orbits = all_orbits()
    rows = (q.shape[0] - window) // stride + 1
    cols = (q.shape[1] - window) // stride + 1
    out = np.zeros((rows, cols, len(orbits)))
    for r in range(rows):
        for c in range(cols):
            counts = brute_histogram(q, r * stride, c * stride, window)
            for key, v in counts.items():
                out[r, c, orbits.index(key)] = v
    return out / out.sum(axis=2, keepdims=True)


def canonical_order(hist):
    """Reorder the package's orbit axis to the oracle's sorted-orbit order."""
    import itertools
    orbits = all_orbits()
    perm = np.empty(len(orbits), dtype=int)
    for code, pattern in enumerate(itertools.product((-1, 0, 1), repeat=4)):
        p = tuple(pattern)
        key = min(p, p[::-1], tuple(-s for s in p), tuple(-s for s in p[::-1]))
        perm[orbits.index(key)] = PATTERN_TO_ORBIT[code]
    return hist[..., perm]


def hand_fields():
    """16x16 symbol layouts written out by hand (pattern rules, not random)."""
    i, j = np.mgrid[0:16, 0:16]
    yield np.zeros((16, 16))
    yield np.where((i + j) % 2 == 0, 1.0, -1.0)                 # checkerboard
    yield ((j % 3) - 1).astype(float)                             # ramps -1,0,1
    yield np.where(i < 8, 1.0, np.where(j < 8, -1.0, 0.0))       # quadrants
    yield np.sign(np.sin(i * 0.9) + np.cos(j * 1.3))             # mixed pattern


def test_orbit_count_frozen():
    assert N_ORBITS == 25 == len(all_orbits())
    assert set(PATTERN_TO_ORBIT.tolist()) == set(range(25))


@pytest.mark.parametrize("field", list(hand_fields()))
def test_histogram_matches_brute_force_hand_fixtures(field):
    ours = canonical_order(cooccurrence_histograms(field, 8, 8))
    assert np.array_equal(ours * 2 * 8 * 5, histogram_from_oracle(field, 8, 8) * 2 * 8 * 5)
    assert np.allclose(ours, histogram_from_oracle(field, 8, 8), rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_histogram_matches_brute_force_random_symbols(seed):
    rng = np.random.default_rng(seed)
    q = rng.integers(-1, 2, (20, 18)).astype(float)
    ours = canonical_order(cooccurrence_histograms(q, 9, 3))
    assert np.allclose(ours, histogram_from_oracle(q, 9, 3), rtol=0, atol=1e-15)


def test_constant_zero_field_is_one_hot():
    f = cooccurrence_features(np.zeros((32, 32)), window=16, stride=8)
    zero_orbit = PATTERN_TO_ORBIT[40]           # pattern 0000 in base-3 digits 1111
    assert np.all(f.features[..., zero_orbit] == 1.0)
    assert np.all(np.delete(f.features, zero_orbit, axis=2) == 0.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (24, 20), elements=st.floats(-4, 4)), st.integers(4, 20),
       st.integers(1, 6))
def test_window_sums_and_grid(fp, window, stride):
    hist = cooccurrence_histograms(fp, window, stride)
    assert hist.shape[:2] == ((24 - window) // stride + 1, (20 - window) // stride + 1)
    assert np.all(hist >= 0)
    assert np.all(np.abs(hist.sum(axis=2) - 1) < 1e-12)


def test_quantization_step_and_window_errors():
    fp = np.random.default_rng(0).standard_normal((32, 32))
    coarse = cooccurrence_histograms(fp, 16, 8, step=100.0)
    assert np.allclose(coarse[..., PATTERN_TO_ORBIT[40]], 1.0)
    with pytest.raises(InputError):
        cooccurrence_histograms(fp, 64, 8)
    with pytest.raises(InputError):
        cooccurrence_histograms(fp, 16, 8, t=2)


def test_normalize():
    fp = np.random.default_rng(1).normal(5, 3, (30, 30))
    n = normalize_fingerprint(fp)
    assert abs(n.mean()) < 1e-12 and abs(n.std() - 1) < 1e-12
    with pytest.raises(DegenerateInputError):
        normalize_fingerprint(np.full((8, 8), 2.0))
    with pytest.raises(DegenerateInputError):
        normalize_fingerprint(np.array([[1.0, np.inf]]))


def test_stacking_dimension_and_provenance():
    rng = np.random.default_rng(2)
    a = cooccurrence_features(rng.standard_normal((40, 40)), 16, 8, name="a")
    b = cooccurrence_features(rng.standard_normal((40, 40)), 16, 8, name="b")
    s = stack_features([a, b])
    assert s.dim == a.dim + b.dim == sum(s.dims)
    assert s.provenance == ["a", "b"]
    assert np.array_equal(s.features[..., :a.dim], a.features)
    c = cooccurrence_features(rng.standard_normal((40, 40)), 16, 4, name="c")
    with pytest.raises(InputError):
        stack_features([a, c])


def two_gaussians(rng, dim=4, n=200, sep=10.0):
    mu1 = rng.standard_normal(dim)
    direction = rng.standard_normal(dim)
    mu2 = mu1 + sep * direction / np.linalg.norm(direction)
    x = np.concatenate([rng.normal(mu1, 1.0, (n, dim)), rng.normal(mu2, 1.0, (n, dim))])
    labels = np.r_[np.zeros(n), np.ones(n)]
    return x, labels, mu1, mu2


def test_em_separated_clusters():
    rng = np.random.default_rng(3)
    x, labels, mu1, mu2 = two_gaussians(rng)
    model, post = em_segment(x)
    pred = post > 0.5
    agree = max(np.mean(pred == labels), np.mean(pred != labels))
    assert agree >= 0.99
    means = model.feature_means
    if np.linalg.norm(means[0] - mu1) > np.linalg.norm(means[1] - mu1):
        means = means[::-1]
    # sampling error of a 200-point mean is ~0.07 sigma per coordinate
    assert np.all(np.abs(means[0] - mu1) < 0.2) and np.all(np.abs(means[1] - mu2) < 0.2)
    assert np.all((model.weights > 0) & (model.weights < 1))
    assert abs(model.weights.sum() - 1) < 1e-12


def test_em_trace_monotone_from_random_starts():
    rng = np.random.default_rng(4)
    x, *_ = two_gaussians(rng, dim=3, sep=3.0)
    for _ in range(20):
        model, _ = em_segment(x, init=rng.dirichlet([1, 1], size=len(x)))
        assert np.all(np.diff(model.loglik_trace) >= -1e-9)


def test_em_identical_features_uniform_posterior():
    x = np.tile(np.array([0.3, 0.1, 0.7]), (100, 1))
    model, post = em_segment(x)
    assert np.allclose(model.weights, 0.5)
    assert np.allclose(model.means[0], model.means[1])
    assert np.allclose(post, 0.5)


def test_em_tight_duplicated_cluster():
    rng = np.random.default_rng(5)
    base = rng.normal(2.0, 1e-6, (100, 3))
    model, post = em_segment(np.concatenate([base, base]))
    assert np.all(np.abs(model.weights - 0.5) < 0.1)
    means = model.feature_means
    assert np.max(np.abs(means[0] - means[1])) < 1e-5
    assert np.all(np.isfinite(post))


def test_em_needs_enough_cells():
    with pytest.raises(InputError):
        em_segment(np.random.default_rng(0).standard_normal((10, 25)))


def test_heatmap_uniform_posterior():
    hm = posterior_to_heatmap(np.full((3, 4), 0.7), 16, 8, (37, 45))
    assert hm.shape == (37, 45) and np.allclose(hm, 0.7)


def test_heatmap_nonoverlapping_blocks():
    post = np.arange(6, dtype=float).reshape(2, 3) / 10
    hm = posterior_to_heatmap(post, 4, 4, (8, 12))
    assert np.array_equal(hm, np.kron(post, np.ones((4, 4))))


def test_heatmap_overlap_matches_coverage_oracle():
    post = np.array([[0.1, 0.9, 0.3], [0.4, 0.2, 0.8], [0.6, 0.5, 0.0]])
    acc, cnt = coverage_mean(post, 6, 2, (10, 11))
    hm = posterior_to_heatmap(post, 6, 2, (10, 11))
    covered = cnt > 0
    assert np.allclose(hm[covered], acc[covered] / cnt[covered], rtol=0, atol=1e-12)
    # the uncovered last column copies its neighbour
    assert not covered[:, 10].any()
    assert np.array_equal(hm[:, 10], hm[:, 9])


def test_heatmap_flip_and_errors():
    post = np.random.default_rng(6).random((3, 3))
    a = posterior_to_heatmap(post, 4, 2, (8, 8))
    b = posterior_to_heatmap(post, 4, 2, (8, 8), flip=True)
    assert np.allclose(a + b, 1.0)
    with pytest.raises(InputError):
        posterior_to_heatmap(post, 4, 2, (20, 20))


def test_highpass_provider():
    img = np.tile(np.arange(10.0) ** 2, (5, 1))          # quadratic rows
    r = highpass_residual_provider(img)
    assert r.shape == img.shape and np.allclose(r, 0)


def test_localize_highpass_splice_and_fusion_dims():
    from comprint.fixtures import make_splice, texture
    from comprint.jpeg_sim import qf_to_table
    rng = np.random.default_rng(7)
    fx = make_splice(texture(rng, 256), qf_to_table(30), qf_to_table(90), rng)
    opts = LocalizationConfig()
    hm = localize(fx.fake, [("highpass", highpass_residual_provider)], opts)
    assert hm.scores.shape == fx.fake.shape and np.all(np.isfinite(hm.scores))
    assert hm.provenance == ["highpass"]
    # the minority component maps to high scores
    assert hm.em.weights[1 if not hm.flipped else 0] <= 0.5 + 1e-12
    fused = localize(fx.fake, [("a", highpass_residual_provider),
                               ("b", lambda im: highpass_residual_provider(im.T).T)], opts)
    assert fused.provenance == ["a", "b"]


def test_localize_errors_name_the_stage():
    with pytest.raises(InputError):
        localize(np.zeros((64, 64)), [], LocalizationConfig())
    with pytest.raises(DegenerateInputError, match=r"\[normalize:flat\]"):
        localize(np.zeros((200, 200)), [("flat", lambda im: np.zeros_like(im))])
    with pytest.raises(InputError, match="window"):
        localize(np.random.default_rng(0).random((100, 100)),
                 [("hp", highpass_residual_provider)])


def test_feature_field_type():
    f = cooccurrence_features(np.random.default_rng(8).standard_normal((40, 48)), 16, 8)
    assert isinstance(f, FeatureField)
    assert f.grid == (4, 5) and f.dim == 25 and f.window == 16 and f.stride == 8
