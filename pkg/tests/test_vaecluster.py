import numpy as np
import pytest
from hypothesis import given, strategies as st

from sixvision import imgcode
from sixvision.addr import Address, parse_address
from sixvision.vaecluster import (InsufficientData, TooFewPoints, VaeKMeans, kmeans, latent_of, purity,
                                  reconstruct_proba, train_vae)


def test_memorises_one_image():
    img = imgcode.encode(parse_address("2804:30d0:200:200:100:116:0:b"))
    model = train_vae(np.repeat(img[None], 200, axis=0), epochs=30, seed=0)
    p = reconstruct_proba(model, img)
    agree = np.where(img == 1, p, 1 - p)
    assert agree.min() > 0.9


def test_vae_deterministic():
    imgs = imgcode.encode_many([Address(i * 7919) for i in range(20)])
    a = train_vae(imgs, epochs=2, seed=1)
    b = train_vae(imgs, epochs=2, seed=1)
    assert all(np.array_equal(x.detach().numpy(), y.detach().numpy())
               for x, y in zip(a.parameters(), b.parameters()))


def test_identical_images_identical_latents():
    imgs = imgcode.encode_many([Address(i) for i in range(4)])
    m = train_vae(imgs, epochs=1)
    assert np.array_equal(latent_of(m, imgs[0]), latent_of(m, imgs[0].copy()))


def test_vae_needs_two_images():
    with pytest.raises(InsufficientData):
        train_vae(imgcode.encode_many([Address(1)]), epochs=1)


def test_kmeans_blobs():
    rng = np.random.default_rng(0)
    centres = rng.normal(0, 50, size=(4, 5))
    truth = np.repeat(np.arange(4), 30)
    x = centres[truth] + rng.normal(0, 0.5, size=(120, 5))
    cl = kmeans(x, 4, seed=2)
    assert purity(cl.labels, truth) == 1.0
    hist = cl.inertia_history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_k1_and_too_few():
    x = np.random.default_rng(1).normal(size=(10, 3))
    assert set(kmeans(x, 1).labels) == {0}
    with pytest.raises(TooFewPoints):
        kmeans(x[:2], 3)


@given(st.integers(2, 6), st.integers(0, 1000))
def test_kmeans_no_empty_clusters(k, seed):
    x = np.random.default_rng(seed).normal(size=(3 * k, 2))
    x[: 2 * k] = 0.0  # many duplicates
    cl = kmeans(x, k, seed=seed)
    assert (cl.sizes > 0).all()
    assert len(cl.labels) == len(x)


def test_purity():
    assert purity([0, 0, 1, 1], ["a", "a", "b", "b"]) == 1.0
    assert purity([0, 0, 0, 0], ["a", "a", "b", "b"]) == 0.5


def test_estimator_api():
    addrs = [Address((i % 3) << 100 | i) for i in range(30)]
    est = VaeKMeans(n_clusters=3, vae_epochs=2, random_state=0).fit(addrs)
    assert est.labels_.shape == (30,)
    assert est.transform(addrs).shape == (30, est.latent_dim)
    assert np.array_equal(est.predict(addrs), est.labels_)
    assert est.get_params()["n_clusters"] == 3
