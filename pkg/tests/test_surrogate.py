import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ucbs.dataset import AuxiliaryDataset, ValidationScenario, build_auxiliary_dataset
from ucbs.errors import FormatVersionError, TrainingDivergedError
from ucbs.segmentation import Image, extract_superpixel_images, slic_segment
from ucbs.surrogate import (
    Classifier,
    SmallCNN,
    TrainingConfig,
    adapt_to_binary,
    embed,
    evaluate_validation,
    fine_tune,
    head_loss_and_grad,
    load_checkpoint,
    make_base_model,
    predict_logits,
    save_checkpoint,
    state_checksum,
)
from ucbs.synthetic import make_shapes

SIZE = 16


@pytest.fixture(scope="module")
def small_aux():
    target = [im for im, _ in make_shapes(24, "disc", size=SIZE, seed=0)]
    other = [im for im, _ in make_shapes(30, "square", size=SIZE, seed=0)]
    return build_auxiliary_dataset(target, other, m=4, k=6, n_ood=16, seed=0)


@pytest.fixture(scope="module")
def base():
    return make_base_model(10, 3, SIZE, seed=0)


def test_binary_head_shape(base, rng):
    sur = adapt_to_binary(base, "disc", seed=0)
    assert base.class_count == 10 and sur.class_count == 2 and sur.target == 1
    z = predict_logits(sur, Image(rng.random((SIZE, SIZE, 3)), "x"))
    assert z.shape == (2,)


def test_adaptation_determinism_and_backbone_copy(base):
    a = adapt_to_binary(base, "disc", seed=4)
    b = adapt_to_binary(base, "disc", seed=4)
    c = adapt_to_binary(base, "square", seed=5)
    assert state_checksum(a.net) == state_checksum(b.net)
    assert state_checksum(a.net, "head.") == state_checksum(c.net, "head.") == state_checksum(base.net, "head.")
    assert not torch.equal(a.net.head.weight, c.net.head.weight)
    c.net.blocks[0][0].weight.data.zero_()
    assert state_checksum(a.net, "head.") == state_checksum(base.net, "head.")


def test_predict_and_embed_contracts(base, rng):
    sur = adapt_to_binary(base, "disc")
    img = Image(rng.random((SIZE, SIZE, 3)), "x")
    assert np.array_equal(predict_logits(sur, img), predict_logits(sur, img))
    assert np.array_equal(embed(sur, img), embed(sur, img))
    z0 = predict_logits(sur, Image(np.zeros((SIZE, SIZE, 3)), "z0"))
    z1 = predict_logits(sur, Image(np.zeros((SIZE, SIZE, 3)), "z1"))
    assert np.array_equal(z0, z1)
    e0 = embed(sur, Image(np.zeros((SIZE, SIZE, 3)), "z0"))
    assert np.array_equal(e0, embed(sur, Image(np.zeros((SIZE, SIZE, 3)), "z2")))
    assert np.all(np.isfinite(z0))


def test_batched_matches_sequential(base, rng):
    sur = adapt_to_binary(base, "disc")
    batch = rng.random((8, SIZE, SIZE, 3)).astype(np.float32)
    together = sur.logits(batch)
    single = np.stack([predict_logits(sur, Image(b, "b")) for b in batch])
    np.testing.assert_allclose(together, single, atol=1e-5, rtol=0)


@pytest.mark.parametrize("size", [8, 16, 37, 64])
def test_embedding_width(size, rng):
    m = make_base_model(10, 3, size, seed=1)
    e = embed(m, Image(rng.random((size, size, 3)), "x"))
    assert e.shape == (m.net.feature_dim,)


def test_dimension_mismatch(base, rng):
    with pytest.raises(ValueError):
        predict_logits(base, Image(rng.random((SIZE + 1, SIZE, 3)), "x"))


class _Fixed:
    target = 1

    def __init__(self, fn):
        self.fn = fn

    def logits(self, images):
        return np.stack([self.fn(i) for i in range(len(images))])


def _scenario(n_pos, n_neg, kind="val_equal"):
    pos = [Image(np.zeros((8, 8, 3)), f"p{i}") for i in range(n_pos)]
    neg = [Image(np.zeros((8, 8, 3)), f"n{i}") for i in range(n_neg)]
    return ValidationScenario(kind, pos, neg)


def test_evaluate_validation_degenerate_and_random():
    always = _Fixed(lambda i: np.array([0.0, 1e6]))
    rep = evaluate_validation(always, _scenario(20, 0, "val_pure"))
    assert rep.accuracy == 1.0
    assert evaluate_validation(always, _scenario(20, 80, "val_1000")).accuracy == pytest.approx(0.2)
    r = np.random.default_rng(0)
    noise = _Fixed(lambda i: r.normal(size=2))
    acc = evaluate_validation(noise, _scenario(100, 100)).accuracy
    assert abs(acc - 0.5) <= 0.1
    with pytest.raises(ValueError):
        evaluate_validation(always, _scenario(0, 0))


def test_head_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(7, 5))
    labels = rng.integers(0, 2, size=7)
    eps = 1e-6
    for _ in range(50):
        W = rng.normal(size=(2, 5))
        b = rng.normal(size=2)
        _, dW, db = head_loss_and_grad(feats, labels, W, b)
        num_W = np.zeros_like(W)
        for idx in np.ndindex(*W.shape):
            Wp, Wm = W.copy(), W.copy()
            Wp[idx] += eps
            Wm[idx] -= eps
            num_W[idx] = (head_loss_and_grad(feats, labels, Wp, b)[0]
                          - head_loss_and_grad(feats, labels, Wm, b)[0]) / (2 * eps)
        num_b = np.zeros_like(b)
        for i in range(2):
            bp, bm = b.copy(), b.copy()
            bp[i] += eps
            bm[i] -= eps
            num_b[i] = (head_loss_and_grad(feats, labels, W, bp)[0]
                        - head_loss_and_grad(feats, labels, W, bm)[0]) / (2 * eps)
        analytic = np.concatenate([dW.ravel(), db])
        numeric = np.concatenate([num_W.ravel(), num_b])
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
        assert rel.max() < 1e-4


def test_head_gradient_matches_autograd():
    rng = np.random.default_rng(1)
    feats, labels = rng.normal(size=(6, 4)), rng.integers(0, 2, size=6)
    W, b = rng.normal(size=(2, 4)), rng.normal(size=2)
    tw = torch.tensor(W, requires_grad=True)
    tb = torch.tensor(b, requires_grad=True)
    F.cross_entropy(torch.tensor(feats) @ tw.T + tb, torch.tensor(labels)).backward()
    _, dW, db = head_loss_and_grad(feats, labels, W, b)
    np.testing.assert_allclose(dW, tw.grad.numpy(), atol=1e-12)
    np.testing.assert_allclose(db, tb.grad.numpy(), atol=1e-12)


def receptive_field_zero(x):
    """True where a 3x3 conv (pad 1) followed by 2x2 max-pool sees only zero input."""
    mass = x.abs().sum(dim=1, keepdim=True)
    support = F.conv2d(mass, torch.ones(1, 1, 3, 3), padding=1)
    return F.max_pool2d(support, 2, ceil_mode=True)[:, 0] == 0


def test_masked_regions_stay_zero_in_first_block(rng):
    net = SmallCNN(2, 3)
    assert net.blocks[0][0].bias is None
    img = Image(rng.random((32, 32, 3)).astype(np.float32), "r")
    mask = slic_segment(img, 16)
    sp = extract_superpixel_images(img, mask)[3]
    x = torch.from_numpy(sp.pixels).permute(2, 0, 1)[None]
    with torch.no_grad():
        act = net.blocks[0](x)
    zero = receptive_field_zero(x)
    assert zero.any() and (~zero).any()
    assert torch.all(act[:, :, zero[0]] == 0)


def _plain_trainer(net, images, epochs, lr, batch_size, seed):
    """Reference: shuffle, equal chunks, mean cross-entropy, SGD with momentum."""
    x = torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2)
    y = torch.ones(len(images), dtype=torch.long)
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=0.9)
    rng = np.random.default_rng(seed)
    n_batches = math.ceil(len(images) / batch_size)
    history = []
    for _ in range(epochs):
        net.train()
        losses = []
        for chunk in np.array_split(rng.permutation(len(images)), n_batches):
            idx = torch.from_numpy(chunk)
            loss = F.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history


def test_zero_lambdas_reduce_to_plain_training(base, small_aux):
    sur = adapt_to_binary(base, "disc", seed=0)
    cfg = TrainingConfig(lambda1=0, lambda2=0, epochs=3, learning_rate=0.05, batch_size=8, seed=9)
    trained, log = fine_tune(sur, small_aux, cfg)
    ref_net = adapt_to_binary(base, "disc", seed=0).net
    history = _plain_trainer(ref_net, [im.pixels for im in small_aux.originals], 3, 0.05, 8, 9)
    for entry, ref in zip(log.epochs, history):
        assert entry["total"] == pytest.approx(ref, abs=1e-6)
        assert entry["terms"]["superpixels"] is None and entry["terms"]["ood"] is None
    for (n1, p1), (n2, p2) in zip(trained.net.state_dict().items(), ref_net.state_dict().items()):
        assert torch.allclose(p1, p2, atol=1e-6), n1


def test_loss_decomposition_every_epoch(base, small_aux):
    sur = adapt_to_binary(base, "disc", seed=0)
    cfg = TrainingConfig(lambda1=0.7, lambda2=1.3, epochs=3, learning_rate=0.02, batch_size=10, seed=1)
    _, log = fine_tune(sur, small_aux, cfg)
    for e in log.epochs:
        t = e["terms"]
        assert e["total"] == pytest.approx(t["originals"] + 0.7 * t["superpixels"] + 1.3 * t["ood"], abs=1e-6)
    init = log.initial_objective
    assert init["total"] == pytest.approx(
        init["originals"] + 0.7 * init["superpixels"] + 1.3 * init["ood"], abs=1e-12)


def test_fine_tune_does_not_mutate_input(base, small_aux):
    sur = adapt_to_binary(base, "disc", seed=0)
    before = state_checksum(sur.net)
    fine_tune(sur, small_aux, TrainingConfig(epochs=1, batch_size=16))
    assert state_checksum(sur.net) == before


def test_fine_tune_is_deterministic(base, small_aux):
    sur = adapt_to_binary(base, "disc", seed=0)
    cfg = TrainingConfig(epochs=2, batch_size=16, seed=3)
    a, la = fine_tune(sur, small_aux, cfg)
    b, lb = fine_tune(sur, small_aux, cfg)
    assert state_checksum(a.net) == state_checksum(b.net)
    assert la.epochs == lb.epochs


def test_empty_part_with_weight_rejected(base, small_aux):
    data = AuxiliaryDataset("disc", small_aux.originals, [], small_aux.ood_samples)
    with pytest.raises(ValueError):
        fine_tune(adapt_to_binary(base, "disc"), data, TrainingConfig(lambda1=1.0, epochs=1))
    fine_tune(adapt_to_binary(base, "disc"), data, TrainingConfig(lambda1=0.0, epochs=1, batch_size=16))


def test_divergence_reports_epoch(base, small_aux):
    bad = Image(np.full((SIZE, SIZE, 3), np.nan, dtype=np.float32), "nan", class_label="disc")
    data = AuxiliaryDataset("disc", [bad] + small_aux.originals[:3], [], small_aux.ood_samples)
    with pytest.raises(TrainingDivergedError) as info:
        fine_tune(adapt_to_binary(base, "disc"), data, TrainingConfig(lambda1=0, epochs=2))
    assert info.value.epoch == 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=0)


def test_checkpoint_roundtrip_bit_exact(tmp_path, base, small_aux, rng):
    trained, _ = fine_tune(adapt_to_binary(base, "disc", seed=2), small_aux,
                           TrainingConfig(epochs=1, batch_size=16))
    save_checkpoint(trained, tmp_path / "c.pt")
    back = load_checkpoint(tmp_path / "c.pt")
    batch = rng.random((5, SIZE, SIZE, 3)).astype(np.float32)
    assert np.array_equal(trained.logits(batch), back.logits(batch))
    assert back.target_class == "disc" and back.target == 1 and back.seed == 2


def test_checkpoint_version_mismatch(tmp_path, base):
    save_checkpoint(base, tmp_path / "c.pt")
    blob = torch.load(tmp_path / "c.pt", weights_only=True)
    blob["version"] = 42
    torch.save(blob, tmp_path / "c.pt")
    with pytest.raises(FormatVersionError):
        load_checkpoint(tmp_path / "c.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(FormatVersionError):
        load_checkpoint(tmp_path / "junk.pt")
