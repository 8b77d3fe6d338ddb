import numpy as np
import pytest

from metaprune import functional as F
from metaprune.config import TrainConfig
from metaprune.data import synth_blobs
from metaprune.netdef import Axis, LayerSpec, NetworkTemplate, build_chain, decode_ratios, get_template, resolve_channels, sample_gene
from metaprune.network import forward
from metaprune.pruningnet import (
    PruningNet,
    TrainingDiverged,
    cropped_bn_states,
    forward_loss,
    generate_weights,
    generated_full,
    make_direct_variant,
    train_meta,
    write_metrics_csv,
)
from metaprune.tensor import Tensor, no_grad

from conftest import grad_error, numeric_grad


def two_conv_template(hw=6, classes=3):
    axes = (Axis("a0", 16), Axis("a1", 32))
    layers = (
        LayerSpec("c0", "conv", 16, kernel=(3, 3), pad=1, in_axis=None, out_axis=0),
        LayerSpec("c1", "conv", 32, kernel=(3, 3), pad=1, in_axis=0, out_axis=1),
        LayerSpec("fc", "linear", classes, in_axis=1, out_axis=None, relu=False),
    )
    return NetworkTemplate("two-conv", (3, hw, hw), classes, axes, layers)


def test_crop_shape_example():
    t = two_conv_template()
    pn = PruningNet(t, seed=0)
    w = generate_weights(pn, t, (4, 8))
    assert w["c1.weight"].shape == (8, 4, 3, 3)
    assert w["c0.weight"].shape == (4, 3, 3, 3)
    assert w["fc.weight"].shape == (8, 3)
    assert w["c1.gamma"].shape == (8,)


@pytest.mark.parametrize("name", ["chain-small", "stage-small"])
def test_full_gene_no_truncation(name):
    t = get_template(name)
    pn = PruningNet(t, seed=1)
    with no_grad():
        w = generate_weights(pn, t, t.full_gene())
    full = generated_full(pn, t, t.full_gene())
    for layer in t.layers[:-1]:
        np.testing.assert_array_equal(w[f"{layer.name}.weight"].data, full[layer.name])


@pytest.mark.parametrize("name", ["chain-small", "stage-small"])
def test_crop_consistency(name):
    t = get_template(name)
    pn = PruningNet(t, seed=2)
    rng = np.random.default_rng(0)
    for _ in range(10):
        gene = sample_gene(t, rng)
        with no_grad():
            w = generate_weights(pn, t, gene)
        full = generated_full(pn, t, gene)
        for i, layer in enumerate(t.layers[:-1]):
            cin, cout = resolve_channels(t, gene)[i]
            block = full[layer.name][:cout] if layer.kind == "depthwise" else full[layer.name][:cout, :cin]
            np.testing.assert_array_equal(w[f"{layer.name}.weight"].data, block)


def test_weights_depend_on_encoding():
    t = get_template("chain-small")
    pn = PruningNet(t, seed=3)
    a = list(t.full_gene())
    b = list(a)
    b[2] = 20  # axis of block 2: changes b2.pw output and b3 input
    full_a, full_b = generated_full(pn, t, a), generated_full(pn, t, b)
    assert not np.array_equal(full_a["b2.pw"], full_b["b2.pw"])


def test_direct_mode_shares_overlap():
    t = get_template("chain-small")
    pn = make_direct_variant(t, seed=4)
    a = list(t.full_gene())
    b = list(a)
    b[2] = 20
    with no_grad():
        wa, wb = generate_weights(pn, t, a), generate_weights(pn, t, b)
    np.testing.assert_array_equal(wa["b3.pw.weight"].data[:, :20], wb["b3.pw.weight"].data)


def test_direct_and_predict_shapes_match():
    t = get_template("stage-small")
    pp, pd = PruningNet(t, seed=0), make_direct_variant(t, seed=0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        gene = sample_gene(t, rng)
        with no_grad():
            wp, wd = generate_weights(pp, t, gene), generate_weights(pd, t, gene)
        assert {k: v.shape for k, v in wp.items()} == {k: v.shape for k, v in wd.items()}


def test_generation_is_pure():
    t = get_template("stage-small")
    pn = PruningNet(t, seed=5)
    gene = sample_gene(t, np.random.default_rng(2))
    with no_grad():
        a = generate_weights(pn, t, gene)
        b = generate_weights(pn, t, gene)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)


def test_init_scale_is_kaiming_like():
    t = get_template("chain-small")
    pn = PruningNet(t, seed=6)
    full = generated_full(pn, t, t.full_gene())
    for i in t.generated_layers():
        layer = t.layers[i]
        w = full[layer.name]
        target = np.sqrt(2.0 / np.prod(w.shape[1:]))
        assert 0.5 * target < w.std() < 1.5 * target


def test_template_mismatch():
    pn = PruningNet(get_template("chain-small"))
    with pytest.raises(ValueError):
        generate_weights(pn, get_template("stage-small"), get_template("stage-small").full_gene())


def test_loss_finite_at_init():
    t = get_template("stage-small")
    pn = PruningNet(t, seed=7)
    ds = synth_blobs(10, 2, (3, 32, 32), seed=0)
    rng = np.random.default_rng(3)
    for _ in range(100):
        with no_grad():
            loss, _ = forward_loss(pn, t, sample_gene(t, rng), ds.images[:4], ds.labels[:4])
        assert np.isfinite(loss.item())


def test_fc2_gradient_finite_differences():
    t = two_conv_template(hw=4)
    pn = PruningNet(t, hidden=6, seed=8)
    rng = np.random.default_rng(4)
    x, y = rng.uniform(0, 1, (5, 3, 4, 4)), rng.integers(0, 3, 5)
    gene = (5, 9)
    loss, _ = forward_loss(pn, t, gene, x, y)
    loss.backward()
    names = ["c1.fc2.weight", "c1.fc2.bias", "c0.fc1.weight"]

    def f():
        with no_grad():
            weights = generate_weights(pn, t, gene)
            logits = forward(t, weights, None, Tensor(x), training=True)
            return F.softmax_cross_entropy(logits, y)[0].item()

    # spot-check a slice of each parameter to keep the test fast
    for name in names:
        p = pn.params[name]
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(40, flat.size), replace=False)
        sub = flat[idx].copy()

        def g():
            flat[idx] = sub
            return f()

        numeric = numeric_grad(g, [sub])[0]
        flat[idx] = sub
        assert grad_error(p.grad.reshape(-1)[idx], numeric) < 1e-4


def test_crop_region_gets_zero_gradient():
    t = two_conv_template(hw=4)
    pn = PruningNet(t, hidden=6, seed=9)
    rng = np.random.default_rng(5)
    full = pn.full_weight("c1", decode_ratios(t, (5, 9))["c1"])
    c = F.crop(full, 9, 5)
    F.sum_all(c * Tensor(rng.standard_normal(c.shape))).backward()
    # the fc2 bias gradient is the gradient w.r.t. the flat generated weight
    g = pn.params["c1.fc2.bias"].grad.reshape(32, 16, 3, 3)
    assert np.all(g[9:] == 0) and np.all(g[:, 5:] == 0)
    assert np.any(g[:9, :5] != 0)


def test_meta_training_reduces_loss():
    t = build_chain("chain3", (3, 8, 8), 4, stem=(16, 1), blocks=[(24, 2), (32, 1)])
    ds = synth_blobs(4, 100, (3, 8, 8), seed=1, noise=0.3)
    pn = PruningNet(t, seed=0)
    pn, log = train_meta(pn, t, ds, TrainConfig(epochs=5, batch_size=32))
    assert len(log) == 5
    assert log[-1].mean_loss < log[0].mean_loss


def test_zero_epochs_is_noop():
    t = get_template("chain-small")
    pn = PruningNet(t, seed=0)
    before = pn.checksum()
    ds = synth_blobs(10, 2, (3, 32, 32))
    _, log = train_meta(pn, t, ds, TrainConfig(epochs=0))
    assert log == [] and pn.checksum() == before


def test_training_deterministic(tmp_path):
    t = build_chain("chain3", (3, 8, 8), 4, stem=(8, 1), blocks=[(12, 2), (16, 1)])
    ds = synth_blobs(4, 20, (3, 8, 8), seed=1)
    runs = []
    for _ in range(2):
        pn, log = train_meta(PruningNet(t, seed=3), t, ds, TrainConfig(epochs=2, batch_size=16, seed=4))
        runs.append((pn.checksum(), [(r.mean_loss, r.lr) for r in log]))
    assert runs[0] == runs[1]
    write_metrics_csv(log, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "epoch,mean_loss,lr"


def test_divergence_aborts():
    t = build_chain("chain3", (3, 8, 8), 4, stem=(8, 1), blocks=[(12, 2)])
    ds = synth_blobs(4, 20, (3, 8, 8), seed=1)
    pn = PruningNet(t, seed=0)
    pn.params["fc.bias"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="gene"):
        train_meta(pn, t, ds, TrainConfig(epochs=1))


def test_meta_training_updates_shared_bn_stats():
    t = build_chain("chain3", (3, 8, 8), 4, stem=(16, 1), blocks=[(24, 2)])
    pn = PruningNet(t, seed=0)
    ds = synth_blobs(4, 8, (3, 8, 8), seed=1)
    gene = (8, 12)
    forward_loss(pn, t, gene, ds.images, ds.labels)
    assert np.all(pn.bn["b0.conv"].running_mean[8:] == 0)
    assert np.any(pn.bn["b0.conv"].running_mean[:8] != 0)
    copies = cropped_bn_states(pn, t, gene, copy=True)
    copies["b0.conv"].running_mean[:] = 123.0
    assert not np.any(pn.bn["b0.conv"].running_mean == 123.0)


def test_state_dict_roundtrip():
    t = get_template("stage-small")
    a, b = PruningNet(t, seed=0), PruningNet(t, seed=1)
    assert a.checksum() != b.checksum()
    b.load_state_dict(a.state_dict())
    assert a.checksum() == b.checksum()
    bad = a.state_dict()
    bad.pop("fc.bias")
    with pytest.raises(KeyError):
        b.load_state_dict(bad)
