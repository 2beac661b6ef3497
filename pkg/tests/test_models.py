import math

import numpy as np
import pytest
from scipy.special import expit

from acmlab import autodiff as ad
from acmlab.graph import FilterKind, build_graph, make_filter
from acmlab.metrics import LabelEncoding
from acmlab.models import (
    FAMILIES, GraphData, ModelSpec, acm_layer, acm_plus_layer, acm_plusplus_forward, forward, forward_sgc,
    init_params, layer_param_count, load_checkpoint, param_count, param_shapes, predict, save_checkpoint,
)

from conftest import K22_EDGES, random_graph

# Six-node fixture: two triangles joined by one edge, plus a pendant.
G6 = build_graph([(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (3, 5)], 6)
Z6 = LabelEncoding.from_classes([0, 0, 1, 1, 2, 2])
X6 = np.random.default_rng(0).normal(size=(6, 4))


def data6(kind="arw_hat"):
    return GraphData.build(G6, X6, Z6, kind)


def tensors(params):
    tape = ad.Tape()
    return {k: tape.const(v) for k, v in params.items()}


def dense_filters(g):
    a = g.adjacency().toarray()
    at = a + np.eye(g.num_nodes)
    lp = at / at.sum(axis=1, keepdims=True)
    return a, lp, np.eye(g.num_nodes) - lp


def relu(x):
    return np.maximum(x, 0)


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def ln(x, g, b, eps=1e-5):
    return (x - x.mean(axis=1, keepdims=True)) / np.sqrt(x.var(axis=1, keepdims=True) + eps) * g + b


def dense_acm_layer(h, p, prefix, spec, output, g):
    """Textbook ACM/ACMII layer from dense matrices."""
    a, lp, hp = dense_filters(g)
    act = (lambda x: x) if output or spec.activation == "linear" else relu
    filt = {"lp": lp, "hp": hp, "identity": np.eye(len(h))}
    chans = [c for c in ("lp", "hp", "identity", "structure") if c in spec.channels]
    feats = []
    for c in chans:
        if c == "structure":
            feats.append(act(a @ p[f"{prefix}.W_structure"]))
        elif spec.variant == 1:
            feats.append(act(filt[c] @ h @ p[f"{prefix}.W_{c}"]))
        else:
            feats.append(filt[c] @ act(h @ p[f"{prefix}.W_{c}"]))
    scores = []
    for c, hc in zip(chans, feats):
        src = ln(hc, p[f"{prefix}.ln_gamma_{c}"], p[f"{prefix}.ln_beta_{c}"]) if spec.uses_layer_norm else hc
        scores.append(expit(src @ p[f"{prefix}.Wt_{c}"]))
    s = np.hstack(scores) / spec.effective_temperature
    alpha = softmax(s @ p[f"{prefix}.W_mix"] if spec.use_mixing else s)
    out = sum(alpha[:, [i]] * hc for i, hc in enumerate(feats))
    return act(out), alpha


def dense_acm_model(spec, p, x, g):
    h = x
    res = relu(x @ p["W_X"]) if spec.use_residual and spec.layers > 1 else None
    for i in range(spec.layers):
        last = i == spec.layers - 1
        h, _ = dense_acm_layer(h, p, f"l{i}", spec, last, g)
        if res is not None and not last:
            h = h + res
    return h


# --- SGC -----------------------------------------------------------------------------


def test_sgc_identity_filter():
    g = build_graph([(0, 1)], 3)
    f = make_filter(g, FilterKind.IDENTITY)
    x = np.random.default_rng(1).normal(size=(3, 3))
    t = ad.Tape()
    out = forward_sgc(1, f, t.const(x), t.const(np.eye(3)))
    np.testing.assert_array_equal(out.value, x)


def test_sgc_k22_class_swapped_mixtures():
    g = build_graph(K22_EDGES, 4)
    z = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], float)
    w = np.array([[2.0, -1.0], [0.5, 3.0]])
    t = ad.Tape()
    out = forward_sgc(1, make_filter(g), t.const(z), t.const(w)).value
    expected = np.array([[1 / 3, 2 / 3]] * 2 + [[2 / 3, 1 / 3]] * 2) @ w
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_sgc_hops_and_errors():
    f = make_filter(G6)
    t = ad.Tape()
    w = np.random.default_rng(2).normal(size=(4, 3))
    _, lp, _ = dense_filters(G6)
    np.testing.assert_allclose(forward_sgc(2, f, t.const(X6), t.const(w)).value, lp @ lp @ X6 @ w, atol=1e-12)
    with pytest.raises(ValueError):
        forward_sgc(0, f, t.const(X6), t.const(w))
    with pytest.raises(ValueError):
        forward_sgc(1, f, t.const(X6), t.const(np.ones((5, 3))))


def test_sgc_spec_uses_cached_filtered_features():
    spec = ModelSpec(family="sgc", layers=2)
    p = init_params(spec, 4, 3, np.random.default_rng(0))
    _, lp, _ = dense_filters(G6)
    logits, _ = predict(spec, data6(), p)
    np.testing.assert_allclose(logits, lp @ lp @ X6 @ p["l0.W"], atol=1e-12)


# --- GCN / MLP / snowball ---------------------------------------------------------------


def test_gcn_identity_filter_equals_mlp():
    gcn = ModelSpec(family="gcn", hidden=5, filter_kind="identity")
    mlp = ModelSpec(family="mlp", hidden=5)
    p = init_params(gcn, 4, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(predict(gcn, data6("identity"), p)[0], predict(mlp, data6(), p)[0])


def test_gcn_zero_weights_uniform_loss():
    spec = ModelSpec(family="gcn", hidden=5)
    p = {k: np.zeros_like(v) for k, v in init_params(spec, 4, 3, np.random.default_rng(0)).items()}
    logits, _ = predict(spec, data6(), p)
    t = ad.Tape()
    loss = ad.cross_entropy(t.const(logits), Z6.classes, np.ones(6, bool))
    assert loss.item() == pytest.approx(math.log(3), abs=1e-15)


@pytest.mark.parametrize("kind", ["arw_hat", "asym_hat"])
def test_gcn_dense_oracle(kind):
    spec = ModelSpec(family="gcn", hidden=5, filter_kind=kind)
    p = init_params(spec, 4, 3, np.random.default_rng(1))
    a = G6.adjacency().toarray() + np.eye(6)
    d = a.sum(axis=1)
    f = a / d[:, None] if kind == "arw_hat" else a / np.sqrt(np.outer(d, d))
    expected = f @ relu(f @ X6 @ p["l0.W"]) @ p["l1.W"]
    np.testing.assert_allclose(predict(spec, data6(kind), p)[0], expected, atol=1e-12)


def test_snowball_zero_hidden_is_gcn_layer():
    snow = ModelSpec(family="snowball", layers=0)
    gcn = ModelSpec(family="gcn", layers=1)
    p = init_params(snow, 4, 3, np.random.default_rng(0))
    assert set(p) == {"l0.W"}
    np.testing.assert_array_equal(predict(snow, data6(), p)[0], predict(gcn, data6(), p)[0])


@pytest.mark.parametrize("layers", [2, 3])
def test_snowball_widths_and_dense_oracle(layers):
    spec = ModelSpec(family="snowball", layers=layers, hidden=5)
    shapes = param_shapes(spec, 4, 3)
    assert [shapes[f"l{i}.W"][0] for i in range(layers + 1)] == [4 + 5 * i for i in range(layers + 1)]
    p = init_params(spec, 4, 3, np.random.default_rng(2))
    _, lp, _ = dense_filters(G6)
    outs = [X6]
    for i in range(layers):
        outs.append(relu(lp @ np.hstack(outs) @ p[f"l{i}.W"]))
    expected = lp @ np.hstack(outs) @ p[f"l{layers}.W"]
    np.testing.assert_allclose(predict(spec, data6(), p)[0], expected, atol=1e-12)


# --- ACM layer ---------------------------------------------------------------------------------


def test_symmetric_channels_give_uniform_alpha():
    spec = ModelSpec(family="acm_gcn", layers=1, hidden=3)
    p = init_params(spec, 4, 3, np.random.default_rng(0))
    for c in ("hp", "identity"):
        p[f"l0.W_{c}"] = p["l0.W_lp"].copy()
    for c in ("lp", "hp", "identity"):
        p[f"l0.Wt_{c}"] = np.zeros_like(p[f"l0.Wt_{c}"])
    p["l0.W_mix"] = np.eye(3)
    _, alphas = predict(spec, data6(), p)
    assert np.array_equal(alphas[0], np.full((6, 3), 1 / 3))


def test_lp_only_layer_is_gcn_layer():
    d = data6()
    acm = ModelSpec(family="acm_gcn", hidden=5, channels=("lp",), use_mixing=False)
    gcn = ModelSpec(family="gcn", hidden=5)
    p_gcn = init_params(gcn, 4, 3, np.random.default_rng(0))
    p_acm = init_params(acm, 4, 3, np.random.default_rng(0))
    for i in range(2):
        assert np.array_equal(p_acm[f"l{i}.W_lp"], p_gcn[f"l{i}.W"])
    np.testing.assert_array_equal(predict(acm, d, p_acm)[0], predict(gcn, d, p_gcn)[0])


@pytest.mark.parametrize("variant", [1, 2])
@pytest.mark.parametrize("mixing", [True, False])
@pytest.mark.parametrize("channels", [("lp", "hp", "identity"), ("lp", "hp"), ("lp", "identity")])
def test_acm_dense_oracle(variant, mixing, channels):
    spec = ModelSpec(family="acm_gcn", hidden=5, variant=variant, use_mixing=mixing, channels=channels)
    p = init_params(spec, 4, 3, np.random.default_rng(3))
    logits, alphas = predict(spec, data6(), p)
    np.testing.assert_allclose(logits, dense_acm_model(spec, p, X6, G6), rtol=0, atol=1e-12)
    for a in alphas:
        assert a.shape == (6, len(channels))
        assert np.all((a > 0) & (a < 1))
        np.testing.assert_allclose(a.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_acm_layer_direct_call():
    spec = ModelSpec(family="acm_gcn", layers=1, hidden=3)
    p = init_params(spec, 4, 3, np.random.default_rng(5))
    d = data6()
    out, alpha = acm_layer(tensors({"x": X6})["x"], d.lp, d.hp, tensors(p), "l0", spec, output=False)
    exp_out, exp_alpha = dense_acm_layer(X6, p, "l0", spec, False, G6)
    np.testing.assert_allclose(out.value, exp_out, atol=1e-12)
    np.testing.assert_allclose(alpha, exp_alpha, atol=1e-12)


def test_temperature_default_and_override():
    assert ModelSpec(family="acm_gcn").effective_temperature == 3
    assert ModelSpec(family="acm_gcn", channels=("lp", "hp")).effective_temperature == 2
    assert ModelSpec(family="acm_gcn_plus", channels=("lp", "hp", "identity", "structure")).effective_temperature == 4
    assert ModelSpec(family="acm_gcn", temperature=0.5).effective_temperature == 0.5


def test_linear_mode_options_coincide():
    s1 = ModelSpec(family="acm_gcn", hidden=5, variant=1, activation="linear")
    s2 = ModelSpec(family="acm_gcn", hidden=5, variant=2, activation="linear")
    p = init_params(s1, 4, 3, np.random.default_rng(0))
    np.testing.assert_allclose(predict(s1, data6(), p)[0], predict(s2, data6(), p)[0], atol=1e-13)


def test_acmii_family_sets_variant():
    assert ModelSpec(family="acmii_gcn").variant == 2


# --- ACM+ / ACM++ ---------------------------------------------------------------------------------


@pytest.mark.parametrize("variant", [1, 2])
@pytest.mark.parametrize("structure", [True, False])
def test_acm_plus_dense_oracle(variant, structure):
    chans = ("lp", "hp", "identity", "structure") if structure else ("lp", "hp", "identity")
    spec = ModelSpec(family="acm_gcn_plus", hidden=5, variant=variant, channels=chans)
    p = init_params(spec, 4, 3, np.random.default_rng(4), num_nodes=6)
    p = {k: v + (0.3 * np.random.default_rng(1).normal(size=v.shape) if "ln_" in k else 0) for k, v in p.items()}
    logits, alphas = predict(spec, data6(), p)
    np.testing.assert_allclose(logits, dense_acm_model(spec, p, X6, G6), atol=1e-12)
    np.testing.assert_allclose(alphas[0].sum(axis=1), 1.0, atol=1e-12)


def test_acm_plus_layer_without_structure_is_layer_normed_acm():
    spec = ModelSpec(family="acm_gcn_plus", layers=1)
    p = init_params(spec, 4, 3, np.random.default_rng(0))
    d = data6()
    x = tensors({"x": X6})["x"]
    a = acm_plus_layer(x, d.lp, d.hp, tensors(p), "l0", spec, output=True)[0].value
    b = acm_layer(x, d.lp, d.hp, tensors(p), "l0", spec, output=True)[0].value
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        acm_plus_layer(x, d.lp, d.hp, tensors(p), "l0", ModelSpec(family="acm_gcn"), output=True)


def test_acm_plusplus_zero_residual_is_acm_plus():
    pp = ModelSpec(family="acm_gcn_plusplus", hidden=5)
    plus = ModelSpec(family="acm_gcn_plus", hidden=5)
    p = init_params(pp, 4, 3, np.random.default_rng(0))
    assert p["W_X"].shape == (4, 5)
    p["W_X"] = np.zeros_like(p["W_X"])
    p_plus = {k: v for k, v in p.items() if k != "W_X"}
    np.testing.assert_array_equal(predict(pp, data6(), p)[0], predict(plus, data6(), p_plus)[0])


def test_acm_plusplus_dense_oracle():
    spec = ModelSpec(family="acm_gcn_plusplus", hidden=5, layers=3,
                     channels=("lp", "hp", "identity", "structure"))
    p = init_params(spec, 4, 3, np.random.default_rng(6), num_nodes=6)
    t = ad.Tape()
    logits, _ = acm_plusplus_forward(spec, data6(), {"_x": t.const(X6), **tensors(p)}, None, False)
    np.testing.assert_allclose(logits.value, dense_acm_model(spec, p, X6, G6), atol=1e-12)
    with pytest.raises(ValueError):
        acm_plusplus_forward(ModelSpec(family="acm_gcn_plus"), data6(), tensors(p), None, False)


# --- spec validation and parameter counts -------------------------------------------------------


@pytest.mark.parametrize("kw", [
    {"family": "gat"},
    {"family": "acm_gcn", "channels": ("hp", "identity")},
    {"family": "acm_gcn", "channels": ()},
    {"family": "acm_gcn", "channels": ("lp", "structure")},
    {"family": "acm_gcn", "temperature": 0.0},
    {"family": "gcn", "dropout": 1.0},
    {"family": "acm_sgc", "layers": 2},
    {"family": "gcn", "filter_kind": "nope"},
    {"family": "acm_gcn", "variant": 3},
])
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        ModelSpec(**kw)


def test_spec_json_roundtrip():
    spec = ModelSpec(family="acm_gcn_plus", channels=("lp", "hp", "identity", "structure"), dropout=0.3)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_param_counts():
    assert layer_param_count(ModelSpec(family="acm_gcn"), 64, 64) == 3 * 64 * 65 + 9 == 12489
    assert layer_param_count(ModelSpec(family="gcn"), 64, 64) == 4096
    for f in (8, 16, 64):
        assert layer_param_count(ModelSpec(family="acmii_gcn"), f, f) == 3 * f * (f + 1) + 9


def test_four_channel_plus_count():
    f_in, f_out, n = 16, 16, 50
    spec = ModelSpec(family="acm_gcn_plus", channels=("lp", "hp", "identity", "structure"))
    count = layer_param_count(spec, f_in, f_out, num_nodes=n)
    # three filtered channels + structure weights + four score vectors + 4x4 mixing + LN affine pairs
    assert count == 3 * f_in * f_out + n * f_out + 4 * f_out + 16 + 4 * 2 * f_out
    assert count == 4 * f_in * (f_out + 1) + 16 + (n - f_in) * f_out + 8 * f_out


def test_whole_model_count():
    spec = ModelSpec(family="acm_gcn", hidden=64)
    assert param_count(spec, 100, 5) == (3 * 100 * 64 + 3 * 64 + 9) + (3 * 64 * 5 + 3 * 5 + 9)


# --- gradients for every family ---------------------------------------------------------------------


def _family_spec(fam, variant):
    kw = {"hidden": 4, "variant": variant}
    if fam in ("acm_gcn_plus", "acm_gcn_plusplus"):
        kw["channels"] = ("lp", "hp", "identity", "structure")
    if fam in ("sgc", "acm_sgc"):
        kw["layers"] = 1
    if fam == "snowball":
        kw["layers"] = 2
    return ModelSpec(family=fam, **kw)


@pytest.mark.parametrize("variant", [1, 2])
@pytest.mark.parametrize("fam", FAMILIES)
def test_model_gradients(fam, variant):
    spec = _family_spec(fam, variant)
    d = data6()
    p = init_params(spec, 4, 3, np.random.default_rng(1), num_nodes=6)
    mask = np.array([1, 1, 0, 1, 1, 1], bool)

    def loss(tape, t):
        logits, _ = forward(spec, d, t)
        return ad.cross_entropy(logits, Z6.classes, mask)

    report = ad.grad_check(loss, p, num_coords=100)
    assert report["passed"], report


def test_dropout_gradients_with_fixed_mask():
    spec = ModelSpec(family="acm_gcn", hidden=4, dropout=0.5)
    d = data6()
    p = init_params(spec, 4, 3, np.random.default_rng(1))

    def loss(tape, t):
        logits, _ = forward(spec, d, t, rng=np.random.default_rng(3), training=True)
        return ad.cross_entropy(logits, Z6.classes, np.ones(6, bool))

    assert ad.grad_check(loss, p, num_coords=100)["passed"]


# --- checkpoints ----------------------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    spec = ModelSpec(family="acm_gcn_plus", channels=("lp", "hp", "identity", "structure"))
    p = init_params(spec, 4, 3, np.random.default_rng(0), num_nodes=6)
    save_checkpoint(tmp_path / "model", spec, p)
    assert (tmp_path / "model.bin").exists() and (tmp_path / "model.json").exists()
    spec2, p2 = load_checkpoint(tmp_path / "model")
    assert spec2 == spec
    assert list(p2) == list(p)
    for k in p:
        assert np.array_equal(p[k], p2[k])


def test_structure_channel_on_random_graph():
    g = random_graph(12, 0.3, np.random.default_rng(0), connected=True)
    z = LabelEncoding.from_classes(np.arange(12) % 3)
    x = np.random.default_rng(1).normal(size=(12, 4))
    spec = ModelSpec(family="acm_gcn_plus", hidden=5, channels=("lp", "hp", "identity", "structure"))
    p = init_params(spec, 4, 3, np.random.default_rng(2), num_nodes=12)
    logits, _ = predict(spec, GraphData.build(g, x, z), p)
    np.testing.assert_allclose(logits, dense_acm_model(spec, p, x, g), atol=1e-12)
