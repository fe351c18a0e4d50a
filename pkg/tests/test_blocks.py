import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localvit import blocks as B
from localvit import tensor as T
from localvit.tensor import Tensor

from conftest import rel_err


def init(seed=0, std=0.5):
    return B.Init(seed, std=std)


def randomize(module, rng, scale=0.5):
    for _, p in module.named_parameters():
        p.data = rng.standard_normal(p.shape) * scale


# -- attention ----------------------------------------------------------------


def attention_loop(x, attn):
    """Per-sample, per-head loop with explicit scores."""
    b, n, d = x.shape
    hds = attn.heads
    dh = d // hds
    out = np.zeros_like(x)
    for s in range(b):
        q = x[s] @ attn.q.weight.data + attn.q.bias.data
        k = x[s] @ attn.k.weight.data + attn.k.bias.data
        v = x[s] @ attn.v.weight.data + attn.v.bias.data
        heads = []
        for h in range(hds):
            sl = slice(h * dh, (h + 1) * dh)
            z = np.zeros((n, dh))
            for i in range(n):
                scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(n)])
                wts = np.exp(scores - scores.max())
                wts /= wts.sum()
                z[i] = sum(wts[j] * v[j, sl] for j in range(n))
            heads.append(z)
        out[s] = np.concatenate(heads, axis=1) @ attn.proj.weight.data + attn.proj.bias.data
    return out


def test_attention_matches_loop(rng):
    attn = B.MultiHeadAttention(6, 2, init())
    randomize(attn, rng)
    x = rng.standard_normal((1, 5, 6))
    assert np.abs(attn(Tensor(x)).data - attention_loop(x, attn)).max() < 1e-12


def test_attention_single_token(rng):
    attn = B.MultiHeadAttention(6, 3, init())
    randomize(attn, rng)
    x = rng.standard_normal((2, 1, 6))
    v = x @ attn.v.weight.data + attn.v.bias.data
    expected = v @ attn.proj.weight.data + attn.proj.bias.data
    assert np.abs(attn(Tensor(x)).data - expected).max() < 1e-14


def test_attention_identical_tokens(rng):
    attn = B.MultiHeadAttention(4, 2, init())
    randomize(attn, rng)
    tok = rng.standard_normal(4)
    out = attn(Tensor(np.stack([tok, tok])[None])).data
    np.testing.assert_array_equal(out[0, 0], out[0, 1])


def test_attention_permutation_equivariance(rng):
    attn = B.MultiHeadAttention(6, 2, init())
    randomize(attn, rng)
    x = rng.standard_normal((1, 5, 6))
    perm = np.concatenate([[0], 1 + rng.permutation(4)])  # class token stays at 0
    a = attn(Tensor(x)).data[:, perm]
    b = attn(Tensor(x[:, perm])).data
    # summation order inside the softmax changes, so agreement is to round-off
    assert np.abs(a - b).max() < 1e-12


def test_attention_rejects_bad_heads():
    with pytest.raises(ValueError, match="divide"):
        B.MultiHeadAttention(6, 4, init())


def test_attention_gradient(rng):
    attn = B.MultiHeadAttention(4, 2, init(std=0.5))
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    target = Tensor(rng.standard_normal((2, 3, 4)))
    f = lambda _=None: (attn(x) * target).sum()
    T.backward(f())
    for name, p in [("x", x)] + list(attn.named_parameters()):
        numeric = T.finite_diff_grad(f, p)
        if name == "k.bias":
            # a shared key offset cancels in the row softmax
            assert np.abs(p.grad).max() < 1e-12 and np.abs(numeric).max() < 1e-9
        else:
            assert rel_err(p.grad, numeric) < 1e-6, name


# -- feed-forward -------------------------------------------------------------


def test_ffn_plain_constructed_identity(rng):
    d, g = 3, 2
    ffn = B.PlainFFN(d, g, B.ActivationSpec("relu6"), init())
    ffn.fc1.weight.data = np.hstack([np.eye(d), np.zeros((d, d))])
    ffn.fc2.weight.data = np.vstack([np.eye(d), np.zeros((d, d))])
    x = rng.uniform(0, 5.9, (2, 4, d))
    np.testing.assert_array_equal(ffn(Tensor(x)).data, x)


def test_ffn_plain_zero_input(rng):
    ffn = B.PlainFFN(4, 2, B.ActivationSpec("hswish"), init())
    assert not ffn(Tensor(np.zeros((1, 3, 4)))).data.any()


def test_ffn_plain_matches_token_loop(rng):
    ffn = B.PlainFFN(4, 2, B.ActivationSpec("hswish"), init())
    randomize(ffn, rng)
    x = rng.standard_normal((1, 3, 4))
    w1, b1, w2, b2 = (ffn.fc1.weight.data, ffn.fc1.bias.data, ffn.fc2.weight.data, ffn.fc2.bias.data)
    hs = lambda v: v * min(max(v + 3, 0), 6) / 6
    expected = np.zeros_like(x)
    for t in range(3):
        hidden = [hs(x[0, t] @ w1[:, j] + b1[j]) for j in range(8)]
        expected[0, t] = np.array(hidden) @ w2 + b2
    assert np.abs(ffn(Tensor(x)).data - expected).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["relu6", "hswish", "gelu"]))
def test_ffn_conv_equals_plain(seed, act):
    rng = np.random.Generator(np.random.PCG64(seed))
    plain = B.PlainFFN(4, 3, B.ActivationSpec(act), init(seed))
    randomize(plain, rng)
    conv = B.ConvFFN.from_plain(plain)
    z = rng.standard_normal((2, 6, 4)) * 2
    assert np.abs(conv(Tensor(z), (2, 3)).data - plain(Tensor(z)).data).max() < 1e-12


def test_ffn_conv_zero_and_identity(rng):
    d = 3
    plain = B.PlainFFN(d, 2, B.ActivationSpec("relu6"), init())
    plain.fc1.weight.data = np.hstack([np.eye(d), np.zeros((d, d))])
    plain.fc2.weight.data = np.vstack([np.eye(d), np.zeros((d, d))])
    conv = B.ConvFFN.from_plain(plain)
    x = rng.uniform(0, 5.9, (1, 4, d))
    assert np.abs(conv(Tensor(x), (2, 2)).data - x).max() < 1e-15
    assert not conv(Tensor(np.zeros((1, 4, d))), (2, 2)).data.any()


def test_ffn_conv_rejects_class_token(rng):
    conv = B.ConvFFN(4, 2, B.ActivationSpec("relu6"), init())
    with pytest.raises(T.ShapeError, match="class token"):
        conv(Tensor(rng.standard_normal((1, 5, 4))), (2, 2))


# -- sequence <-> lattice -----------------------------------------------------


def test_seq2img_single_token(rng):
    z = rng.standard_normal((2, 1, 5))
    img = B.seq2img(Tensor(z), (1, 1)).data
    assert img.shape == (2, 5, 1, 1)
    np.testing.assert_array_equal(img[:, :, 0, 0], z[:, 0])
    np.testing.assert_array_equal(B.img2seq(Tensor(img)).data, z)


def test_seq2img_row_major():
    z = np.arange(4 * 3, dtype=float).reshape(1, 4, 3)
    img = B.seq2img(Tensor(z), (2, 2)).data
    np.testing.assert_array_equal(img[0, :, 0, 1], z[0, 1])
    np.testing.assert_array_equal(img[0, :, 1, 0], z[0, 2])
    back = B.img2seq(Tensor(img)).data
    np.testing.assert_array_equal(back[0, 1], img[0, :, 0, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5))
def test_lattice_round_trip_bitwise(b, h, w, d):
    z = np.random.default_rng(b * 100 + h * 10 + w).standard_normal((b, h * w, d))
    assert B.img2seq(B.seq2img(Tensor(z), (h, w))).data.tobytes() == z.tobytes()
    y = np.random.default_rng(d).standard_normal((b, d, h, w))
    assert B.seq2img(B.img2seq(Tensor(y)), (h, w)).data.tobytes() == y.tobytes()


def test_seq2img_rejects_wrong_count():
    with pytest.raises(T.ShapeError):
        B.seq2img(Tensor(np.zeros((1, 5, 2))), (2, 2))


# -- class token routing ------------------------------------------------------


def test_split_single_image_token(rng):
    z = rng.standard_normal((2, 2, 3))
    cls, img = B.class_token_split(Tensor(z), (1, 1))
    assert img.shape == (2, 1, 3)
    np.testing.assert_array_equal(cls.data[:, 0], z[:, 0])


def test_split_concat_round_trips(rng):
    z = rng.standard_normal((2, 5, 3))
    cls, img = B.class_token_split(Tensor(z), (2, 2))
    assert B.class_token_concat(cls, img).data.tobytes() == z.tobytes()
    c2, i2 = B.class_token_split(B.class_token_concat(cls, img), (2, 2))
    assert c2.data.tobytes() == cls.data.tobytes() and i2.data.tobytes() == img.data.tobytes()


def test_concat_places_class_token_first(rng):
    cls = rng.standard_normal((2, 1, 3))
    out = B.class_token_concat(Tensor(cls), Tensor(rng.standard_normal((2, 4, 3))))
    assert out.shape == (2, 5, 3)
    np.testing.assert_array_equal(out.data[:, 0], cls[:, 0])


def test_split_without_class_token_rejected():
    with pytest.raises(T.ShapeError):
        B.class_token_split(Tensor(np.zeros((1, 4, 2))), (2, 2))


def test_concat_dim_mismatch_rejected():
    with pytest.raises(T.ShapeError):
        B.class_token_concat(Tensor(np.zeros((1, 1, 3))), Tensor(np.zeros((1, 4, 2))))


# -- gates --------------------------------------------------------------------


def test_se_zero_weights_halve(rng):
    se = B.SEGate(8, 2, init())
    for p in se.parameters():
        p.data[...] = 0.0
    u = rng.standard_normal((2, 8, 3, 3))
    np.testing.assert_array_equal(se(Tensor(u)).data, u * 0.5)


def test_se_parameter_count():
    spec = B.ActivationSpec("hswish", gate="se", se_reduction=192)
    assert spec.se_width(768) == 4
    assert B.SEGate(768, 4, init()).num_parameters() == 6916


def test_se_rejects_zero_width():
    with pytest.raises(ValueError, match="width"):
        B.ActivationSpec("hswish", gate="se", se_reduction=16).se_width(8)


def test_eca_zero_weights_halve(rng):
    eca = B.ECAGate(5, init())
    eca.weight.data[...] = 0.0
    u = rng.standard_normal((2, 8, 3, 3))
    np.testing.assert_array_equal(eca(Tensor(u)).data, u * 0.5)


def test_eca_twelve_instances_sixty_params():
    assert sum(B.ECAGate(5, init(i)).num_parameters() for i in range(12)) == 60


def test_eca_rejects_even_kernel():
    with pytest.raises(ValueError, match="odd"):
        B.ECAGate(4, init())


@pytest.mark.parametrize("gate", [lambda: B.SEGate(6, 2, init(std=1.0)), lambda: B.ECAGate(3, init(std=1.0))])
def test_gate_broadcast_property(rng, gate):
    g = gate()
    u = rng.standard_normal((2, 6, 4, 4)) * 3
    s = g.scale(Tensor(u)).data
    assert np.all((s > 0) & (s < 1))
    ratio = g(Tensor(u)).data / u
    assert np.abs(ratio - s[:, :, None, None]).max() < 1e-12


# -- locality FFN -------------------------------------------------------------


def test_locality_reduces_to_conv_ffn(rng):
    d, g = 3, 2
    loc = B.LocalityFFN(d, g, B.ActivationSpec("relu6"), init())
    randomize(loc, rng)
    loc.dw.weight.data[...] = 0.0
    loc.dw.weight.data[:, 0, 1, 1] = 1.0
    for bn in (loc.bn1, loc.bn_dw, loc.bn2):
        bn.weight.data[...] = 1.0
        bn.bias.data[...] = 0.0
        bn.state.running_var[...] = 1.0 - bn.state.eps
    loc.eval()
    plain = B.PlainFFN(d, g, B.ActivationSpec("relu6"), init())
    plain.fc1.weight.data = loc.conv1.weight.data[:, :, 0, 0].T.copy()
    plain.fc2.weight.data = loc.conv2.weight.data[:, :, 0, 0].T.copy()
    plain.fc1.bias.data[...] = 0.0
    plain.fc2.bias.data[...] = 0.0
    conv = B.ConvFFN.from_plain(plain)
    z = rng.standard_normal((2, 6, d))
    # relu6 is idempotent, so the extra activation after the delta kernel is a no-op
    assert np.abs(loc(Tensor(z), (2, 3)).data - conv(Tensor(z), (2, 3)).data).max() < 1e-12


def perturbation_footprint(fn, shape, lattice, at, rng):
    z = rng.standard_normal(shape)
    base = fn(Tensor(z)).data
    z2 = z.copy()
    h, w = lattice
    z2[:, at[0] * w + at[1], :] += 1.0
    diff = np.abs(fn(Tensor(z2)).data - base).max(axis=(0, 2))
    return diff.reshape(h, w) > 0


@pytest.mark.parametrize("at", [(3, 3), (0, 0), (6, 2)])
def test_locality_single_layer_cone(rng, at):
    loc = B.LocalityFFN(4, 2, B.ActivationSpec("hswish"), init(std=0.5))
    randomize(loc, rng)
    loc.eval()
    changed = perturbation_footprint(lambda z: loc(z, (7, 7)), (1, 49, 4), (7, 7), at, rng)
    r, c = np.nonzero(changed)
    assert changed[at]
    assert np.abs(r - at[0]).max() <= 1 and np.abs(c - at[1]).max() <= 1


@pytest.mark.parametrize("m", [1, 2, 3])
def test_locality_stacked_cone(rng, m):
    ffns = [B.LocalityFFN(4, 2, B.ActivationSpec("hswish"), init(i, std=0.5)) for i in range(m)]
    for f in ffns:
        f.eval()

    def stack(z):
        for f in ffns:
            z = z + f(z, (9, 9))
        return z

    at = (4, 4)
    changed = perturbation_footprint(stack, (1, 81, 4), (9, 9), at, rng)
    r, c = np.nonzero(changed)
    assert np.abs(r - at[0]).max() == m and np.abs(c - at[1]).max() == m


def test_locality_gate_applies_to_all_variants(rng):
    for act in (
        B.ActivationSpec("hswish", gate="se", se_keep=2),
        B.ActivationSpec("hswish", gate="eca", eca_kernel=3),
    ):
        loc = B.LocalityFFN(4, 2, act, init())
        assert loc.gate is not None
        assert loc(Tensor(rng.standard_normal((2, 4, 4))), (2, 2)).shape == (2, 4, 4)


def test_locality_rejects_class_token_and_even_kernel(rng):
    loc = B.LocalityFFN(4, 2, B.ActivationSpec("hswish"), init())
    with pytest.raises(T.ShapeError, match="class token"):
        loc(Tensor(rng.standard_normal((1, 5, 4))), (2, 2))
    with pytest.raises(ValueError, match="odd"):
        B.LocalityFFN(4, 2, B.ActivationSpec("hswish"), init(), kernel_size=4)


@pytest.mark.parametrize(
    "act",
    [
        B.ActivationSpec("hswish"),
        B.ActivationSpec("relu6"),
        B.ActivationSpec("hswish", gate="se", se_keep=2),
        B.ActivationSpec("hswish", gate="eca", eca_kernel=3),
    ],
)
def test_locality_gradient(rng, act):
    loc = B.LocalityFFN(3, 2, act, init(std=0.5))
    loc.train()
    z = Tensor(rng.standard_normal((2, 9, 3)), requires_grad=True)
    target = Tensor(rng.standard_normal((2, 9, 3)))
    f = lambda _=None: (loc(z, (3, 3)) * target).sum()
    T.backward(f())
    for name, p in [("z", z)] + list(loc.named_parameters()):
        assert rel_err(p.grad, T.finite_diff_grad(f, p)) < 1e-4, name


# -- encoder layer ------------------------------------------------------------


@pytest.mark.parametrize("variant", [B.PLAIN, B.CONV1X1, B.LOCALITY])
def test_zero_projection_leaves_attention_output(rng, variant):
    layer = B.EncoderLayer(4, 2, 2, variant, B.ActivationSpec("hswish"), init())
    proj = layer.ffn.fc2 if variant == B.PLAIN else layer.ffn.conv2
    proj.weight.data[...] = 0.0
    x = Tensor(rng.standard_normal((2, 5, 4)))
    np.testing.assert_array_equal(layer(x, (2, 2)).data, layer.attention_sublayer(x).data)


def test_locality_layer_class_token_bypass(rng):
    layer = B.EncoderLayer(4, 2, 2, B.LOCALITY, B.ActivationSpec("hswish"), init(std=0.5))
    x = Tensor(rng.standard_normal((2, 5, 4)))
    delta = layer(x, (2, 2)).data - layer.attention_sublayer(x).data
    assert not delta[:, 0].any()
    assert np.abs(delta[:, 1:]).max() > 0


def test_locality_layer_has_no_ffn_norm():
    layer = B.EncoderLayer(4, 2, 2, B.LOCALITY, B.ActivationSpec("hswish"), init())
    names = [n for n, _ in layer.named_parameters()]
    assert not any(n.startswith("norm2") for n in names)


def test_conv_layer_equals_plain_layer(rng):
    plain = B.EncoderLayer(4, 2, 2, B.PLAIN, B.ActivationSpec("gelu"), init(3, std=0.5))
    conv = B.EncoderLayer(4, 2, 2, B.CONV1X1, B.ActivationSpec("gelu"), init(3, std=0.5))
    conv.ffn = B.ConvFFN.from_plain(plain.ffn)
    x = Tensor(rng.standard_normal((2, 5, 4)))
    assert np.abs(plain(x, (2, 2)).data - conv(x, (2, 2)).data).max() < 1e-12


@pytest.mark.parametrize("variant", [B.PLAIN, B.CONV1X1, B.LOCALITY])
def test_layer_gradient(rng, variant):
    layer = B.EncoderLayer(4, 2, 2, variant, B.ActivationSpec("hswish", gate="se", se_keep=2), init(std=0.5))
    x = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    target = Tensor(rng.standard_normal((2, 5, 4)))
    f = lambda _=None: (layer(x, (2, 2)) * target).sum()
    T.backward(f())
    for name, p in [("x", x)] + list(layer.named_parameters()):
        assert rel_err(p.grad, T.finite_diff_grad(f, p)) < 1e-4, name
