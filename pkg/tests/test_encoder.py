import numpy as np
import pytest

from stvisit import autodiff as ad
from stvisit.autodiff import Tensor, grad_check
from stvisit.encoder import STCE, ContextInputs, PlainEmbedding
from stvisit.errors import ShapeError
from stvisit.graph import normalize_prior
from stvisit.nn import EVAL, ForwardContext, Init


def make_inputs(rng, b=1, n=3, t=4, c=2, d_dem=3, d_ext=2, prior=None):
    if prior is None:
        prior = rng.uniform(0, 1, size=(n, n))
        prior = (prior + prior.T) / 2
        np.fill_diagonal(prior, 0)
    return ContextInputs(rng.uniform(0, 3, size=(b, n, t, c)), rng.normal(size=(b, n, d_dem)),
                         rng.normal(size=(b, n, t, d_ext)), prior)


def make_stce(c=2, d_dem=3, d_ext=2, d_hid=4, d_model=5, seed=0, **kw):
    return STCE(Init(seed), c, d_dem, d_ext, d_hid, d_model, **kw)


def zero_all(module):
    for p in module.parameters():
        p.data[...] = 0.0


def silu(x):
    return x / (1 + np.exp(-x))


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def stce_oracle(m: STCE, inp: ContextInputs):
    """Step-by-step numpy recompute of the encoder in eval mode."""
    P = {k: v.data for k, v in m.named_parameters()}
    hv = silu(inp.visits @ P["emb_v.weight"] + P["emb_v.bias"])
    hd = silu(inp.demographics @ P["emb_d.weight"] + P["emb_d.bias"])
    he = silu(inp.externals @ P["emb_e.weight"] + P["emb_e.bias"])
    x = hv + hd[:, :, None, :] + he
    a = normalize_prior(inp.prior, m.prior_mode)
    xt = np.maximum(np.einsum("ij,bjtd->bitd", a, x @ P["gconv.weight"]) + P["gconv.bias"], 0)
    k = P["temporal_kernel"]
    T = xt.shape[2]
    conv = np.zeros_like(xt)
    for t in range(T):
        for j in range(k.shape[0]):
            s = t + j - (k.shape[0] - 1) // 2
            if 0 <= s < T:
                conv[:, :, t] += k[j] * xt[:, :, s]
    u = conv + xt
    ln = layer_norm(u, P["mixer_norm.gamma"], P["mixer_norm.beta"])
    mlp = silu(ln @ P["mixer_mlp.fc1.weight"] + P["mixer_mlp.fc1.bias"]) @ P["mixer_mlp.fc2.weight"] + P["mixer_mlp.fc2.bias"]
    xh = mlp + u
    cat = np.concatenate([xh, np.broadcast_to(hd[:, :, None, :], xh.shape[:3] + (hd.shape[-1],))], -1)
    z = layer_norm(cat @ P["proj.weight"] + P["proj.bias"], P["proj_norm.gamma"], P["proj_norm.beta"])
    return silu(z @ P["out.weight"] + P["out.bias"])


def test_context_inputs_validate_shapes():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        ContextInputs(np.ones((1, 2, 3, 1)), np.ones((1, 2, 1)), np.ones((1, 2, 4, 1)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        ContextInputs(np.ones((1, 2, 3, 1)), np.ones((1, 2, 1)), np.ones((1, 2, 3, 1)), np.zeros((3, 3)))
    make_inputs(rng)


def test_embed_zero_weights_gives_zero():
    m = make_stce()
    zero_all(m)
    for h in m.embed_inputs(make_inputs(np.random.default_rng(1))):
        np.testing.assert_array_equal(h.data, 0.0)


def test_embed_identity_relu_passes_visits():
    m = make_stce(c=4, d_hid=4, act="relu")
    m.emb_v.weight.data = np.eye(4)
    m.emb_v.bias.data[:] = 0
    inp = make_inputs(np.random.default_rng(2), c=4)
    hv, _, _ = m.embed_inputs(inp)
    np.testing.assert_array_equal(hv.data, inp.visits)


def test_embed_matches_matrix_oracle():
    m = make_stce()
    inp = make_inputs(np.random.default_rng(3), n=2)
    hv, hd, he = m.embed_inputs(inp)
    np.testing.assert_allclose(hv.data, silu(inp.visits @ m.emb_v.weight.data + m.emb_v.bias.data), atol=1e-12)
    np.testing.assert_allclose(hd.data, silu(inp.demographics @ m.emb_d.weight.data + m.emb_d.bias.data), atol=1e-12)
    np.testing.assert_allclose(he.data, silu(inp.externals @ m.emb_e.weight.data + m.emb_e.bias.data), atol=1e-12)


def test_fuse_examples():
    rng = np.random.default_rng(4)
    hv = rng.normal(size=(1, 2, 3, 4))
    z4, z3 = np.zeros((1, 2, 4)), np.zeros((1, 2, 3, 4))
    np.testing.assert_array_equal(STCE.fuse_initial(Tensor(hv), Tensor(z4), Tensor(z3)).data, hv)
    out = STCE.fuse_initial(Tensor(np.ones((1, 2, 3, 4))), Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 2, 3, 4))))
    np.testing.assert_array_equal(out.data, 3.0)
    hv, hd, he = rng.normal(size=(1, 2, 1, 4)), rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 2, 1, 4))
    out = STCE.fuse_initial(Tensor(hv), Tensor(hd), Tensor(he)).data
    np.testing.assert_array_equal(out, hv + hd[:, :, None] + he)


def test_spatial_zero_adjacency_gives_zero():
    m = make_stce(prior_mode="raw")
    m.gconv.bias.data[:] = 0
    x = Tensor(np.random.default_rng(5).normal(size=(1, 3, 4, 4)))
    np.testing.assert_array_equal(m.spatial_encode(x, np.zeros((3, 3))).data, 0.0)


def test_spatial_two_node_hand_computation():
    m = make_stce(prior_mode="sym-norm")
    m.gconv.weight.data = np.eye(4)
    m.gconv.bias.data[:] = 0
    x = np.random.default_rng(6).uniform(0, 1, size=(1, 2, 3, 4))
    out = m.spatial_encode(Tensor(x), np.array([[0.0, 1.0], [1.0, 0.0]])).data
    # degrees are 1, so each node receives exactly its neighbour
    np.testing.assert_allclose(out[0, 0], x[0, 1], atol=1e-15)
    np.testing.assert_allclose(out[0, 1], x[0, 0], atol=1e-15)


def test_spatial_single_isolated_node():
    m = make_stce(prior_mode="raw")
    x = Tensor(np.random.default_rng(7).normal(size=(1, 1, 3, 4)))
    out = m.spatial_encode(x, np.zeros((1, 1))).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.maximum(m.gconv.bias.data, 0), out.shape))


def _zero_mixer(m):
    for p in m.mixer_mlp.parameters():
        p.data[...] = 0.0


def test_temporal_mix_zero_perturbation():
    m = make_stce()
    m.temporal_kernel.data[...] = 0
    _zero_mixer(m)
    x = np.random.default_rng(8).normal(size=(1, 2, 5, 4))
    np.testing.assert_array_equal(m.temporal_mix(Tensor(x)).data, x)


def test_temporal_mix_identity_kernel_doubles():
    m = make_stce()
    m.temporal_kernel.data[...] = np.array([0.0, 1.0, 0.0])[:, None]
    _zero_mixer(m)
    x = np.random.default_rng(9).normal(size=(1, 2, 5, 4))
    np.testing.assert_array_equal(m.temporal_mix(Tensor(x)).data, 2 * x)


def test_temporal_mix_single_step_unit_kernel():
    m = make_stce(kernel_size=1)
    m.temporal_kernel.data[...] = 1.0
    _zero_mixer(m)
    x = np.random.default_rng(10).normal(size=(1, 2, 1, 4))
    np.testing.assert_array_equal(m.temporal_mix(Tensor(x)).data, 2 * x)


def test_project_zero_output_layer():
    m = make_stce()
    m.out.weight.data[...] = 0
    m.out.bias.data[...] = 0
    rng = np.random.default_rng(11)
    r = m.project_output(Tensor(rng.normal(size=(1, 2, 3, 4))), Tensor(rng.normal(size=(1, 2, 4))))
    np.testing.assert_array_equal(r.data, 0.0)


def test_dropout_zero_train_equals_eval():
    m = make_stce(dropout=0.0)
    inp = make_inputs(np.random.default_rng(12))
    np.testing.assert_array_equal(m(inp, EVAL).data, m(inp, ForwardContext(training=True, seed=3)).data)


def test_forward_matches_oracle():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        m = make_stce(seed=seed)
        inp = make_inputs(rng, b=2)
        np.testing.assert_allclose(m(inp).data, stce_oracle(m, inp), rtol=0, atol=1e-12)


def test_all_zero_inputs_and_biases():
    m = make_stce()
    for name, p in m.named_parameters():
        if name.endswith("bias") or name.endswith("beta"):
            p.data[...] = 0.0
    inp = ContextInputs(np.zeros((1, 3, 4, 2)), np.zeros((1, 3, 3)), np.zeros((1, 3, 4, 2)), np.zeros((3, 3)))
    np.testing.assert_array_equal(m(inp).data, 0.0)


@pytest.mark.parametrize("n", [1, 5])
@pytest.mark.parametrize("t", [1, 7])
def test_output_shape(n, t):
    m = make_stce()
    assert m(make_inputs(np.random.default_rng(0), n=n, t=t)).shape == (1, n, t, 5)


def test_gradients_for_every_parameter():
    rng = np.random.default_rng(13)
    m = make_stce(d_hid=3, d_model=3, dropout=0.0)
    inp = make_inputs(rng, n=2, t=3)
    w = Tensor(rng.uniform(0.5, 1.5, size=(1, 2, 3, 3)))
    params = m.parameters()
    report = grad_check(lambda *_: ad.sum_(ad.mul(m(inp), w)), params)
    assert report.passed, dict(zip([k for k, _ in m.named_parameters()], report.max_rel_error))


def test_permutation_equivariance():
    rng = np.random.default_rng(14)
    m = make_stce()
    inp = make_inputs(rng, n=5)
    perm = rng.permutation(5)
    permuted = ContextInputs(inp.visits[:, perm], inp.demographics[:, perm], inp.externals[:, perm],
                             inp.prior[np.ix_(perm, perm)])
    np.testing.assert_allclose(m(permuted).data, m(inp).data[:, perm], rtol=0, atol=1e-12)


def test_deterministic_without_dropout():
    m = make_stce()
    inp = make_inputs(np.random.default_rng(15))
    assert np.array_equal(m(inp).data, m(inp).data)


def test_demographic_change_is_local_without_edges():
    rng = np.random.default_rng(16)
    m = make_stce(prior_mode="raw")
    inp = make_inputs(rng, n=4, prior=np.zeros((4, 4)))
    base = m(inp).data
    dem = inp.demographics.copy()
    dem[0, 2] += 1.0
    out = m(ContextInputs(inp.visits, dem, inp.externals, inp.prior)).data
    changed = np.any(out != base, axis=(0, 2, 3))
    np.testing.assert_array_equal(changed, [False, False, True, False])


def test_plain_embedding_ignores_covariates():
    rng = np.random.default_rng(17)
    m = PlainEmbedding(Init(0), 2, 5)
    inp = make_inputs(rng)
    other = ContextInputs(inp.visits, inp.demographics + 1, inp.externals - 1, inp.prior)
    assert m(inp).shape == (1, 3, 4, 5)
    np.testing.assert_array_equal(m(inp).data, m(other).data)
