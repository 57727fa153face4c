import numpy as np
import pytest

from mlb_lab import model as mdl
from mlb_lab.core import RngStream, fd_gradient, sigmoid, softmax_ce
from mlb_lab.diagnostics import (
    closed_form_residual,
    cross_modal_grad_diagnostic,
    grad_linear_closed_form,
    grad_nonlinear_closed_form,
)
from mlb_lab.errors import ConfigError, ContractError, DimensionError
from mlb_lab.model import (
    FUSIONS,
    Model,
    ModelSpec,
    backward,
    forward,
    fuse_cosine,
    fuse_film,
    fuse_gated,
    fuse_late_linear,
    fuse_mid_mlp,
    init_params,
    load_checkpoint,
    multi_loss,
    param_layout,
    save_checkpoint,
)

SMALL = dict(in_v=4, in_a=3, feat_v=3, feat_a=3, n_classes=3, encoder_depth=2,
             encoder_hidden=5, fusion_hidden=4)


def _setup(fusion, heads, seed=0, batch=5, jitter=0.1):
    spec = ModelSpec(**SMALL, fusion=fusion, heads=heads)
    rs = RngStream(seed)
    params = init_params(spec, rs.substream("init"))
    rng = rs.substream("data")
    for p in params.values():
        p += jitter * rng.standard_normal(p.shape)
    xv = rng.standard_normal((batch, spec.in_v))
    xa = rng.standard_normal((batch, spec.in_a))
    y = rng.integers(0, spec.n_classes, size=batch)
    return spec, params, xv, xa, y


def _flat_fd(spec, params, xv, xa, y, objective, names, cosine=None):
    """Central differences of the objective w.r.t. the concatenation of ``names``."""
    sizes = [params[n].size for n in names]
    theta = np.concatenate([params[n].ravel() for n in names])

    def loss(t):
        local = dict(params)
        off = 0
        for n, s in zip(names, sizes):
            local[n] = t[off:off + s].reshape(params[n].shape)
            off += s
        return multi_loss(forward(spec, local, xv, xa, cosine), y, objective)[0]

    return fd_gradient(loss, theta, 1e-5)


@pytest.mark.parametrize("fusion", FUSIONS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_multi_loss_backward_matches_fd(fusion, seed):
    spec, params, xv, xa, y = _setup(fusion, True, seed)
    grads = backward(spec, params, forward(spec, params, xv, xa), y, "multi_loss")
    names = [n for n, *_ in param_layout(spec)]
    num = _flat_fd(spec, params, xv, xa, y, "multi_loss", names)
    ana = np.concatenate([grads[n].ravel() for n in names])
    assert np.linalg.norm(ana - num) / np.linalg.norm(num) < 1e-7


@pytest.mark.parametrize("fusion", FUSIONS)
def test_joint_heads_off_backward_matches_fd(fusion):
    spec, params, xv, xa, y = _setup(fusion, False, 3)
    grads = backward(spec, params, forward(spec, params, xv, xa), y, "joint")
    names = [n for n, *_ in param_layout(spec)]
    num = _flat_fd(spec, params, xv, xa, y, "joint", names)
    ana = np.concatenate([grads[n].ravel() for n in names])
    assert np.linalg.norm(ana - num) / np.linalg.norm(num) < 1e-7


def test_cosine_backward_matches_fd():
    spec, params, xv, xa, y = _setup("late_linear", False, 4)
    grads = backward(spec, params, forward(spec, params, xv, xa, 5.0), y, "joint")
    names = [n for n, *_ in param_layout(spec)]
    num = _flat_fd(spec, params, xv, xa, y, "joint", names, cosine=5.0)
    ana = np.concatenate([grads[n].ravel() for n in names])
    # normalization is sharply curved near small norms; truncation error dominates
    assert np.linalg.norm(ana - num) / np.linalg.norm(num) < 1e-6
    # the bias does not enter cosine logits
    assert np.all(grads["fuse.b"] == 0.0)


def test_joint_heads_are_detached_probes():
    spec, params, xv, xa, y = _setup("mid_mlp", True, 5)
    g_joint = backward(spec, params, forward(spec, params, xv, xa), y, "joint")
    spec_off = ModelSpec(**SMALL, fusion="mid_mlp", heads=False)
    p_off = {n: params[n] for n, *_ in param_layout(spec_off)}
    g_off = backward(spec_off, p_off, forward(spec_off, p_off, xv, xa), y, "joint")
    for n in p_off:
        assert np.array_equal(g_joint[n], g_off[n]), n
    # heads receive exactly their own CE gradient
    phi_v = forward(spec, params, xv, xa).phi[0]

    def probe(t):
        W = t.reshape(params["head_v.W"].shape)
        return softmax_ce(phi_v @ W.T + params["head_v.b"], y)[0]

    num = fd_gradient(probe, params["head_v.W"].ravel())
    assert np.allclose(g_joint["head_v.W"].ravel(), num, atol=1e-9)


def test_multi_loss_minus_joint_is_only_head_terms():
    spec, params, xv, xa, y = _setup("late_linear", True, 6)
    fo = forward(spec, params, xv, xa)
    L, terms = multi_loss(fo, y, "multi_loss")
    Lj, _ = multi_loss(forward(spec, params, xv, xa), y, "joint")
    assert L == terms["mm"] + terms["v"] + terms["a"]
    assert Lj == terms["mm"]
    fused = backward(spec, params, forward(spec, params, xv, xa), y, "joint")
    full = backward(spec, params, forward(spec, params, xv, xa), y, "multi_loss")
    assert np.array_equal(fused["fuse.W"], full["fuse.W"])
    assert np.array_equal(fused["head_a.W"], full["head_a.W"])
    assert not np.array_equal(fused["enc_v.1.W"], full["enc_v.1.W"])


def test_backward_cache_is_single_use_and_spec_bound():
    spec, params, xv, xa, y = _setup("late_linear", True)
    fo = forward(spec, params, xv, xa)
    backward(spec, params, fo, y)
    with pytest.raises(ContractError):
        backward(spec, params, fo, y)
    other = ModelSpec(**SMALL, fusion="late_linear", heads=True)
    with pytest.raises(ContractError):
        backward(other, params, forward(spec, params, xv, xa), y)


def test_multi_loss_needs_heads():
    spec, params, xv, xa, y = _setup("late_linear", False)
    with pytest.raises(ConfigError):
        multi_loss(forward(spec, params, xv, xa), y, "multi_loss")


def test_late_linear_hand_value():
    W = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
    b = np.array([[0.0, 1.0]])
    out = fuse_late_linear(np.array([[1.0, 2.0]]), np.array([[3.0]]), W, b)
    assert np.array_equal(out, [[7.0, 0.0]])


def test_mid_mlp_hand_value():
    W1 = np.array([[1.0, -1.0], [1.0, 1.0]])
    b1 = np.array([[0.0, -5.0]])
    W2 = np.array([[2.0, 3.0]])
    b2 = np.array([[0.5]])
    # g = (2 - 1, 2 + 1 - 5) = (1, -2) -> relu (1, 0) -> 2 + 0.5
    out = fuse_mid_mlp(np.array([[2.0]]), np.array([[1.0]]), W1, b1, W2, b2)
    assert np.array_equal(out, [[2.5]])


def test_film_identity_at_init_and_hand_value():
    spec = ModelSpec(**SMALL, fusion="film", heads=False)
    params = init_params(spec, np.random.default_rng(0))
    params["film.W"][:] = 0.0
    phi_v = np.array([[1.0, -2.0, 3.0]])
    phi_a = np.array([[0.5, 0.5, 0.5]])
    # gamma = 1, beta = 0 -> logits = W relu(phi_v) + b
    expect = np.maximum(phi_v, 0) @ params["fuse.W"].T + params["fuse.b"]
    assert np.allclose(fuse_film(phi_v, phi_a, params), expect)
    params["film.b"][:] = [[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]]
    expect = np.maximum(2 * phi_v - 1, 0) @ params["fuse.W"].T + params["fuse.b"]
    assert np.allclose(fuse_film(phi_v, phi_a, params), expect)


def test_gated_extremes_select_one_modality():
    spec = ModelSpec(**SMALL, fusion="gated", heads=False)
    params = init_params(spec, np.random.default_rng(0))
    params["gate.W"][:] = 0.0
    phi_v, phi_a = np.array([[1.0, 2.0, 3.0]]), np.array([[-1.0, 0.0, 4.0]])
    W, b = params["fuse.W"], params["fuse.b"]
    params["gate.b"][:] = 50.0
    assert np.allclose(fuse_gated(phi_v, phi_a, params), phi_v @ W.T + b)
    params["gate.b"][:] = -50.0
    assert np.allclose(fuse_gated(phi_v, phi_a, params), phi_a @ W.T + b)
    params["gate.b"][:] = 0.0
    g = sigmoid(np.zeros((1, 3)))
    assert np.allclose(fuse_gated(phi_v, phi_a, params), (g * phi_v + (1 - g) * phi_a) @ W.T + b)


def test_gated_needs_equal_widths():
    with pytest.raises(ConfigError):
        ModelSpec(4, 3, 3, 2, 3, fusion="gated")


def test_cosine_zero_rows_contribute_nothing():
    phis = [np.array([[3.0, 4.0]]), np.zeros((1, 2))]
    W = [np.array([[3.0, 4.0], [0.0, 2.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])]
    out = fuse_cosine(phis, W, 2.0)
    assert np.allclose(out, [[2.0, 2.0 * 0.8]])


def test_encoder_dimension_error():
    spec, params, xv, xa, y = _setup("late_linear", True)
    with pytest.raises(DimensionError):
        forward(spec, params, xv[:, :2], xa)
    with pytest.raises(DimensionError):
        forward(spec, params, xv, xa[:2])


def test_linear_closed_form_is_independent_of_phi_a_perturbation_structure():
    rng = np.random.default_rng(0)
    phi_v, phi_a = rng.random((6, 3)), rng.random((6, 2))
    W, b = rng.standard_normal((4, 5)), rng.standard_normal((1, 4))
    y = rng.integers(0, 4, 6)
    cf = grad_linear_closed_form(phi_v, phi_a, W, b, y)
    num = fd_gradient(lambda t: softmax_ce(phi_v @ t.reshape(4, 3).T + phi_a @ W[:, 3:].T + b, y)[0],
                      W[:, :3].ravel())
    assert np.allclose(cf.ravel(), num, atol=1e-9)


def test_nonlinear_closed_form_against_fd():
    rng = np.random.default_rng(1)
    phi_v, phi_a = rng.random((6, 3)), rng.random((6, 2))
    W1, b1 = rng.standard_normal((5, 5)), rng.standard_normal((1, 5))
    W2, b2 = rng.standard_normal((4, 5)), rng.standard_normal((1, 4))
    y = rng.integers(0, 4, 6)
    cf = grad_nonlinear_closed_form(phi_v, phi_a, W1, b1, W2, b2, y)

    def loss(t):
        g = phi_v @ t.reshape(5, 3).T + phi_a @ W1[:, 3:].T + b1
        return softmax_ce(np.maximum(g, 0) @ W2.T + b2, y)[0]

    assert np.allclose(cf.ravel(), fd_gradient(loss, W1[:, :3].ravel()), atol=1e-8)


@pytest.mark.parametrize("fusion", ["late_linear", "mid_mlp"])
def test_backprop_equals_closed_form(fusion):
    spec, params, xv, xa, y = _setup(fusion, False, 7, jitter=0.0)
    assert closed_form_residual(spec, params, xv, xa, y) < 1e-12


def test_relu_flip_changes_mid_gradient_but_not_linear():
    # a hidden unit whose pre-activation changes sign when phi_a moves
    phi_v = np.array([[1.0]])
    y = np.array([0])
    W1 = np.array([[1.0, 1.0]])
    b1 = np.array([[0.0]])
    W2 = np.array([[1.0], [-1.0]])
    b2 = np.zeros((1, 2))
    on = grad_nonlinear_closed_form(phi_v, np.array([[0.5]]), W1, b1, W2, b2, y)
    off = grad_nonlinear_closed_form(phi_v, np.array([[-1.5]]), W1, b1, W2, b2, y)
    assert np.any(on != 0) and np.all(off == 0)
    Wl = np.array([[1.0, 1.0], [-1.0, 0.0]])
    bl = np.zeros((1, 2))
    lin_on = grad_linear_closed_form(phi_v, np.array([[0.5]]), Wl, bl, y)
    lin_off = grad_linear_closed_form(phi_v, np.array([[-1.5]]), Wl, bl, y)
    assert np.all(lin_on != 0) and np.all(lin_off != 0)


def test_diagnostic_schema_and_residuals():
    spec = ModelSpec(**SMALL, fusion="late_linear", heads=False)
    rep = cross_modal_grad_diagnostic(spec, seed=0, instances=20)
    assert set(rep["fusions"]) == {"late_linear", "mid_mlp"}
    for f in rep["fusions"].values():
        assert f["max_residual"] < 1e-10
        assert f["sensitivity_mean"] >= 0
    assert rep["max_residual"] < 1e-10


def test_diagnostic_zero_v_input_gives_zero_block():
    spec = ModelSpec(**SMALL, fusion="late_linear", heads=False)
    rep = cross_modal_grad_diagnostic(spec, seed=0, instances=5, scale_v=0.0)
    for f in rep["fusions"].values():
        assert f["max_abs_grad_v_block"] == 0.0


def test_model_groups_cover_every_tensor_once():
    spec = ModelSpec(**SMALL, fusion="film", heads=True)
    m = Model.init(spec, np.random.default_rng(0))
    ids = [id(t) for g in m.groups for t in g.tensors]
    assert len(ids) == len(set(ids)) == len(m.params)
    tags = {g.modality_tag for g in m.groups}
    assert tags == {"encoder:0", "encoder:1", "fusion", "head:0", "head:1"}


def test_init_is_deterministic():
    spec = ModelSpec(**SMALL)
    a = init_params(spec, RngStream(11).substream("init"))
    b = init_params(spec, RngStream(11).substream("init"))
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("fusion", FUSIONS)
def test_checkpoint_round_trip(tmp_path, fusion):
    spec = ModelSpec(**SMALL, fusion=fusion, heads=True)
    params = init_params(spec, np.random.default_rng(2))
    path = tmp_path / "ck.bin"
    save_checkpoint(path, spec, params)
    spec2, params2, entries = load_checkpoint(path)
    assert spec2 == spec
    assert [e["name"] for e in entries] == [n for n, *_ in param_layout(spec)]
    for n in params:
        assert np.array_equal(params[n], params2[n])
    assert {e["modality_tag"] for e in entries} >= {"encoder:0", "encoder:1", "fusion"}


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ContractError):
        load_checkpoint(p)
