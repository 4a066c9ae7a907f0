import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from emtm.distill import ce_from_logits
from emtm.errors import ConfigError, ContractError
from emtm.numerics import ParameterStore, backward, check_gradients, no_grad, ops
from emtm.student_net import ModelConfig, StudentNet, decode_batch, decode_span
from emtm.unify import StartEndDistribution


def small(**kw):
    base = dict(d=8, n=6, d_v=5, d_q=4, m_max=4, heads=2, conv_kernel=3, dropout=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def _inputs(cfg, B=2, m=None, seed=0):
    r = np.random.default_rng(seed)
    m = cfg.m_max if m is None else m
    return r.normal(size=(B, cfg.n, cfg.d_v)), r.normal(size=(B, m, cfg.d_q))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d=10, heads=8)
    with pytest.raises(ConfigError):
        ModelConfig(conv_kernel=4)
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0)
    assert ModelConfig().gaussian_sigma == 32 / 20


def test_encode_shapes(backend):
    cfg = small()
    net = StudentNet(cfg, ParameterStore(0))
    v, q = _inputs(cfg, m=3)
    e = net.project_and_encode(v, q)
    assert e.v_enc.shape == (2, cfg.n, cfg.d) and e.q_enc.shape == (2, 3, cfg.d)


def test_query_longer_than_m_max_rejected():
    cfg = small()
    net = StudentNet(cfg, ParameterStore(0))
    v, q = _inputs(cfg, m=cfg.m_max + 1)
    with pytest.raises(ContractError):
        net.project_and_encode(v, q)


def test_zero_input_is_translation_symmetric():
    cfg = small(n=7)
    store = ParameterStore(0)
    net = StudentNet(cfg, store)
    store["student.pos"].value[...] = 0.0
    e = net.project_and_encode(np.zeros((1, 7, cfg.d_v)), np.zeros((1, 4, cfg.d_q)))
    v = e.v_enc.value[0]
    np.testing.assert_allclose(v, np.broadcast_to(v[0], v.shape), atol=1e-12)


def test_perturbing_a_row_changes_its_encoding():
    cfg = small()
    net = StudentNet(cfg, ParameterStore(0))
    v, q = _inputs(cfg, B=1)
    base = net.project_and_encode(v, q).v_enc.value
    v2 = v.copy()
    v2[0, 3] += 1.0
    moved = net.project_and_encode(v2, q).v_enc.value
    assert np.abs(moved[0, 3] - base[0, 3]).max() > 1e-6


def test_query_padding_does_not_change_output(backend):
    cfg = small()
    net = StudentNet(cfg, ParameterStore(0))
    v, q = _inputs(cfg, B=1, m=2)
    short = net.distribution(v, q)
    padded = np.concatenate([q, np.random.default_rng(9).normal(size=(1, 2, cfg.d_q))], axis=1)
    mask = np.array([[True, True, False, False]])
    np.testing.assert_allclose(net.distribution(v, padded, mask), short, atol=1e-12)


def test_cqa_single_token_broadcasts_query():
    cfg = small()
    net = StudentNet(cfg, ParameterStore(0))
    v, q = _inputs(cfg, B=1, m=1)
    e = net.project_and_encode(v, q)
    fused, S_r, S_c = net.context_query_attention(e, return_weights=True)
    np.testing.assert_allclose(S_r.value, 1.0, atol=1e-15)
    A = ops.matmul(S_r, e.q_enc).value[0]
    np.testing.assert_allclose(A, np.broadcast_to(e.q_enc.value[0, 0], A.shape), atol=1e-12)
    assert fused.v_qv.shape == (1, cfg.n, cfg.d)
    assert net.store["student.cqa.ffn.w"].shape == (4 * cfg.d, cfg.d)


def test_cqa_normalizations():
    cfg = small()
    net = StudentNet(cfg, ParameterStore(0))
    v, q = _inputs(cfg)
    _, S_r, S_c = net.context_query_attention(net.project_and_encode(v, q), return_weights=True)
    np.testing.assert_allclose(S_r.value.sum(axis=2), 1.0, atol=1e-9)
    np.testing.assert_allclose(S_c.value.sum(axis=1), 1.0, atol=1e-9)


def test_forward_gives_valid_distributions(backend):
    cfg = small()
    net = StudentNet(cfg, ParameterStore(0))
    v, q = _inputs(cfg, B=3, m=cfg.m_max)
    logits, _ = net.forward(v, q)
    assert logits.shape == (3, 2, cfg.n)
    p = net.distribution(v, q)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_forward_is_deterministic():
    cfg = small()
    v, q = _inputs(cfg)
    a = StudentNet(cfg, ParameterStore(3)).distribution(v, q)
    b = StudentNet(cfg, ParameterStore(3)).distribution(v, q)
    assert a.tobytes() == b.tobytes()


def test_full_student_gradient_check(backend):
    cfg = small()
    store = ParameterStore(0)
    net = StudentNet(cfg, store)
    v, q = _inputs(cfg, B=2)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    y = np.array([[1, 3], [0, 5]])
    nodes = [store[n] for n in net.param_names()]

    def fn():
        logits, _ = net.forward(v, q, mask)
        return ce_from_logits(logits, y)

    errors = check_gradients(fn, nodes)
    bad = {k: e for k, e in errors.items() if e > 1e-4 and not k.endswith("attn.bk")}
    assert not bad


def test_predictor_gradient_reaches_every_predictor_parameter():
    cfg = small()
    store = ParameterStore(0)
    net = StudentNet(cfg, store)
    v, q = _inputs(cfg, B=2)
    store.zero_grad()
    logits, _ = net.forward(v, q)
    backward(ce_from_logits(logits, np.array([[1, 2], [0, 4]])))
    for name in net.private_names():
        if ".pred." in name and not name.endswith(".b"):
            assert np.any(store[name].grad != 0), name


# --- decoding --------------------------------------------------------------


def test_decode_examples(backend):
    ps, pe = np.full(8, 0.01), np.full(8, 0.01)
    ps[2], pe[5] = 0.93, 0.93
    assert decode_span(StartEndDistribution(ps, pe)) == (2, 5)
    u = np.full(6, 1 / 6)
    assert decode_span(StartEndDistribution(u, u)) == (0, 0)


def test_decode_matches_enumeration(backend, rng):
    probs = rng.dirichlet(np.ones(10), size=(50, 2))
    idx = decode_batch(probs)
    for p, (i, j) in zip(probs, idx):
        assert (i, j) == oracles.decode(p[0].tolist(), p[1].tolist())


@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.integers(0, 2 ** 31))
def test_decode_orders_indices(xs, seed):
    n = len(xs)
    ps = np.array(xs) + 1e-3
    pe = np.random.default_rng(seed).random(n) + 1e-3
    i, j = decode_span(StartEndDistribution(ps / ps.sum(), pe / pe.sum()))
    assert 0 <= i <= j < n
