import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from emtm.errors import ContractError
from emtm.kau import kau_parameter_count
from emtm.metrics import (count_cost, encoder_params, evaluate, fmt_flops, iou, measure_latency,
                          private_params)
from emtm.numerics import ParameterStore, layers
from emtm.student_net import ModelConfig, StudentNet


def test_iou_examples():
    assert iou((1.0, 4.0), (1.0, 4.0)) == 1.0
    assert iou((2.0, 6.0), (4.0, 8.0)) == pytest.approx(1 / 3)
    assert iou((0.0, 1.0), (2.0, 3.0)) == 0.0
    assert iou((2.0, 2.0), (2.0, 2.0)) == 0.0
    with pytest.raises(ContractError):
        iou((3.0, 1.0), (0.0, 1.0))


_span = st.tuples(st.floats(0, 100), st.floats(0.01, 50)).map(lambda t: (t[0], t[0] + t[1]))


@given(_span, _span, st.floats(-50, 50))
def test_iou_symmetric_and_shift_invariant(a, b, c):
    assert iou(a, b) == iou(b, a)
    shifted = iou((a[0] + c, a[1] + c), (b[0] + c, b[1] + c))
    assert shifted == pytest.approx(iou(a, b), abs=1e-9)
    assert 0.0 <= iou(a, b) <= 1.0


def test_evaluate_extremes():
    labels = [(1.0, 3.0), (2.0, 5.0)]
    r = evaluate(labels, labels)
    assert all(v == 100.0 for v in r.r1.values()) and r.miou == 100.0 and r.sumacc == 200.0
    r = evaluate([(10.0, 11.0), (20.0, 21.0)], labels)
    assert all(v == 0.0 for v in r.r1.values()) and r.miou == 0.0


def test_evaluate_matches_recount(rng):
    pred = [tuple(sorted(rng.uniform(0, 30, size=2))) for _ in range(50)]
    gold = [tuple(sorted(rng.uniform(0, 30, size=2))) for _ in range(50)]
    r1, miou = oracles.recount(pred, gold)
    rep = evaluate(pred, gold)
    assert rep.r1 == r1
    assert rep.miou == pytest.approx(miou, abs=1e-12)


def test_threshold_is_strict():
    # IoU exactly 0.5 does not count at the 0.5 threshold
    rep = evaluate([(0.0, 2.0)], [(0.0, 4.0)])
    assert rep.r1[0.3] == 100.0 and rep.r1[0.5] == 0.0


def test_sumacc_conventions(rng):
    pred = [tuple(sorted(rng.uniform(0, 10, size=2))) for _ in range(40)]
    gold = [tuple(sorted(rng.uniform(0, 10, size=2))) for _ in range(40)]
    cap = evaluate(pred, gold)
    body = evaluate(pred, gold, sumacc="body")
    assert cap.sumacc == cap.r1[0.5] + cap.r1[0.7]
    assert body.sumacc == body.r1[0.3] + body.r1[0.5]
    with pytest.raises(ContractError):
        evaluate(pred, gold, sumacc="other")


def test_evaluate_length_mismatch():
    with pytest.raises(ContractError):
        evaluate([(0.0, 1.0)], [])


@given(st.lists(st.tuples(_span, _span), min_size=1, max_size=30))
def test_r1_monotone_in_threshold(pairs):
    rep = evaluate([p for p, _ in pairs], [g for _, g in pairs])
    assert 100.0 >= rep.r1[0.3] >= rep.r1[0.5] >= rep.r1[0.7] >= 0.0


def test_report_table_and_dict():
    rep = evaluate([(0.0, 1.0)], [(0.0, 1.0)])
    assert "R1@0.7" in rep.table() and rep.as_dict()["count"] == 1


# --- cost ------------------------------------------------------------------


def test_linear_layer_param_closed_form():
    s = ParameterStore(0)
    s.get_or_create("w", (3, 5))
    s.get_or_create("b", (5,), "zeros")
    assert s.size() == 3 * 5 + 5 == 20
    out = layers.linear(np.ones((2, 3)), s["w"], s["b"])
    assert out.shape == (2, 5)


@pytest.mark.parametrize("d", [8, 32, 128])
def test_student_params_match_store(d):
    cfg = ModelConfig(d=d)
    store = ParameterStore(0)
    net = StudentNet(cfg, store)
    emb = store["student.pos"].value.size
    assert count_cost(cfg).params == store.size() - emb
    assert encoder_params(cfg) == sum(store[n].value.size for n in net.encoder_names())
    assert private_params(cfg, include_embeddings=True) == sum(
        store[n].value.size for n in net.private_names())


def test_flops_and_params_grow_with_d():
    costs = [count_cost(ModelConfig(d=d)) for d in (32, 64, 128)]
    assert costs[0].flops < costs[1].flops < costs[2].flops
    assert costs[0].params < costs[1].params < costs[2].params


def test_inference_path_has_no_training_components():
    cfg = ModelConfig()
    inf = count_cost(cfg, "inference")
    assert all(k.startswith("student.") for k in inf.breakdown)
    tr = count_cost(cfg, "training", b=4)
    assert "kau" in tr.breakdown and any(k.startswith("teacher.") for k in tr.breakdown)
    assert tr.params == inf.params + private_params(cfg) + kau_parameter_count(cfg, 4)
    assert count_cost(cfg, "training", b=4, shared=False).params == tr.params + encoder_params(cfg)


def test_conv_flop_convention():
    # one conv block: 2*k*d*d*n for the convolution plus elementwise terms
    cfg = ModelConfig(d=16, n=10, encoder_blocks=1)
    from emtm.metrics import _block_flops
    assert _block_flops(10, 16, 7) == 2 * 7 * 16 * 16 * 10 + 7 * 10 * 16
    assert count_cost(cfg).flops == sum(count_cost(cfg).breakdown.values())


def test_cost_is_pure():
    assert count_cost(ModelConfig()).as_dict() == count_cost(ModelConfig()).as_dict()


def test_latency_reports_median_and_spread():
    med, iqr = measure_latency(lambda: sum(range(100)), runs=20, warmup=2)
    assert med > 0 and iqr >= 0


def test_fmt_flops():
    assert fmt_flops(1.5e9) == "1.500G" and fmt_flops(0) == "0"
