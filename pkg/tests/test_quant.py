import numpy as np
import pytest

from railseg import quant
from railseg.graph import build_baseline, init_weights, program, run_program, tiny_model
from railseg.graph.execute import Program
from railseg.graph.model import Prim
from railseg.quant import (ASYMMETRIC, SYMMETRIC, QuantSpec, affine_dequantize, affine_quantize, build_plan,
                           eliminate_concat, from_fp16, fuse, fuse_conv_bn, load_plan, save_plan, to_fp16)
from railseg.tensor import FP16, FP32, TensorF


def test_fuse_conv_bn_examples():
    w, b = fuse_conv_bn([[[[2.0]]]], None, [1], [0], [0], [1], eps=0)
    assert w[0, 0, 0, 0] == 2.0 and b[0] == 0.0
    w, b = fuse_conv_bn([[[[1.0]]]], [0.0], [2], [1.5], [1], [4], eps=0)
    assert w[0, 0, 0, 0] == 1.0 and b[0] == 0.5
    with pytest.raises(ValueError):
        fuse_conv_bn(np.ones((2, 1, 1, 1)), None, [1], [0], [0], [1])
    with pytest.raises(ValueError):
        fuse_conv_bn(np.ones((1, 1, 1, 1)), None, [1], [0], [0], [-1], eps=0)


def _conv(name, inp, cin, cout, k=1, act=None):
    attrs = {"cin": cin, "cout": cout, "k": k, "stride": 1, "pad": k // 2, "groups": 1, "bias": True}
    if act:
        attrs["act"] = act
    return Prim(name, "conv", list(inp), attrs, name)


def _weights(prims, shapes, seed=0):
    rng = np.random.default_rng(seed)
    w = {}
    for p in prims:
        if p.op == "conv":
            cout, cin, k = shapes[p.name]
            w[f"{p.name}.weight"] = TensorF.from_array(rng.standard_normal((cout, cin, k, k)), FP32)
            w[f"{p.name}.bias"] = TensorF.from_array(rng.standard_normal(cout), FP32)
    return w


def test_single_concat_eliminated():
    prims = [_conv("a", ["input"], 3, 4, 3), _conv("b", ["input"], 3, 5, 1),
             Prim("cat", "concat", ["a", "b"], {"axis": 1}, "cat"), _conv("c", ["cat"], 9, 6, 3)]
    prog = Program(prims, {"out": "c"}, (3, 8, 8), 1, 0, 16)
    w = _weights(prims, {"a": (4, 3, 3), "b": (5, 3, 1), "c": (6, 9, 3)})
    new = eliminate_concat(prog)
    assert [p.op for p in new.prims] == ["conv", "conv", "conv"]
    assert new.prims[-1].inputs == ["a", "b"]
    x = np.random.default_rng(1).standard_normal((1, 3, 8, 8)).astype(np.float32)
    ref = run_program(prog, w, x)["out"]
    got = run_program(new, w, x)["out"]
    assert np.array_equal(got, ref)


def test_no_concat_is_noop():
    prims = [_conv("a", ["input"], 3, 4)]
    prog = Program(prims, {"out": "a"}, (3, 4, 4), 1, 0, 16)
    assert eliminate_concat(prog) is prog


def test_concat_feeding_output_kept():
    prims = [_conv("a", ["input"], 3, 4), Prim("cat", "concat", ["a", "input"], {"axis": 1}, "cat")]
    prog = Program(prims, {"out": "cat"}, (3, 4, 4), 1, 0, 16)
    assert eliminate_concat(prog) is prog


def test_baseline_concat_elimination():
    g = build_baseline(64, 80)
    prog = program(g)
    w = init_weights(g, 0)
    new = eliminate_concat(prog)
    assert len(new.prims) < len(prog.prims)
    x = np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)
    a, b = run_program(prog, w, x), run_program(new, w, x)
    for name in prog.outputs:
        scale = max(1.0, float(np.max(np.abs(a[name]))))
        assert np.max(np.abs(a[name] - b[name])) <= 1e-6 * scale, name


def test_fused_plan_matches_unfused():
    g, w = tiny_model()
    x = np.random.default_rng(3).random((1, 3, 32, 32), dtype=np.float32)
    ref = run_program(program(g), w, x)
    plan = build_plan(g, w)
    assert not any(p.op == "bn" for p in plan.program.prims)
    assert len(plan.program.prims) < plan.source_prims
    got = plan.run(x)
    for k, r in ref.items():
        assert np.max(np.abs(got[k] - r)) <= 1e-4 * max(1.0, float(np.max(np.abs(r)))), k


def test_fuse_does_not_mutate():
    g, w = tiny_model()
    prog = program(g)
    n, keys = len(prog.prims), set(w)
    fuse(prog, w)
    assert len(prog.prims) == n and set(w) == keys


def test_fp16_examples():
    t = to_fp16(TensorF.from_array(np.array([1.0, 0.1, 70000.0, 65504.0]), FP32))
    assert t.dtype == FP16
    back = from_fp16(t).numpy()
    assert back[0] == 1.0 and back[1] == np.float32(0.0999755859375)
    assert np.isposinf(back[2]) and back[3] == 65504.0
    assert to_fp16(t) is t


def test_fp16_idempotent():
    x = np.random.default_rng(0).standard_normal(10_000).astype(np.float32) * 100
    once = from_fp16(to_fp16(x)).numpy()
    twice = from_fp16(to_fp16(once)).numpy()
    assert np.array_equal(once, twice)


def test_affine_examples():
    q, s = affine_quantize(np.array([-1.0, 0.0, 1.0]))
    assert q.tolist() == [-127, 0, 127] and s.zero_point == 0 and abs(s.scale - 1 / 127) < 1e-15
    q, s = affine_quantize(np.zeros(4))
    assert not q.any() and s.scale == quant.SCALE_FLOOR
    q, s = affine_quantize(np.array([0.0, 255.0]), ASYMMETRIC)
    assert q.tolist() == [-128, 127] and s.scale == 1.0 and s.zero_point == -128
    with pytest.raises(ValueError):
        QuantSpec(scheme=SYMMETRIC, zero_point=3)
    with pytest.raises(ValueError):
        QuantSpec(scale=0.0)


@pytest.mark.parametrize("scheme", [SYMMETRIC, ASYMMETRIC])
def test_affine_error_bound(scheme):
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal(500) * rng.uniform(0.01, 100) + rng.uniform(-5, 5)
        q, s = affine_quantize(x, scheme)
        err = np.abs(affine_dequantize(q, s).astype(np.float64) - x)
        assert err.max() <= s.scale / 2 * (1 + 1e-6) + 1e-6 * np.abs(x).max()


def test_fp16_plan_size_and_accuracy():
    g, w = tiny_model()
    p32, p16 = build_plan(g, w, "fp32"), build_plan(g, w, "fp16")
    assert p16.nbytes * 2 == p32.nbytes
    x = np.random.default_rng(4).random((1, 3, 32, 32), dtype=np.float32)
    a, b = p32.execute(x), p16.execute(x)
    for name in ("box_dist", "cls_logits", "coeffs", "proto"):
        ra, rb = getattr(a, name), getattr(b, name)
        assert np.max(np.abs(ra - rb)) <= 1e-2 * max(1.0, float(np.max(np.abs(ra)))), name
    with pytest.raises(ValueError):
        build_plan(g, w, "int4")


def test_plan_save_load(tmp_path):
    g, w = tiny_model()
    plan = build_plan(g, w, "fp16")
    path = tmp_path / "m.plan"
    save_plan(plan, path)
    again = load_plan(path)
    assert again.precision == "fp16" and again.program == plan.program
    x = np.random.default_rng(5).random((1, 3, 32, 32), dtype=np.float32)
    assert np.array_equal(plan.execute(x).proto, again.execute(x).proto)
