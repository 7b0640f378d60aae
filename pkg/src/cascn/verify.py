"""Built-in verification suite: gradient checks, adjoint identities,
analytic oracles, and cost-formula checks, each as a fast named check.

Used by the CLI `verify` command; every check either returns quietly or
raises, and the runner reports one line per check.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from . import ops
from .attention import Meca, MecaSpec, meca_kernel_size
from .aspp import Aspp, AsppSpec
from .data import augment, synth_dataset
from .layers import SeparableBlock, SeparableBlockSpec
from .losses import PixelBatch, bce_loss, jaccard_loss, seg_loss
from .metrics import METRIC_NAMES, ConfusionCounts, confusion, metrics
from .model import LayerCost
from .tensor import Tape, Tensor, backward, grad_check

GRAD_TOL = 1e-6
ADJOINT_TOL = 1e-10


def _rng(seed=0):
    return np.random.default_rng(seed)


def _t(rng, *shape, grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return float((a * b).sum())


def _adjoint_gap(forward, x: np.ndarray, y_shape) -> float:
    """Relative gap in <L(x), y> == <x, L^T(y)> for a linear tensor op."""
    rng = _rng(99)
    y = rng.normal(size=y_shape)
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        out = forward(xt)
        s = (out * Tensor(y)).sum()
    lt_y = backward(tape, s)[xt]
    lhs = _dot(out.data, y)
    rhs = _dot(x, lt_y)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12)


# --- gradient fidelity ------------------------------------------------------

def check_grad_conv2d():
    for seed in range(5):
        rng = _rng(seed)
        x = _t(rng, 1, 2, 6, 6)
        w = _t(rng, 3, 2, 3, 3)
        b = _t(rng, 3)
        cw = _t(rng, 1, 3, 6, 6)
        err = grad_check(lambda t: (ops.conv2d(x, t, b, padding=1) * cw).sum(), w)
        assert err < GRAD_TOL, f"weight grad err {err:.2e}"
        err = grad_check(lambda t: (ops.conv2d(t, w, b, padding=1) * cw).sum(), x)
        assert err < GRAD_TOL, f"input grad err {err:.2e}"
        err = grad_check(lambda t: (ops.conv2d(x, w, t, padding=1) * cw).sum(), b)
        assert err < GRAD_TOL, f"bias grad err {err:.2e}"


def check_grad_conv2d_strided_dilated():
    for seed in range(5):
        rng = _rng(10 + seed)
        x = _t(rng, 2, 2, 7, 7)
        w = _t(rng, 2, 2, 3, 3)
        cw = _t(rng, 2, 2, 4, 4)
        f = lambda t: (ops.conv2d(t, w, stride=2, padding=2, dilation=2) * cw).sum()
        err = grad_check(f, x)
        assert err < GRAD_TOL, f"strided/dilated grad err {err:.2e}"


def check_grad_depthwise():
    for seed in range(5):
        rng = _rng(20 + seed)
        x = _t(rng, 2, 3, 5, 5)
        w = _t(rng, 3, 1, 3, 3)
        cw = _t(rng, 2, 3, 5, 5)
        err = grad_check(lambda t: (ops.depthwise_conv2d(x, t, padding=1) * cw).sum(), w)
        assert err < GRAD_TOL, f"depthwise weight grad err {err:.2e}"
        err = grad_check(lambda t: (ops.depthwise_conv2d(t, w, padding=1) * cw).sum(), x)
        assert err < GRAD_TOL, f"depthwise input grad err {err:.2e}"


def check_grad_pointwise():
    for seed in range(5):
        rng = _rng(30 + seed)
        x = _t(rng, 2, 3, 4, 4)
        w = _t(rng, 5, 3, 1, 1)
        b = _t(rng, 5)
        cw = _t(rng, 2, 5, 4, 4)
        err = grad_check(lambda t: (ops.pointwise_conv(x, t, b) * cw).sum(), w)
        assert err < GRAD_TOL, f"pointwise weight grad err {err:.2e}"
        err = grad_check(lambda t: (ops.pointwise_conv(t, w, b) * cw).sum(), x)
        assert err < GRAD_TOL, f"pointwise input grad err {err:.2e}"


def check_grad_transposed():
    for seed in range(5):
        rng = _rng(40 + seed)
        x = _t(rng, 1, 3, 3, 4)
        w = _t(rng, 3, 2, 2, 2)
        cw = _t(rng, 1, 2, 6, 8)
        err = grad_check(lambda t: (ops.transposed_conv2d(x, t) * cw).sum(), w)
        assert err < GRAD_TOL, f"transposed weight grad err {err:.2e}"
        err = grad_check(lambda t: (ops.transposed_conv2d(t, w) * cw).sum(), x)
        assert err < GRAD_TOL, f"transposed input grad err {err:.2e}"


def check_grad_pooling():
    for seed in range(5):
        rng = _rng(50 + seed)
        x = _t(rng, 2, 2, 6, 6)
        cw = _t(rng, 2, 2, 3, 3)
        err = grad_check(lambda t: (ops.maxpool2d(t) * cw).sum(), x)
        assert err < GRAD_TOL, f"maxpool grad err {err:.2e}"
        err = grad_check(lambda t: (ops.avgpool2d(t) * cw).sum(), x)
        assert err < GRAD_TOL, f"avgpool grad err {err:.2e}"
        cg = _t(rng, 2, 2)
        err = grad_check(lambda t: (ops.global_avg_pool(t) * cg).sum(), x)
        assert err < GRAD_TOL, f"global avg grad err {err:.2e}"
        err = grad_check(lambda t: (ops.global_max_pool(t) * cg).sum(), x)
        assert err < GRAD_TOL, f"global max grad err {err:.2e}"


def check_grad_conv1d_channels():
    for seed in range(5):
        rng = _rng(60 + seed)
        v = _t(rng, 2, 8)
        w = _t(rng, 3)
        cw = _t(rng, 2, 8)
        err = grad_check(lambda t: (ops.conv1d_channels(v, t) * cw).sum(), w)
        assert err < GRAD_TOL, f"conv1d weight grad err {err:.2e}"
        err = grad_check(lambda t: (ops.conv1d_channels(t, w) * cw).sum(), v)
        assert err < GRAD_TOL, f"conv1d input grad err {err:.2e}"


def check_grad_batchnorm():
    for seed in range(5):
        rng = _rng(70 + seed)
        x = _t(rng, 3, 2, 4, 4)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=2))
        beta = _t(rng, 2)
        cw = _t(rng, 3, 2, 4, 4)
        for training in (True, False):
            rm = rng.normal(size=2)
            rv = rng.uniform(0.5, 2.0, size=2)

            def f(t, training=training, rm=rm, rv=rv):
                out = ops.batchnorm2d(t, gamma, beta, training, rm, rv,
                                      update_running=False)
                return (out * cw).sum()

            err = grad_check(f, x)
            assert err < GRAD_TOL, f"batchnorm x grad err {err:.2e}"
        err = grad_check(
            lambda t: (ops.batchnorm2d(x, t, beta, True, np.zeros(2),
                                       np.ones(2), update_running=False)
                       * cw).sum(), gamma)
        assert err < GRAD_TOL, f"batchnorm gamma grad err {err:.2e}"


def check_grad_activations():
    for seed in range(5):
        rng = _rng(80 + seed)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)) + 0.05)
        cw = _t(rng, 2, 3, 4, 4)
        err = grad_check(lambda t: (ops.sigmoid(t) * cw).sum(), x)
        assert err < GRAD_TOL, f"sigmoid grad err {err:.2e}"
        err = grad_check(lambda t: (ops.sigmoid(ops.relu(t)) * cw).sum(), x)
        assert err < 1e-5, f"relu-sigmoid chain grad err {err:.2e}"
        v = _t(rng, 4, 4)
        err = grad_check(lambda t: (t * t).sum(), v)
        assert err < 1e-8, f"sum-of-squares grad err {err:.2e}"


def check_grad_losses():
    for seed in range(5):
        rng = _rng(90 + seed)
        p = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 6, 6)))
        target = (rng.random((2, 1, 6, 6)) > 0.6).astype(float)
        for fn in (bce_loss, jaccard_loss, seg_loss):
            err = grad_check(lambda t: fn(PixelBatch(t, target)), p)
            assert err < GRAD_TOL, f"{fn.__name__} grad err {err:.2e}"


# --- adjoint identities -----------------------------------------------------

def check_adjoint_linear_ops():
    rng = _rng(7)
    w = rng.normal(size=(4, 3, 3, 3))
    cases = [
        ("conv2d", lambda t: ops.conv2d(t, Tensor(w), padding=1),
         (2, 3, 6, 6), (2, 4, 6, 6)),
        ("depthwise", lambda t: ops.depthwise_conv2d(
            t, Tensor(rng.normal(size=(3, 1, 3, 3))), padding=1),
         (2, 3, 6, 6), (2, 3, 6, 6)),
        ("pointwise", lambda t: ops.pointwise_conv(
            t, Tensor(rng.normal(size=(5, 3, 1, 1)))),
         (2, 3, 4, 4), (2, 5, 4, 4)),
        ("transposed", lambda t: ops.transposed_conv2d(
            t, Tensor(rng.normal(size=(3, 2, 2, 2)))),
         (1, 3, 4, 5), (1, 2, 8, 10)),
        ("avgpool", ops.avgpool2d, (2, 3, 6, 6), (2, 3, 3, 3)),
        ("concat", lambda t: ops.concat_channels([t, Tensor(np.zeros((2, 2, 4, 4)))]),
         (2, 3, 4, 4), (2, 5, 4, 4)),
    ]
    for name, fn, x_shape, y_shape in cases:
        gap = _adjoint_gap(fn, rng.normal(size=x_shape), y_shape)
        assert gap < ADJOINT_TOL, f"{name} adjoint gap {gap:.2e}"


def check_conv_direct_oracle():
    rng = _rng(11)
    for stride, dilation, padding in [(1, 1, 1), (2, 1, 1), (1, 2, 2)]:
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        fast = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                          dilation=dilation, padding=padding).data
        slow = ops.conv2d_direct(x, w, b, stride=stride, dilation=dilation,
                                 padding=padding)
        diff = np.abs(fast - slow).max()
        assert diff < 1e-12, f"patch-gather vs direct loop diff {diff:.2e}"


def check_separable_factorization():
    rng = _rng(13)
    for _ in range(20):
        c = int(rng.integers(1, 6))
        m = int(rng.integers(1, 8))
        h = int(rng.integers(3, 8))
        w = int(rng.integers(3, 8))
        x = Tensor(rng.normal(size=(1, c, h, w)))
        dw = rng.normal(size=(c, 1, 3, 3))
        pw = rng.normal(size=(m, c, 1, 1))
        sep = ops.pointwise_conv(ops.depthwise_conv2d(x, Tensor(dw), padding=1),
                                 Tensor(pw))
        fused = pw[:, :, 0, 0][:, :, None, None] * dw[None, :, 0, :, :]
        std = ops.conv2d(x, Tensor(fused), padding=1)
        diff = np.abs(sep.data - std.data).max()
        assert diff < 1e-10, f"factorization diff {diff:.2e}"


def check_pointwise_equals_1x1_conv():
    rng = _rng(17)
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))
    w = Tensor(rng.normal(size=(3, 4, 1, 1)))
    b = Tensor(rng.normal(size=3))
    diff = np.abs(ops.pointwise_conv(x, w, b).data
                  - ops.conv2d(x, w, b).data).max()
    assert diff < 1e-12, f"pointwise vs 1x1 conv diff {diff:.2e}"


def check_pool_arithmetic():
    block = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert ops.maxpool2d(block).data.item() == 4.0
    assert ops.avgpool2d(block).data.item() == 2.5
    tie = Tensor(np.array([[[[5.0, 5.0], [0.0, 0.0]]]]), requires_grad=True)
    with Tape() as tape:
        s = ops.maxpool2d(tie).sum()
    g = backward(tape, s)[tie]
    assert g.ravel().tolist() == [1.0, 0.0, 0.0, 0.0], "tie must route first"
    chan = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    assert ops.global_avg_pool(chan).data.item() == 2.5
    assert ops.global_max_pool(chan).data.item() == 4.0


def check_attention_invariants():
    assert meca_kernel_size(64) == 3, "k(64) must be 3"
    assert meca_kernel_size(256) == 5, "k(256) must be 5"
    assert meca_kernel_size(2) == 3, "k(2) must clamp to 3"
    rng = _rng(19)
    x = Tensor(rng.normal(size=(2, 8, 5, 5)))
    att = Meca(MecaSpec(8), _rng(3))
    weights = att.attention_weights(x).data
    assert np.all((weights > 0) & (weights < 1)), "gates must lie in (0,1)"
    att.weights.data = np.zeros_like(att.weights.data)
    out = att.forward(x).data
    assert np.array_equal(out, 0.5 * x.data), "zero kernel must halve input"
    const = Tensor(np.full((1, 8, 4, 4), 1.7))
    a = ops.global_avg_pool(const).data
    m = ops.global_max_pool(const).data
    assert np.array_equal(a, m), "constant field: pooling branches must agree"


def check_pyramid_invariants():
    rng = _rng(23)
    spec = AsppSpec(3, 4, rates=(1, 2, 3))
    block = Aspp(spec, _rng(5))
    x = Tensor(rng.normal(size=(1, 3, 6, 9)))
    out = block.forward(x)
    assert out.shape == (1, 4, 6, 9), f"spatial dims changed: {out.shape}"
    # rate-1 degeneracy
    w = Tensor(rng.normal(size=(2, 3, 3, 3)))
    d1 = ops.conv2d(x, w, dilation=1, padding=1).data
    d2 = ops.conv2d(x, w, padding=1).data
    assert np.abs(d1 - d2).max() < 1e-12
    # impulse confinement for a dilated branch
    for rate in (1, 2, 3):
        impulse = np.zeros((1, 1, 9, 9))
        impulse[0, 0, 4, 4] = 1.0
        resp = ops.conv2d(Tensor(impulse), Tensor(np.ones((1, 1, 3, 3))),
                          dilation=rate, padding=rate).data[0, 0]
        ii, jj = np.nonzero(resp)
        cheb = np.maximum(np.abs(ii - 4), np.abs(jj - 4)).max()
        assert cheb == rate, f"rate {rate} response reached radius {cheb}"


def check_loss_oracles():
    n = 24
    half = Tensor(np.full((1, 1, 4, 6), 0.5))
    target = (np.arange(n).reshape(1, 1, 4, 6) % 2).astype(float)
    bce = bce_loss(PixelBatch(half, target)).item()
    assert abs(bce - math.log(2.0)) < 1e-9, f"bce(0.5) = {bce}"
    ones = np.ones((1, 1, 4, 6))
    jd = jaccard_loss(PixelBatch(half, ones)).item()
    assert jd == 0.5, f"jaccard(0.5 vs 1) = {jd}"
    perfect = jaccard_loss(PixelBatch(Tensor(target.copy()), target)).item()
    assert perfect == 0.0, f"jaccard perfect = {perfect}"
    disjoint = jaccard_loss(PixelBatch(Tensor(np.zeros((1, 1, 4, 6))), ones)).item()
    assert disjoint == 1.0, f"jaccard disjoint = {disjoint}"
    batch = PixelBatch(Tensor(np.full((1, 1, 4, 6), 0.3)), target)
    total = seg_loss(batch).item()
    parts = bce_loss(batch).item() + jaccard_loss(batch).item()
    assert total == parts, "seg loss must equal the exact sum of its parts"


def check_metric_oracles():
    rng = _rng(29)
    for _ in range(200):
        pred = rng.random((16, 16))
        gt = (rng.random((16, 16)) > 0.5).astype(np.uint8)
        counts = confusion(pred, gt)
        got = metrics(counts)
        tp = fp = tn = fn = 0
        for i in range(16):
            for j in range(16):
                p = pred[i, j] >= 0.5
                t = gt[i, j] == 1
                tp += p and t
                fp += p and not t
                tn += (not p) and not t
                fn += (not p) and t
        assert (counts.tp, counts.fp, counts.tn, counts.fn) == (tp, fp, tn, fn)
        want = metrics(ConfusionCounts(tp, fp, tn, fn))
        assert all(got[k] == want[k] for k in METRIC_NAMES)
        if got["JA"] > 0:
            assert abs(got["DI"] - 2 * got["JA"] / (1 + got["JA"])) < 1e-12


def check_flop_ratios():
    cost = LayerCost("x", "separable", 32, 32, 3, 64, 128)
    assert cost.standard_macs == 75_497_472
    assert cost.macs == 8_978_432
    assert cost.separable_ratio == Fraction(1152, 137)
    assert Fraction(cost.standard_macs, cost.macs) == Fraction(1152, 137)
    nine = LayerCost("x", "separable", 8, 8, 3, 4, 9)
    assert nine.separable_ratio == Fraction(81, 18)
    one = LayerCost("x", "separable", 8, 8, 1, 4, 7)
    assert one.separable_ratio == Fraction(7, 8) < 1


def check_augment_invariants():
    rng = _rng(31)
    sample = synth_dataset(1, (24, 32), seed=5)[0]
    for op in ("hflip", "vflip"):
        twice = augment(augment(sample, op, rng), op, rng)
        assert np.array_equal(twice.image, sample.image), f"{op} not involutive"
        assert np.array_equal(twice.mask, sample.mask)
        once = augment(sample, op, rng)
        assert once.mask.sum() == sample.mask.sum(), f"{op} changed mask area"
    square = synth_dataset(1, (16, 16), seed=6)[0]
    d = augment(square, "dflip", rng)
    assert np.array_equal(d.mask, square.mask.T), "dflip must transpose"
    rot = augment(sample, "rotate", _rng(1))
    assert set(np.unique(rot.mask)) <= {0, 1}, "rotation broke mask binarity"


ALL_CHECKS = [
    ("grad_conv2d", check_grad_conv2d),
    ("grad_conv2d_strided_dilated", check_grad_conv2d_strided_dilated),
    ("grad_depthwise", check_grad_depthwise),
    ("grad_pointwise", check_grad_pointwise),
    ("grad_transposed", check_grad_transposed),
    ("grad_pooling", check_grad_pooling),
    ("grad_conv1d_channels", check_grad_conv1d_channels),
    ("grad_batchnorm", check_grad_batchnorm),
    ("grad_activations", check_grad_activations),
    ("grad_losses", check_grad_losses),
    ("adjoint_linear_ops", check_adjoint_linear_ops),
    ("conv_direct_oracle", check_conv_direct_oracle),
    ("separable_factorization", check_separable_factorization),
    ("pointwise_equals_1x1_conv", check_pointwise_equals_1x1_conv),
    ("pool_arithmetic", check_pool_arithmetic),
    ("attention_invariants", check_attention_invariants),
    ("pyramid_invariants", check_pyramid_invariants),
    ("loss_oracles", check_loss_oracles),
    ("metric_oracles", check_metric_oracles),
    ("flop_ratios", check_flop_ratios),
    ("augment_invariants", check_augment_invariants),
]


def run_checks(emit=print) -> bool:
    """Run every check; emit one line each; True iff all passed."""
    all_ok = True
    for name, fn in ALL_CHECKS:
        try:
            fn()
        except Exception as exc:  # report and continue
            all_ok = False
            emit(f"FAIL {name}: {exc}")
        else:
            emit(f"ok   {name}")
    return all_ok
