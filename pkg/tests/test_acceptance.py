"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``; the summary block at
the end of the pytest run repeats every line.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from lipnet.cli import PRESETS, lipcheck, load_config, run_training
from lipnet.constraint import ConstraintConfig, project_exact, project_matrix
from lipnet.layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    MaxPool,
    Network,
    ReLU,
    Residual,
    Softmax,
    compute_loss,
    mlp,
)
from lipnet.modelio import dumps_model, gen_synthetic, load_model, save_model
from lipnet.norms import (
    INF,
    L1,
    L2,
    LINF,
    NormKind,
    audit,
    conv_norm_is_exact,
    conv_power,
    dense_power,
    empirical_lipschitz,
    explicit_conv_matrix,
    flattened_kernel_matrix,
    opnorm_l1_conv,
    opnorm_l1_dense,
    opnorm_linf_conv,
    opnorm_linf_dense,
    power_method,
)
from lipnet.optim import AMSGrad, TrainConfig, train
from lipnet.tensor import ConvGeometry
from oracles import brute_l1_opnorm, brute_linf_opnorm, central_diff_grad, jacobi_sigma_max, rel_error

RESULTS = []


@contextmanager
def criterion(n, title, limit=None):
    rec = {"n": n, "title": title, "ok": False, "detail": "", "seconds": 0.0}
    RESULTS.append(rec)
    t0 = time.perf_counter()
    try:
        yield rec
        rec["seconds"] = time.perf_counter() - t0
        if limit is not None:
            assert rec["seconds"] < limit, f"took {rec['seconds']:.1f} s, limit {limit} s"
        rec["ok"] = True
    finally:
        rec["seconds"] = time.perf_counter() - t0
        print(f"\ncriterion {n}: {'PASS' if rec['ok'] else 'FAIL'}  {title}  ({rec['seconds']:.1f} s) {rec['detail']}")


# ---------------------------------------------------------------------------


def test_c01_dense_norm_oracles():
    with criterion(1, "dense-norm oracle equivalence", limit=5) as rec:
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(200):
            W = rng.standard_normal(rng.integers(1, 9, size=2))
            assert opnorm_l1_dense(W) == brute_l1_opnorm(W)
            assert opnorm_linf_dense(W) == brute_linf_opnorm(W)
            sigma = dense_power(W, NormKind(2, max_iters=1000, tol=1e-9), rng).sigma
            ref = jacobi_sigma_max(W)
            err = abs(sigma - ref) / ref
            worst = max(worst, err)
            assert err <= 1e-8
        rec["detail"] = f"worst l2 rel err {worst:.1e}"


def _random_conv(rng):
    c_in, c_out = (int(v) for v in rng.integers(1, 5, size=2))
    k = int(rng.integers(1, 4))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    n = int(rng.integers(max(k - 2 * p, 1), 9))
    return rng.standard_normal((c_out, c_in, k, k)), ConvGeometry(s, p), (c_in, n, n)


def test_c02_conv_norm_oracles():
    with criterion(2, "conv-norm oracle equivalence", limit=30) as rec:
        rng = np.random.default_rng(202)
        worst, exact_cases = 0.0, 0
        for _ in range(100):
            F, geom, shape = _random_conv(rng)
            M = explicit_conv_matrix(F, geom, shape)
            x0 = rng.standard_normal(shape)
            x0 /= np.linalg.norm(x0)
            norm = NormKind(2, max_iters=1000, tol=1e-9, warm_start=x0)
            a = conv_power(F, geom, shape, norm).sigma
            b = dense_power(M, NormKind(2, max_iters=1000, tol=1e-9, warm_start=x0.ravel())).sigma
            err = abs(a - b) / max(b, 1e-300)
            worst = max(worst, err)
            assert err <= 1e-6
            for p, formula, true in ((1, opnorm_l1_conv(F), opnorm_l1_dense(M)),
                                     (INF, opnorm_linf_conv(F), opnorm_linf_dense(M))):
                if geom.stride == (1, 1) and conv_norm_is_exact(F.shape[2:], geom, shape[1:], p):
                    exact_cases += 1
                    assert abs(formula - true) <= 1e-12 * max(1.0, true)
                else:
                    assert formula >= true - 1e-12
        rec["detail"] = f"worst l2 rel err {worst:.1e}; {exact_cases} exact l1/linf cases"


def test_c03_power_underestimates():
    with criterion(3, "power-method underestimate property") as rec:
        rng = np.random.default_rng(303)
        mats = [rng.standard_normal(rng.integers(1, 9, size=2)) for _ in range(50)]
        convs = []
        for _ in range(20):
            F, geom, shape = _random_conv(rng)
            convs.append((F, geom, shape, np.linalg.svd(explicit_conv_matrix(F, geom, shape), compute_uv=False)[0]))
        refs = [jacobi_sigma_max(W) for W in mats]
        worst = -math.inf
        for n in range(1, 51):
            for W, ref in zip(mats, refs):
                est = dense_power(W, NormKind(2, max_iters=n, tol=1e-300), np.random.default_rng(n)).sigma
                worst = max(worst, est - ref)
                assert est <= ref + 1e-12
            for F, geom, shape, ref in convs:
                est = conv_power(F, geom, shape, NormKind(2, max_iters=n, tol=1e-300), np.random.default_rng(n)).sigma
                worst = max(worst, est - ref)
                assert est <= ref + 1e-12
        rec["detail"] = f"max(estimate - sigma) {worst:.1e}"


def test_c04_flattened_matrix_discrepancy():
    with criterion(4, "flattened-kernel vs conv-operator spectral norm", limit=10) as rec:
        rng = np.random.default_rng(404)
        gaps = []
        for _ in range(20):
            F = rng.standard_normal((2, 2, 3, 3))
            sU = np.linalg.svd(flattened_kernel_matrix(F), compute_uv=False)[0]
            sW = np.linalg.svd(explicit_conv_matrix(F, ConvGeometry(1, 1), (2, 8, 8)), compute_uv=False)[0]
            gaps.append(abs(sU - sW) / sW)
        rec["detail"] = f"max relative gap {max(gaps):.3f}, {sum(g > 0.05 for g in gaps)}/20 above 0.05"
        assert max(gaps) > 0.05


def test_c05_projection_suite():
    with criterion(5, "projection properties over 500 cases") as rec:
        rng = np.random.default_rng(505)
        fns = {1: opnorm_l1_dense, INF: opnorm_linf_dense}
        for case in range(500):
            W = rng.standard_normal(rng.integers(1, 9, size=2)) * 10.0 ** rng.uniform(-2, 2)
            lam = 10.0 ** rng.uniform(-1, 1)
            p = (1, INF, 2)[case % 3]
            if p == 2:
                sigma = np.linalg.svd(W, compute_uv=False)[0]
                out = project_matrix(W, lam, sigma)
                after = np.linalg.svd(out, compute_uv=False)[0]
                assert abs(after - min(sigma, lam)) <= 1e-12 * max(1.0, lam)
                twice = project_matrix(out, lam, after)
            else:
                out = project_exact(W, lam, fns[p])
                after, before = fns[p](out), fns[p](W)
                assert abs(after - min(before, lam)) <= 1e-12 * max(1.0, lam)
                twice = project_exact(out, lam, fns[p])
                assert twice.tobytes() == out.tobytes()
            c = float(out.ravel() @ W.ravel()) / float(W.ravel() @ W.ravel())
            assert 0 < c <= 1
            np.testing.assert_allclose(out, c * W, rtol=1e-13, atol=0)
            Z = np.zeros_like(W)
            assert project_exact(Z, lam, opnorm_l1_dense) is Z
            feasible = W / (fns[1](W) / lam) / 2
            assert project_exact(feasible, lam, opnorm_l1_dense) is feasible
        rec["detail"] = "idempotent, direction-preserving, min(norm, lambda), no-ops"


def _mixed_network(rng):
    return Network(
        [
            Conv2D(rng.standard_normal((2, 1, 3, 3)), rng.standard_normal(2), 1, 1),
            BatchNorm(rng.uniform(0.5, 2, 2), rng.standard_normal(2), rng.standard_normal(2), rng.uniform(0.5, 2, 2)),
            ReLU(),
            MaxPool(2, 2),
            Dense(rng.standard_normal((3, 8)), rng.standard_normal(3)),
        ],
        (1, 4, 4),
    )


def _layer_cases(rng):
    return [
        (Dense(rng.standard_normal((3, 4)), rng.standard_normal(3)), (4,), "eval"),
        (Conv2D(rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2), 2, 1), (2, 5, 5), "eval"),
        (ReLU(), (5,), "eval"),
        (MaxPool(2, 1), (2, 4, 4), "eval"),
        (BatchNorm(rng.uniform(0.5, 2, 3), rng.standard_normal(3), rng.standard_normal(3), rng.uniform(0.5, 2, 3)),
         (3,), "eval"),
        (BatchNorm(rng.uniform(0.5, 2, 3), rng.standard_normal(3)), (3,), "train"),
        (Dropout(0.6), (4,), "train"),
        (Softmax(), (4,), "eval"),
        (Residual([Dense(rng.standard_normal((3, 3))), ReLU(), Dense(rng.standard_normal((3, 3)))]), (3,), "eval"),
        (_mixed_network(rng), None, "eval"),
    ]


def _grad_error(model, in_shape, mode, rng):
    if isinstance(model, Network):
        in_shape = model.input_shape
        fwd = lambda x: model.forward(x, mode, np.random.default_rng(0))
        bwd = model.backward
        params = list(model.named_parameters())
    else:
        fwd = lambda x: model.forward(x, mode, np.random.default_rng(0))
        bwd = model.backward
        params = list(model.named_parameters())
    x = rng.standard_normal((3, *in_shape))
    out, cache = fwd(x)
    w = rng.standard_normal(out.shape)
    f = lambda xx: float(np.sum(fwd(xx)[0] * w))
    _, cache = fwd(x)
    gx, grads = bwd(cache, w)
    errs = [rel_error(gx, central_diff_grad(f, x))]
    for name, p in params:
        def fp(pp, p=p):
            saved = p.copy()
            p[...] = pp
            try:
                return f(x)
            finally:
                p[...] = saved

        errs.append(rel_error(grads[name], central_diff_grad(fp, p)))
    return max(errs)


def test_c06_gradient_checks():
    with criterion(6, "gradient checks, all layer kinds + 5-layer network", limit=60) as rec:
        worst = 0.0
        for trial in range(20):
            rng = np.random.default_rng(600 + trial)
            for model, shape, mode in _layer_cases(rng):
                err = _grad_error(model, shape, mode, rng)
                worst = max(worst, err)
                assert err < 1e-5, (type(model).__name__, trial, err)
        rec["detail"] = f"worst rel err {worst:.1e}"


def test_c07_training_feasibility():
    with criterion(7, "per-step feasibility, 3-layer MLP, lambda=2") as rec:
        rng = np.random.default_rng(707)
        x = rng.uniform(-1, 1, size=(200, 4))
        ds = type("D", (), {"inputs": x, "targets": np.sin(3 * x.sum(axis=1, keepdims=True))})
        details = []
        for norm in (L1, L2, LINF):
            net = mlp([4, 32, 32, 1], np.random.default_rng(7))
            steps = []

            def check(step, net, norm=norm):
                steps.append(step)
                if norm.p != 2:
                    fn = opnorm_l1_dense if norm.p == 1 else opnorm_linf_dense
                    for layer in net.layers[::2]:
                        assert fn(layer.W) <= 2 + 1e-12

            cfg = TrainConfig(epochs=10, batch_size=40, optimizer=AMSGrad(0.05), constraint=ConstraintConfig(2.0, norm))
            train(net, ds, cfg, check)
            assert len(steps) == 50
            if norm.p == 2:
                sig = max(audit(net, (2,))[2].bounds[::2])
                assert sig <= 2 * 1.1
                details.append(f"l2 max sigma {sig:.4f}")
        rec["detail"] = "; ".join(details)


def _mse(net, ds):
    return float(np.mean((net(ds.inputs) - ds.targets) ** 2))


@pytest.mark.slow
def test_c08_synthetic_experiment():
    with criterion(8, "synthetic experiment at desk scale (h=128)", limit=600) as rec:
        ds = gen_synthetic(1000, -5.0, 5.0, seed=0)
        # (a) unconstrained fit
        net, _ = run_training(load_config("desk-fit"), ds, None, INF)
        mse_inf = _mse(net, ds)
        # (b) l-inf, lambda = 2: empirical slope <= lambda^3
        net2, _ = run_training(load_config("desk"), ds, "linf", 2.0)
        grid = np.linspace(-5, 5, 10_000)[:, None]
        pred = net2(grid)[:, 0]
        fd_slope = float(np.max(np.abs(np.diff(pred)) / np.diff(grid[:, 0])))
        emp = empirical_lipschitz(net2, INF, (-5.0, 5.0), 10_000, np.random.default_rng(8))
        # (c) underfitting trend
        trend = {}
        for norm in ("l1", "l2", "linf"):
            lo = _mse(run_training(load_config("desk"), ds, norm, 1.0)[0], ds)
            hi = _mse(run_training(load_config("desk"), ds, norm, 16.0)[0], ds)
            trend[norm] = (lo, hi)
        rec["detail"] = (
            f"(a) mse {mse_inf:.5f}; (b) fd slope {fd_slope:.3f}, empirical {emp:.3f}; (c) "
            + ", ".join(f"{k}: {a:.4f} > {b:.4f}" for k, (a, b) in trend.items())
        )
        assert mse_inf < 0.01
        assert fd_slope <= 8 and emp <= 8
        for a, b in trend.values():
            assert a > b


def _random_small_network(rng):
    d = int(rng.integers(2, 5))
    layers = []
    width = d
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.integers(0, 4)
        if kind == 0:
            w = int(rng.integers(2, 6))
            layers += [Dense(rng.standard_normal((w, width)), rng.standard_normal(w)), ReLU()]
            width = w
        elif kind == 1:
            layers.append(Residual([Dense(rng.standard_normal((width, width)) * 0.7), ReLU(),
                                    Dense(rng.standard_normal((width, width)) * 0.7)]))
        elif kind == 2:
            layers.append(BatchNorm(rng.uniform(0.2, 3, width), rng.standard_normal(width),
                                    rng.standard_normal(width), rng.uniform(0.1, 2, width)))
        else:
            layers.append(Dropout(float(rng.uniform(0.3, 1.0))))
    layers.append(Dense(rng.standard_normal((int(rng.integers(1, 4)), width))))
    return Network(layers, (d,))


def test_c09_lipcheck_soundness():
    with criterion(9, "lipcheck lower <= audited upper on 50 networks") as rec:
        rng = np.random.default_rng(909)
        tightest = 0.0
        for i in range(50):
            net = _random_small_network(rng)
            for p in (1, 2, INF):
                lower, upper = lipcheck(net, p, pairs=1000, box=(-2.0, 2.0), seed=i)
                assert lower <= upper + 1e-6, (i, p, lower, upper)
                tightest = max(tightest, lower / upper)
        rec["detail"] = f"max lower/upper {tightest:.3f}"


def test_c10_serialisation(tmp_path):
    with criterion(10, "save/load bit-identical and audit-invariant") as rec:
        rng = np.random.default_rng(1010)
        nets = [mlp([1, 16, 16, 1], rng), _mixed_network(rng), _random_small_network(rng), Network([], (2,))]
        train(nets[0], gen_synthetic(100), TrainConfig(epochs=2, constraint=ConstraintConfig(2.0, L2)))
        for k, net in enumerate(nets):
            path = tmp_path / f"m{k}.json"
            save_model(net, path)
            back = load_model(path)
            assert dumps_model(back) == path.read_text()
            for (na, a), (nb, b) in zip(net.named_parameters(), back.named_parameters()):
                assert na == nb and a.tobytes() == b.tobytes()
            ra, rb = audit(net), audit(back)
            for p in ra:
                assert ra[p].bounds == rb[p].bounds and ra[p].network_bound == rb[p].network_bound
        rec["detail"] = f"{len(nets)} models"
