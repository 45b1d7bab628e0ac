"""Self-contained check suites behind the ``selftest`` and ``gradcheck`` subcommands.

Each check raises AssertionError (or any exception) on failure.  These run
without pytest so an installed package can verify itself.
"""
from __future__ import annotations

import math
import struct
import tempfile
import traceback
from pathlib import Path
from typing import Callable

import numpy as np

from . import nd_core as nd
from .attacks import AttackConfig, eot_pgd_attack, fgsm, pgd_attack, project_linf
from .bayes_net import mlp, rand_layer_backward, small_cnn
from .data_io import DataFormatError, load_cifar_bin, load_idx, synth_blobs
from .eval_harness import affinity, parse_grid
from .nd_core import GradTape, NoiseSource, Tensor
from .objectives import kl_gaussian, prior_kl, total_loss
from .train_infer import load_checkpoint, save_checkpoint

Check = Callable[[], None]
TOL = 1e-6


def _rel(a, b) -> float:
    return nd.relative_error(a, b, floor=TOL)


# ---------------------------------------------------------------- gradient checks


def _primitive_checks() -> dict[str, Check]:
    r = np.random.default_rng(0)
    a = r.normal(size=(3, 4))
    b = r.normal(size=(4, 2))
    img = r.normal(size=(2, 2, 5, 5))
    ker = r.normal(size=(3, 2, 3, 3))
    labels = np.array([1, 0, 3])
    cases = {
        "add": ([a, r.normal(size=(1, 4))], lambda x, y: nd.add(x, y)),
        "mul": ([a, r.normal(size=(3, 4))], lambda x, y: nd.mul(x, y)),
        "exp": ([a * 0.5], lambda x: nd.exp(x)),
        "square": ([a], lambda x: nd.square(x)),
        "relu": ([a + 0.05], lambda x: nd.relu(x)),
        "matmul": ([a, b], lambda x, y: nd.matmul(x, y)),
        "transpose": ([a], lambda x: nd.transpose(x)),
        "conv2d": ([img, ker], lambda x, w: nd.conv2d(x, w, 2, 1)),
        "cross_entropy": ([a], lambda x: nd.softmax_cross_entropy(x, labels)),
    }
    checks = {}
    for name, (arrays, op) in cases.items():
        def check(arrays=arrays, op=op):
            # contract each output with a fixed random weight to get a scalar
            probe = np.random.default_rng(1).normal(size=op(*[Tensor(v) for v in arrays]).shape)

            def scalar(*vals):
                return nd.total(nd.mul(op(*vals), Tensor(probe)))

            ts = [Tensor(v, requires_grad=True) for v in arrays]
            with GradTape() as tape:
                out = scalar(*ts)
            grads = tape.gradient(out, ts)
            for i, g in enumerate(grads):
                def f(v, i=i):
                    vals = [Tensor(x) for x in arrays]
                    vals[i] = Tensor(v)
                    return scalar(*vals).item()
                err = _rel(g, nd.finite_diff_grad(f, arrays[i]))
                assert err <= TOL, f"input {i}: relative error {err:.2e}"
        checks[f"primitive {name}"] = check
    return checks


def _network_loss_check(net, x, y, n_tr: int) -> None:
    for p in net.variational_params():
        p.s.data[...] = np.random.default_rng(2).normal(-1.5, 0.3, p.shape)
    eps = net.sample_eps((9, 0, 0, 0)) if net.stochastic else None
    params = net.parameters()
    with GradTape() as tape:
        lb = total_loss(net, x, y, eps, n_tr=n_tr)
    for idx, (p, g) in enumerate(zip(params, tape.gradient(lb.tensor, params))):
        def f(v, p=p):
            old = p.data.copy()
            p.data[...] = v
            try:
                return total_loss(net, x, y, eps, n_tr=n_tr).total
            finally:
                p.data[...] = old
        err = _rel(g, nd.finite_diff_grad(f, p.data))
        assert err <= TOL, f"parameter {idx} {p.shape}: relative error {err:.2e}"


def _check_mlp_loss():
    r = np.random.default_rng(3)
    net = mlp(3, [8], 3, variational=True, sigma0=0.2, alpha=0.5, seed=1, bias=True)
    _network_loss_check(net, r.random((10, 3)), r.integers(0, 3, 10), n_tr=40)


def _check_cnn_loss():
    r = np.random.default_rng(4)
    net = small_cnn((1, 5, 5), 3, variational=True, channels=2, hidden=4, sigma0=0.2, seed=2)
    _network_loss_check(net, r.random((3, 1, 5, 5)), r.integers(0, 3, 3), n_tr=20)


def _check_deterministic_loss():
    r = np.random.default_rng(5)
    net = mlp(4, [6], 2, variational=False, seed=3)
    _network_loss_check(net, r.random((8, 4)), r.integers(0, 2, 8), n_tr=8)


def _check_fused_backward():
    r = np.random.default_rng(6)
    for _ in range(10):
        d_in, d_out, B = r.integers(1, 6, 3)
        sigma0, N = float(r.uniform(0.05, 1.0)), int(r.integers(1, 1000))
        net = mlp(int(d_in), [], int(d_out) + 1, variational=True, sigma0=sigma0, seed=int(r.integers(1 << 30)))
        p = net.variational_params()[0]
        p.s.data[...] = r.normal(-1.0, 0.5, p.shape)
        eps = net.sample_eps((int(r.integers(1 << 30)), 0, 0, 0))
        x = r.random((int(B), int(d_in)))
        y = r.integers(0, int(d_out) + 1, int(B))
        wt = Tensor(p.mu.data + np.exp(p.s.data) * eps[0], requires_grad=True)
        with GradTape() as tape:
            ce = nd.softmax_cross_entropy(nd.matmul(Tensor(x), nd.transpose(wt)), y)
        (grad_w,) = tape.gradient(ce, [wt])
        fused = rand_layer_backward(grad_w, p, eps[0], sigma0, N)
        with GradTape() as tape:
            w = nd.add(p.mu, nd.mul(nd.exp(p.s), Tensor(eps[0])))
            loss = nd.add(nd.softmax_cross_entropy(nd.matmul(Tensor(x), nd.transpose(w)), y),
                          nd.mul(prior_kl(net), Tensor(1.0 / N)))
        auto = tape.gradient(loss, [p.mu, p.s])
        for name, a, b in zip(("mu", "s"), fused, auto):
            err = _rel(a, b)
            assert err <= TOL, f"d/d{name}: relative error {err:.2e}"


def _check_input_gradient():
    from .attacks import input_gradient
    r = np.random.default_rng(7)
    net = mlp(3, [5], 2, variational=True, sigma0=0.3, seed=4)
    eps = net.sample_eps((1, 2, 3, 4))
    x, y = r.random((4, 3)), np.array([0, 1, 1, 0])
    g, _ = input_gradient(net, x, y, eps)
    fd = nd.finite_diff_grad(lambda v: nd.softmax_cross_entropy(net.forward(v, eps), y).item(), x)
    assert _rel(g, fd) <= TOL


def gradcheck_suite() -> dict[str, Check]:
    checks = _primitive_checks()
    checks.update({
        "total_loss mlp (mu, s, bias)": _check_mlp_loss,
        "total_loss cnn (mu, s)": _check_cnn_loss,
        "total_loss deterministic mlp": _check_deterministic_loss,
        "fused layer backward vs autodiff": _check_fused_backward,
        "input gradient": _check_input_gradient,
    })
    return checks


# ---------------------------------------------------------------- property checks


def _check_kl():
    assert kl_gaussian(0, 1, 0, 1) == 0
    assert abs(kl_gaussian(1, 2, 0, 1) - (2 - math.log(2))) < 1e-12
    r = np.random.default_rng(8)
    for _ in range(100):
        ms, mt = r.normal(size=2)
        ss, st = r.uniform(0.05, 3, 2)
        assert kl_gaussian(ms, ss, mt, st) >= 0


def _check_prior_kl():
    net = mlp(3, [4], 2, variational=True, sigma0=0.1, dtype=np.float64)
    expected = sum(np.sum(kl_gaussian(p.mu.data, np.exp(p.s.data), 0, 0.1)) for p in net.variational_params())
    assert abs(prior_kl(net).item() - expected) <= 1e-7 * max(expected, 1)


def _check_attacks():
    r = np.random.default_rng(9)
    net = mlp(4, [8], 3, variational=True, sigma0=0.1, seed=5, dtype=np.float64)
    x0, y = r.random((20, 4)), r.integers(0, 3, 20)
    for gamma in (0.0, 0.01, 0.1, 0.5):
        x = eot_pgd_attack(net, x0, y, AttackConfig(gamma=gamma, k=5), NoiseSource(1))
        assert np.max(np.abs(x - x0)) <= gamma + 1e-7 and x.min() >= 0 and x.max() <= 1
        if gamma == 0:
            assert np.array_equal(x, x0)
    eps = net.sample_eps((0, 0, 0, 0))
    a = fgsm(net, x0, y, 0.05, eps=eps)
    b = pgd_attack(net, x0, y, AttackConfig(gamma=0.05, k=1, step=0.05), eps=eps)
    assert a.tobytes() == b.tobytes()
    net.set_log_std(math.log(1e-7))
    a = eot_pgd_attack(net, x0, y, AttackConfig(gamma=0.1, k=5), NoiseSource(2))
    b = pgd_attack(net, x0, y, AttackConfig(gamma=0.1, k=5), mean=True)
    assert np.max(np.abs(a - b)) <= 1e-5


def _check_projection():
    r = np.random.default_rng(10)
    x0 = r.random(50)
    p = project_linf(x0 + r.normal(0, 1, 50), x0, 0.1, (0, 1))
    assert np.max(np.abs(p - x0)) <= 0.1 + 1e-12 and p.min() >= 0 and p.max() <= 1


def _check_affinity():
    assert abs(affinity(0.9, 0.5, 0.1) - 0.5) < 1e-12
    assert affinity(0.8, 0.3, 0.3) == 1.0
    assert affinity(0.8, 0.8, 0.3) == 0.0
    assert len(parse_grid("0:0.07:0.005")) == 15


def _check_checkpoint():
    net = mlp(3, [5], 2, variational=True, sigma0=0.1)
    x = np.random.default_rng(11).random((10, 3)).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.abnn"
        save_checkpoint(net, path)
        net2, _ = load_checkpoint(path)
    assert net.forward(x, mean=True).data.tobytes() == net2.forward(x, mean=True).data.tobytes()


def _check_loaders():
    with tempfile.TemporaryDirectory() as d:
        img, lab, cif = Path(d) / "i", Path(d) / "l", Path(d) / "c"
        img.write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 1, 2, 255]))
        lab.write_bytes(struct.pack(">II", 0x801, 1) + bytes([4]))
        ds = load_idx(img, lab)
        assert ds.inputs[0, 0, 1, 1] == 1.0 and ds.inputs[0, 0, 0, 1] == np.float32(1) / np.float32(255)
        cif.write_bytes(bytes([7]) + bytes([255]) * 3072)
        ds = load_cifar_bin(cif)
        assert ds.labels[0] == 7 and np.all(ds.inputs == 1)
        cif.write_bytes(bytes(3074))
        try:
            load_cifar_bin(cif)
        except DataFormatError:
            pass
        else:
            raise AssertionError("3074-byte file accepted")


def _check_synthetic():
    a = synth_blobs(60, seed=3)
    b = synth_blobs(60, seed=3)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.inputs.min() >= 0 and a.inputs.max() <= 1


def _check_rng():
    a = nd.rng_normal((1, 2, 3, 4), 1000, np.float64)
    assert np.array_equal(a, nd.rng_normal((1, 2, 3, 4), 1000, np.float64))
    assert not np.array_equal(a, nd.rng_normal((1, 2, 3, 5), 1000, np.float64))


def selftest_suite() -> dict[str, Check]:
    return {
        "kl closed form and sign": _check_kl,
        "prior kl decomposition": _check_prior_kl,
        "attack feasibility and degeneracy": _check_attacks,
        "linf projection": _check_projection,
        "affinity and gamma grid": _check_affinity,
        "checkpoint round trip": _check_checkpoint,
        "idx and cifar fixtures": _check_loaders,
        "synthetic data": _check_synthetic,
        "counter-based rng": _check_rng,
    }


def run_suite(name: str, checks: dict[str, Check], out=print, verbose: bool = False) -> tuple[int, int]:
    """Run every check; returns (passed, total)."""
    passed = 0
    with nd.precision(np.float64):
        for label, fn in checks.items():
            try:
                fn()
            except Exception as e:      # report and keep going
                out(f"FAIL {label}: {type(e).__name__}: {e}")
                if verbose:
                    out(traceback.format_exc())
            else:
                passed += 1
                out(f"ok   {label}")
    out(f"{name}: {passed}/{len(checks)} passed")
    return passed, len(checks)
