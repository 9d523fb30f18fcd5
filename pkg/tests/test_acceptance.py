"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or directly with
``python tests/test_acceptance.py``. The desk-scale ablation (criteria 5
and 7) trains 2 x 25 models and takes roughly half an hour on one core.
"""

import csv
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _graphs import random_cnn  # noqa: E402
from hefriendly import KDParams, TransitionSchedule, kd_loss, lambda_at_epoch, soft_targets  # noqa: E402
from hefriendly.activations import PolyCoeffs, trainable_poly  # noqa: E402
from hefriendly.autodiff import Tensor, no_grad, ops  # noqa: E402
from hefriendly.autodiff.gradcheck import finite_difference_check  # noqa: E402
from hefriendly.estimator import load_model_config  # noqa: E402
from hefriendly.graph import (  # noqa: E402
    LayerNode,
    ModelGraph,
    finalize_he_friendly,
    fold_batch_norm,
    he_lint,
    layer_count,
    multiplicative_depth,
    relu_maxpool_baseline,
)
from hefriendly.harness.config import TrainConfig  # noqa: E402
from hefriendly.harness.runner import read_summary, run_experiment  # noqa: E402


RESULTS = []


def report(label, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {label}" + (f": {detail}" if detail else "")
    RESULTS.append(line)
    print(line, flush=True)
    return ok


# -- 1. exact formulas -------------------------------------------------------------


def brute_lambda(e0, d, e):
    if e - e0 <= 0:
        return 0.0
    if e - e0 < d:
        return (e - e0) / d
    return 1.0


def check_exact_formulas():
    t0 = time.perf_counter()
    lam_ok = all(
        lambda_at_epoch(TransitionSchedule(e0, d), e) == brute_lambda(e0, d, e)
        for e0, d in ((0, 1), (3, 10), (5, 2))
        for e in range(51)
    )
    rng = np.random.default_rng(1)
    sum_err = shift_err = ce_err = 0.0
    for _ in range(200):
        z = rng.normal(0, rng.uniform(0.1, 30), size=(8, int(rng.integers(2, 10))))
        tau = float(rng.uniform(0.1, 50))
        q = soft_targets(z, tau).data
        sum_err = max(sum_err, np.max(np.abs(q.sum(axis=1) - 1)))
        c = rng.normal(0, 100, size=(8, 1))
        shift_err = max(shift_err, np.max(np.abs(soft_targets(z + c, tau).data - q)))
        y = rng.integers(0, z.shape[1], 8)
        ce = ops.cross_entropy(Tensor(z), y).item()
        ce_err = max(ce_err, abs(kd_loss(Tensor(z), rng.normal(size=z.shape), y, KDParams(tau, 0.0)).item() - ce))
    elapsed = time.perf_counter() - t0
    ok = lam_ok and sum_err <= 1e-12 and shift_err <= 1e-12 and ce_err <= 1e-12 and elapsed < 10
    return report("C1 exact formulas", ok,
                  f"lambda grid exact={lam_ok} row-sum err={sum_err:.1e} shift err={shift_err:.1e} "
                  f"kd(alpha=0)-CE={ce_err:.1e} in {elapsed:.2f}s")


def test_c1_exact_formulas():
    assert check_exact_formulas()


# -- 2. gradients ------------------------------------------------------------------


def _signed(rng, shape, low=0.2):
    return rng.uniform(low, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _p(x, name):
    return Tensor(x, requires_grad=True, name=name)


def _project(out, R):
    return ops.sum(ops.mul(out, Tensor(R)))


def _case(kind, rng):
    """Return (loss_fn, params) for one random instance of primitive ``kind``."""
    n, m = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    if kind in ("add", "sub", "mul"):
        a, b = _p(rng.normal(size=(n, m)), "a"), _p(rng.normal(size=(n, m)), "b")
        R = rng.normal(size=(n, m))
        return lambda: _project(getattr(ops, kind)(a, b), R), [a, b]
    if kind == "scale":
        x, c, R = _p(rng.normal(size=(n, m)), "x"), float(rng.normal()), rng.normal(size=(n, m))
        return lambda: _project(ops.scale(x, c), R), [x]
    if kind in ("sum", "mean"):
        x = _p(rng.normal(size=(n, m)), "x")
        return lambda: ops.square(getattr(ops, kind)(x)), [x]
    if kind == "reshape":
        x, R = _p(rng.normal(size=(n, m)), "x"), rng.normal(size=(m, n))
        return lambda: _project(ops.reshape(x, (m, n)), R), [x]
    if kind == "flatten":
        x, R = _p(rng.normal(size=(n, 2, 3)), "x"), rng.normal(size=(n, 6))
        return lambda: _project(ops.flatten(x), R), [x]
    if kind in ("relu", "square"):
        x, R = _p(_signed(rng, (n, m)), "x"), rng.normal(size=(n, m))
        return lambda: _project(getattr(ops, kind)(x), R), [x]
    if kind == "quadratic":
        x, R = _p(rng.normal(size=(n, m)), "x"), rng.normal(size=(n, m))
        a, b = rng.normal(size=2)
        return lambda: _project(ops.quadratic(x, a, b), R), [x]
    if kind == "poly_act":
        x, R = _p(rng.normal(size=(n, m)), "x"), rng.normal(size=(n, m))
        a, b = _p(rng.normal(size=1), "a"), _p(rng.normal(size=1), "b")
        return lambda: _project(ops.poly_act(x, a, b), R), [x, a, b]
    if kind == "trainable_poly":
        x, R = _p(rng.normal(size=(n, m)), "x"), rng.normal(size=(n, m))
        c = PolyCoeffs.create(*rng.normal(size=2), name="act")
        return lambda: _project(trainable_poly(x, c), R), [x, c.a, c.b]
    if kind == "weighted_act":
        x, R = _p(_signed(rng, (n, m)), "x"), rng.normal(size=(n, m))
        a, b = _p(rng.normal(size=1), "a"), _p(rng.normal(size=1), "b")
        lam = float(rng.uniform(0, 1))
        return lambda: _project(ops.weighted_act(x, lam, a, b), R), [x, a, b]
    if kind == "dropout":
        x, R = _p(rng.normal(size=(n, m)), "x"), rng.normal(size=(n, m))
        seed = int(rng.integers(1 << 30))
        return lambda: _project(ops.dropout(x, 0.3, np.random.default_rng(seed)), R), [x]
    if kind in ("log_softmax", "softmax"):
        x, R = _p(rng.normal(size=(n, m)), "x"), rng.normal(size=(n, m))
        return lambda: _project(getattr(ops, kind)(x), R), [x]
    if kind == "cross_entropy":
        x, y = _p(rng.normal(size=(n, m)), "x"), rng.integers(0, m, n)
        return lambda: ops.cross_entropy(x, y), [x]
    if kind == "kd_loss":
        x, t, y = _p(rng.normal(size=(n, m)), "x"), rng.normal(size=(n, m)), rng.integers(0, m, n)
        p = KDParams(float(rng.uniform(1, 10)), float(rng.uniform(0, 1)))
        return lambda: kd_loss(x, t, y, p), [x]
    if kind == "dense":
        k = int(rng.integers(2, 5))
        x, W, b = _p(rng.normal(size=(n, m)), "x"), _p(rng.normal(size=(k, m)), "W"), _p(rng.normal(size=k), "b")
        R = rng.normal(size=(n, k))
        return lambda: _project(ops.dense(x, W, b), R), [x, W, b]
    if kind == "conv2d":
        c, o, k = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), str(rng.choice(["same", "valid"]))
        x = _p(rng.normal(size=(n, c, 5, 6)), "x")
        K, b = _p(rng.normal(size=(o, c, k, k)), "K"), _p(rng.normal(size=o), "b")
        shape = ops.conv2d(x, K, b, stride, pad).shape
        R = rng.normal(size=shape)
        return lambda: _project(ops.conv2d(x, K, b, stride, pad), R), [x, K, b]
    if kind in ("avg_pool2d", "max_pool2d"):
        w, s = int(rng.integers(2, 4)), int(rng.integers(1, 3))
        # Distinct, well separated values keep max-pool away from ties.
        vals = rng.permutation(n * 2 * 36).astype(float) * 0.1
        x = _p(vals.reshape(n, 2, 6, 6), "x")
        fn = getattr(ops, kind)
        R = rng.normal(size=fn(x, (w, w), s).shape)
        return lambda: _project(fn(x, (w, w), s), R), [x]
    if kind in ("batch_norm_eval", "batch_norm_train"):
        c = int(rng.integers(1, 4))
        x = _p(rng.normal(size=(4, c, 3, 3)), "x")
        g, be = _p(rng.uniform(0.5, 2, c), "gamma"), _p(rng.normal(size=c), "beta")
        rm, rv = rng.normal(size=c), rng.uniform(0.5, 2, c)
        train = kind.endswith("train")
        R = rng.normal(size=(4, c, 3, 3))

        def loss():
            return _project(ops.batch_norm(x, g, be, rm.copy(), rv.copy(), 1e-5, training=train), R)

        return loss, [x, g, be]
    raise KeyError(kind)


PRIMITIVES = ("add", "sub", "mul", "scale", "sum", "mean", "reshape", "flatten", "relu", "square",
              "quadratic", "poly_act", "trainable_poly", "weighted_act", "dropout", "log_softmax", "softmax",
              "cross_entropy", "kd_loss", "dense", "conv2d", "avg_pool2d", "max_pool2d",
              "batch_norm_eval", "batch_norm_train")


def check_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, worst_kind = 0.0, None
    for kind in PRIMITIVES:
        for _ in range(20):
            fn, params = _case(kind, rng)
            err = finite_difference_check(fn, params, step=1e-5).max_rel_error
            if err > worst:
                worst, worst_kind = err, kind
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    return report("C2 gradients", ok, f"{len(PRIMITIVES)} primitives x 20 instances, max rel error "
                  f"{worst:.2e} ({worst_kind}) in {elapsed:.1f}s")


def test_c2_gradients():
    assert check_gradients()


# -- 3. batch-norm folding ------------------------------------------------------------


def check_bn_fold():
    t0 = time.perf_counter()
    nodes = [
        LayerNode("bn", "batch_norm", {"eps": 0.0, "num_features": 1},
                  params={"gamma": Tensor([2.0]), "beta": Tensor([1.0])},
                  buffers={"running_mean": np.array([0.0]), "running_var": np.array([1.0])}),
        LayerNode("fc", "dense", {"in_features": 1, "out_features": 1},
                  params={"weight": Tensor([[3.0]]), "bias": Tensor([0.0])}),
    ]
    fc = fold_batch_norm(ModelGraph(nodes, (1,)))["fc"]
    scalar_ok = fc.params["weight"].data[0, 0] == 6.0 and fc.params["bias"].data[0] == 3.0
    rng = np.random.default_rng(33)
    worst = 0.0
    for _ in range(10):
        g = random_cnn(rng)
        folded = fold_batch_norm(g)
        x = Tensor(rng.uniform(-10, 10, size=(100, 2, 9, 9)))
        with no_grad():
            worst = max(worst, float(np.max(np.abs(folded.forward(x).data - g.forward(x).data))))
    elapsed = time.perf_counter() - t0
    ok = scalar_ok and worst < 1e-9 and elapsed < 30
    return report("C3 batch-norm fold", ok,
                  f"scalar W'=6,b'=3 exact={scalar_ok}; 10 CNNs x 100 inputs max abs diff {worst:.1e} "
                  f"in {elapsed:.1f}s")


def test_c3_bn_fold():
    assert check_bn_fold()


# -- 4. static analysis ----------------------------------------------------------------


def check_static():
    t0 = time.perf_counter()
    g = ModelGraph.from_config(load_model_config("alexnet_he"))
    count = layer_count(g)
    depth = multiplicative_depth(fold_batch_norm(g)).total
    final_v = he_lint(finalize_he_friendly(g))
    base_v = he_lint(relu_maxpool_baseline(g))
    elapsed = time.perf_counter() - t0
    ok = count == 21 and depth == 18 and final_v == [] and len(base_v) >= 10 and elapsed < 5
    return report("C4 static analysis", ok,
                  f"layers={count} folded depth={depth} finalized violations={len(final_v)} "
                  f"baseline violations={len(base_v)} in {elapsed:.2f}s")


def test_c4_static():
    assert check_static()


# -- 6. end-to-end pipeline ------------------------------------------------------------


def check_pipeline(work: Path):
    from click.testing import CliRunner

    from hefriendly.cli import main

    cli = CliRunner()
    cfg = resources.files("hefriendly.configs").joinpath("tp_st_kd.yaml")
    out = work / "pipeline"
    train = cli.invoke(main, ["train", "--config", str(cfg), "--out", str(out)])
    ckpt = out / "tp_st_kd" / "seed111.ckpt"
    fin = work / "finalized.ckpt"
    final = cli.invoke(main, ["finalize", str(ckpt), "-o", str(fin)])
    lint = cli.invoke(main, ["lint", str(fin)])
    before = cli.invoke(main, ["eval", "--checkpoint", str(ckpt)])
    after = cli.invoke(main, ["eval", "--checkpoint", str(fin)])
    if any(r.exit_code != 0 for r in (train, final, before, after)):
        return report("C6 end-to-end pipeline", False,
                      " | ".join(r.output.strip() for r in (train, final, before, after)))
    acc_before = float(before.output.split()[1])
    acc_after = float(after.output.split()[1])
    ok = lint.exit_code == 0 and lint.output == "" and abs(acc_before - acc_after) <= 1e-6
    return report("C6 end-to-end pipeline", ok,
                  f"lint output {lint.output.strip()!r}, accuracy {acc_before:.6f} -> {acc_after:.6f}")


def test_c6_pipeline(tmp_path):
    assert check_pipeline(tmp_path)


# -- 5 and 7. desk-scale ablation -----------------------------------------------------


def run_ablation(out: Path):
    cfg = TrainConfig.shipped("ablation")
    t0 = time.perf_counter()
    run_experiment(cfg, out)
    return time.perf_counter() - t0


def check_ablation(out: Path, elapsed: float):
    rows = {r["arm"]: r for r in read_summary(out / "summary.csv")}
    mean = {a: float(r["acc_mean"]) for a, r in rows.items()}
    std = {a: float(r["acc_std"]) for a, r in rows.items()}
    failures = {a: int(r["failure_count"]) for a, r in rows.items()}
    base, tp, st, sq, kd = ("baseline_relu_maxpool", "tp", "tp_st", "square", "tp_st_kd")
    checks = [
        ("C5a baseline mean >= 0.85", mean[base] >= 0.85, f"{mean[base]:.4f}"),
        ("C5b TP+ST within 6 points of baseline", abs(mean[st] - mean[base]) <= 0.06,
         f"TP+ST {mean[st]:.4f} vs baseline {mean[base]:.4f}"),
        ("C5c TP+ST std <= TP std", std[st] <= std[tp], f"{std[st]:.4f} vs {std[tp]:.4f}"),
        ("C5d square >= 10 points below TP+ST or >= 2/5 diverged",
         mean[sq] <= mean[st] - 0.10 or failures[sq] >= 2,
         f"square {mean[sq]:.4f} ({failures[sq]} diverged) vs TP+ST {mean[st]:.4f}"),
        ("C5e TP+ST+KD >= TP+ST - 1 point", mean[kd] >= mean[st] - 0.01,
         f"{mean[kd]:.4f} vs {mean[st]:.4f}"),
        ("C5 runtime < 30 min", elapsed < 1800, f"{elapsed / 60:.1f} min"),
    ]
    return all([report(label, ok, detail) for label, ok, detail in checks])


def check_reproducible(first: Path, second: Path):
    names = ("metrics.csv", "summary.csv", "epochs.csv")
    same = {n: (first / n).read_bytes() == (second / n).read_bytes() for n in names}
    return report("C7 reproducibility", all(same.values()),
                  ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in same.items()))


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    return out, run_ablation(out)


@pytest.mark.slow
def test_c5_ablation(ablation):
    out, elapsed = ablation
    with (out / "summary.csv").open() as f:
        for row in csv.DictReader(f):
            print(row)
    assert check_ablation(out, elapsed)


@pytest.mark.slow
def test_c7_reproducible(ablation, tmp_path):
    out, _ = ablation
    run_ablation(tmp_path)
    assert check_reproducible(out, tmp_path)


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        results = [check_exact_formulas(), check_gradients(), check_bn_fold(), check_static(),
                   check_pipeline(d)]
        elapsed = run_ablation(d / "a")
        results.append(check_ablation(d / "a", elapsed))
        run_ablation(d / "b")
        results.append(check_reproducible(d / "a", d / "b"))
    sys.exit(0 if all(results) else 1)
