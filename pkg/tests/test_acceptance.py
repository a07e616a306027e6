"""Acceptance criteria, one test per criterion.

Each test prints a single ``ACn PASS|FAIL`` line and the terminal summary
repeats the table, so ``pytest tests/test_acceptance.py`` doubles as a report.
"""

import io as _io
import math
import time

import numpy as np

from builders import (
    central_difference,
    conv_sanity_model,
    linear,
    param_count,
    random_model,
    relative_error,
    relu_ramp,
    safe_input,
)
from xplika import Dense, Flatten, Model, save_model_files
from xplika import attribution as A
from xplika import concepts as C
from xplika import featviz as F
from xplika.cli import rerun, run_cli
from xplika.engine import forward, input_gradient, score
from xplika.io import write_tensor
from xplika.metrics import deletion, insertion, mu_fidelity


def run(acceptance, number, title, body):
    try:
        ok, detail = body()
    except Exception as exc:  # a crash is a failed criterion, reported as such
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    acceptance(number, title, ok, detail)


def test_ac1_gradient_oracle(acceptance):
    def body():
        start = time.perf_counter()
        worst = 0.0
        for seed in range(20):
            model = random_model(seed)
            assert len(model.layers) <= 4 and param_count(model) <= 256
            x = safe_input(model, np.random.default_rng(100 + seed))
            for target in range(model.output_dim):
                g = input_gradient(model, x, target)
                fd = central_difference(lambda z: score(model, z, target), x)
                worst = max(worst, relative_error(g, fd))
        elapsed = time.perf_counter() - start
        return worst < 1e-4 and elapsed < 5.0, f"max rel err {worst:.2e}, {elapsed:.2f}s"

    run(acceptance, 1, "gradient oracle on 20 random models", body)


def test_ac2_linear_exactness(acceptance):
    def body():
        worst, worst_lime = 0.0, 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            d = int(rng.integers(2, 9))
            w, x = rng.normal(size=d), rng.normal(size=d)
            model, exact = linear(w, bias=float(rng.normal())), w * x
            for method in ("integrated_gradients", "gradient_input", "occlusion", "kernel_shap"):
                out = A.explain(model, x, 0, A.MethodConfig(method, patch=1))
                worst = max(worst, float(np.abs(out.values - exact).max()))
            lime = A.explain(model, x, 0, A.MethodConfig("lime", kernel_width=math.inf))
            worst_lime = max(worst_lime, float(np.abs(lime.values - exact).max()))
        return worst < 1e-9 and worst_lime < 1e-6, f"exact methods {worst:.1e}, lime {worst_lime:.1e}"

    run(acceptance, 2, "linear exactness of IG, GxI, occlusion, KernelSHAP, LIME", body)


def test_ac3_ig_completeness(acceptance):
    def body():
        model, x = relu_ramp(), np.array([2.0])
        out = A.integrated_gradients(model, x, 0, baseline=0.0, steps=512)
        delta = score(model, x, 0) - score(model, np.zeros(1), 0)
        gap = abs(float(out.values.sum()) - delta)
        return gap < 0.01 * abs(delta), f"gap {gap:.2e} vs delta {delta:.3f}"

    run(acceptance, 3, "integrated gradients completeness at m=512", body)


def test_ac4_rise_expectation(acceptance):
    def body():
        model, x = linear([1.0, 3.0]), np.ones(2)
        a = A.rise(model, x, 0, n_samples=10_000, keep_prob=0.5, seed=0)
        b = A.rise(model, x, 0, n_samples=10_000, keep_prob=0.5, seed=0)
        err = float(np.abs(a.values - [2.5, 3.5]).max())
        same = a.values.tobytes() == b.values.tobytes()
        return err <= 0.1 and same, f"map {np.round(a.values, 4).tolist()}, repeat identical={same}"

    run(acceptance, 4, "RISE closed-form expectation and determinism", body)


def test_ac5_sobol_oracle(acceptance):
    def body():
        out = A.sobol_attribution(linear([1.0, 2.0]), np.ones(2), 0, n_samples=4096, seed=0)
        err = float(np.abs(out.values - [0.2, 0.8]).max())
        total = float(out.values.sum())
        return err <= 0.05 and abs(total - 1.0) <= 0.05, f"S_T {np.round(out.values, 4).tolist()}, sum {total:.4f}"

    run(acceptance, 5, "Sobol total indices on the additive fixture", body)


def test_ac6_metric_hand_values(acceptance):
    def body():
        w = np.array([1.0, 2.0, 3.0])
        d = deletion(linear(w), np.ones(3), 0, w, steps=3).auc
        i = insertion(linear(w), np.ones(3), 0, w, steps=3).auc
        wm = np.array([0.5, -1.0, 2.0, 1.5, -0.3, 0.8, 1.1, -2.2, 0.4, 0.9])
        xm = np.linspace(-1.0, 1.5, 10)
        up = mu_fidelity(linear(wm), xm, 0, wm * xm, seed=3)
        down = mu_fidelity(linear(wm), xm, 0, -wm * xm, seed=3)
        ok = (abs(d - 7 / 3) < 1e-12 and abs(i - 11 / 3) < 1e-12
              and abs(up - 1.0) < 1e-12 and abs(down + 1.0) < 1e-12)
        return ok, f"deletion {d!r}, insertion {i!r}, mu {up:.12f}/{down:.12f}"

    run(acceptance, 6, "deletion, insertion and mu-fidelity hand values", body)


def test_ac7_feature_visualization(acceptance):
    def body():
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 36))
        model = Model([Flatten("flat"), Dense("fc", w)], [1, 6, 6])
        res = F.optimize(model, F.Objective([F.neuron("fc", 1)]), param="pixel", steps=500, seed=0)
        raw = res.raw.reshape(-1)
        cos = float(raw @ w[1] / (np.linalg.norm(raw) * np.linalg.norm(w[1])))

        grey = bool(np.all(F.decode_fourier(F.FourierBuffer.zeros((3, 8, 8))) == 0.5))

        buf = F.FourierBuffer(0.3 * rng.normal(size=(1, 8, 8, 2)))
        probe = rng.normal(size=(1, 8, 8))

        def loss(spectrum):
            return float(np.sum(probe * F.decode_fourier(F.FourierBuffer(spectrum, buf.decay, buf.scale))))

        fd_err = relative_error(F.decode_fourier_vjp(buf, probe), central_difference(loss, buf.spectrum))
        return cos >= 0.99 and grey and fd_err < 1e-4, f"cos {cos:.5f}, zero->0.5 {grey}, decode FD {fd_err:.1e}"

    run(acceptance, 7, "feature visualization alignment and Fourier decode", body)


def test_ac8_concepts(acceptance):
    def body():
        v = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
        probe = lambda sign: Model([Dense("L", np.eye(3)), Dense("out", sign * v[None, :])], [3])
        cav = C.CAV("L", v, 1.0, 0, 0.0)
        examples = [np.random.default_rng(i).normal(size=3) for i in range(8)]
        t_up = C.tcav_score(probe(1.0), "L", cav, examples, 0)
        t_down = C.tcav_score(probe(-1.0), "L", cav, examples, 0)

        rng = np.random.default_rng(0)
        shift = np.zeros(8)
        shift[0] = 3.0
        pos = C.ActivationSet("L", shift + rng.normal(size=(100, 8)))
        neg = C.ActivationSet("L", -shift + rng.normal(size=(100, 8)))
        fitted = C.fit_cav(pos, neg, seed=0)
        cos = float(fitted.vector[0])

        rng = np.random.default_rng(5)
        model = conv_sanity_model(1)
        x = rng.normal(size=(1, 6, 6))
        direction = rng.normal(size=108)
        dir_cav = C.CAV("conv", direction / np.linalg.norm(direction), 1.0, 0, 0.0)
        grid = C.cav_spatial_map(model, x, "conv", dir_cav).extras["grid"]
        act = forward(model, x, capture=["conv"]).captured["conv"].reshape(-1)
        sum_err = abs(float(grid.sum()) - float(act @ dir_cav.vector))

        ok = (t_up == 1.0 and t_down == 0.0 and fitted.held_out_accuracy >= 0.99
              and cos >= 0.9 and sum_err < 1e-12)
        return ok, (f"tcav {t_up}/{t_down}, accuracy {fitted.held_out_accuracy:.3f}, "
                    f"cos {cos:.4f}, map sum err {sum_err:.1e}")

    run(acceptance, 8, "TCAV planted directions, CAV fit and spatial map", body)


def test_ac9_randomization_sanity(acceptance):
    def body():
        model = conv_sanity_model(0)
        x = np.random.default_rng(1).uniform(size=(1, 6, 6))
        original = A.saliency(model, x, 0).values
        fc = model.layer("fc")
        rng = np.random.default_rng(99)
        shuffled = model.replace_layer("fc", Dense("fc", rng.normal(size=fc.weight.shape) / 6.0, fc.bias))
        randomized = A.saliency(shuffled, x, 0).values
        dist = float(np.linalg.norm(randomized - original))
        ref = float(np.linalg.norm(original))
        return dist > 0.1 * ref, f"L2 change {dist:.4f} vs 0.1*norm {0.1 * ref:.4f}"

    run(acceptance, 9, "saliency changes when the final dense layer is randomized", body)


def _cli_runs(d):
    """Every subcommand once, as (argv, output files that must be reproduced)."""
    model = conv_sanity_model(0)
    save_model_files(model, d / "m.json", d / "m.bin")
    rng = np.random.default_rng(0)
    write_tensor(d / "x.xtns", rng.uniform(size=(1, 6, 6)))
    write_tensor(d / "pos.xtns", rng.uniform(size=(12, 1, 6, 6)) + 0.5)
    write_tensor(d / "neg.xtns", rng.uniform(size=(12, 1, 6, 6)))
    m = ["--model", d / "m.json", "--weights", d / "m.bin"]
    runs = []
    for method in A.METHODS:
        extra = {"rise": ["--samples", 300], "lime": ["--samples", 80], "sobol": ["--samples", 64],
                 "smoothgrad": ["--samples", 16], "squaregrad": ["--samples", 16], "vargrad": ["--samples", 16],
                 "grad_cam": ["--conv-layer", "conv"], "grad_cam_pp": ["--conv-layer", "conv"],
                 "integrated_gradients": ["--steps", 32]}.get(method, [])
        runs.append(["explain", *m, "--input", d / "x.xtns", "--method", method, *extra, "--seed", 5,
                     "--out", d / f"{method}.xtns"])
    runs.append(["metric", *m, "--kind", "deletion", "--input", d / "x.xtns", "--map", d / "saliency.xtns",
                 "--out", d / "del.xtns"])
    runs.append(["metric", *m, "--kind", "mu_fidelity", "--input", d / "x.xtns", "--map", d / "saliency.xtns",
                 "--seed", 2, "--out", d / "mu.xtns"])
    runs.append(["metric", *m, "--kind", "stability", "--input", d / "x.xtns", "--method", "rise",
                 "--samples", 100, "--trials", 3, "--seed", 4, "--out", d / "stab.xtns"])
    runs.append(["featviz", *m, "--objective", "conv:channel:0", "--steps", 20, "--jitter", 1,
                 "--scale-range", "0.9,1.1", "--seed", 3, "--out", d / "fv.xtns"])
    runs.append(["cav-fit", *m, "--layer", "conv", "--positives", d / "pos.xtns", "--negatives", d / "neg.xtns",
                 "--epochs", 50, "--seed", 1, "--out", d / "cav.xtns"])
    runs.append(["tcav", *m, "--cav", d / "cav.xtns", "--examples", d / "pos.xtns", "--out", d / "tcav.xtns"])
    runs.append(["cav-map", *m, "--cav", d / "cav.xtns", "--input", d / "x.xtns", "--out", d / "cavmap.xtns"])
    return [[str(a) for a in argv] for argv in runs]


def test_ac10_cli_reproducibility(acceptance, tmp_path, monkeypatch):
    def body():
        monkeypatch.setenv("XPLIKA_THREADS", "1")
        runs = _cli_runs(tmp_path)
        for argv in runs:
            err = _io.StringIO()
            if run_cli(argv, _io.StringIO(), err) != 0:
                return False, f"{argv[0]} failed: {err.getvalue().strip()}"
        mismatches = []
        for threads in ("1", "4"):
            monkeypatch.setenv("XPLIKA_THREADS", threads)
            for argv in runs:
                out = argv[argv.index("--out") + 1]
                replay = f"{out}.t{threads}"
                if rerun(out + ".json", out=replay, stdout=_io.StringIO(), stderr=_io.StringIO()) != 0:
                    mismatches.append(f"{argv[0]} rerun failed")
                    continue
                pairs = [(out, replay)]
                if argv[0] == "featviz":
                    pairs.append((out + ".traj.xtns", replay + ".traj.xtns"))
                for a, b in pairs:
                    with open(a, "rb") as fa, open(b, "rb") as fb:
                        if fa.read() != fb.read():
                            mismatches.append(f"{a} at {threads} threads")
        return not mismatches, f"{len(runs)} runs x 2 thread counts" + (f"; {mismatches}" if mismatches else "")

    run(acceptance, 10, "CLI reruns from sidecars are byte-identical", body)
