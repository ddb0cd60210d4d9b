"""One check per headline acceptance criterion; each records a PASS/FAIL line via ``accept``."""
import time

import numpy as np
from scipy.stats import binomtest, ks_2samp
from threadpoolctl import threadpool_limits

import harness
from gradcheck import KINK_STATS, check_inputs, check_parameters, jitter_biases
from precipsr.layers import (Conv2DParams, ResampleSpec, conv2d, dense, inverse_pixel_shuffle, pixel_shuffle, pool,
                             resample, transposed_conv2d)
from precipsr.metrics import forecast_indicators, mae, pearson, rmse, ssim
from precipsr.model import ModelConfig, build_model, checkpoint_bytes, forward
from precipsr.statdown import EmpiricalCDF, bcsd_values, qm_values
from precipsr.tensor import Tensor, concat, elementwise, matmul, reduce, window2d
from precipsr.training import ArrayDataset, TrainConfig, train
from test_layers import conv_loops


def test_gradient_suite(accept):
    rng = np.random.default_rng(0)
    t0 = time.monotonic()
    cases = {
        "conv2d": (lambda x, k, b: conv2d(x, Conv2DParams(k, b)),
                   [rng.normal(size=(2, 5, 4, 3)), rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2)]),
        "conv2d_stride2": (lambda x, k, b: conv2d(x, Conv2DParams(k, b, stride=2)),
                           [rng.normal(size=(1, 6, 5, 2)), rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)]),
        "transposed_conv2d": (lambda x, k, b: transposed_conv2d(x, Conv2DParams(k, b), 2),
                              [rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)]),
        "dense": (dense, [rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)]),
        "pixel_shuffle": (lambda x: pixel_shuffle(x, 2), [rng.normal(size=(1, 2, 3, 8))]),
        "inverse_pixel_shuffle": (lambda x: inverse_pixel_shuffle(x, 2), [rng.normal(size=(1, 4, 4, 2))]),
        "resample_bilinear": (lambda x: resample(x, ResampleSpec("bilinear", 3)), [rng.normal(size=(1, 3, 2, 2))]),
        "resample_bicubic": (lambda x: resample(x, ResampleSpec("bicubic", 2)), [rng.normal(size=(1, 3, 3, 1))]),
        "matmul": (matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "concat": (lambda a, b: concat([a, b], axis=3), [rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 2, 2, 1))]),
        "window2d": (lambda a: window2d(a, -1, 1, 4, 2), [rng.normal(size=(1, 3, 4, 1))]),
    }
    for kind in ("global_max", "global_avg", "channel_max", "channel_avg"):
        cases[f"pool_{kind}"] = (lambda x, kind=kind: pool(kind, x), [rng.normal(size=(2, 3, 4, 3))])
    for kind in ("relu", "sigmoid", "expm1"):
        a = rng.uniform(0.1, 1.5, size=(2, 3, 3)) * rng.choice([-1, 1], size=(2, 3, 3))
        cases[kind] = (lambda x, kind=kind: elementwise(kind, x), [a])
    cases["log1p"] = (lambda x: elementwise("log1p", x), [rng.uniform(0.1, 2.0, size=(2, 3, 3))])
    for kind in ("add", "sub", "mul"):
        cases[kind] = (lambda x, y, kind=kind: elementwise(kind, x, y),
                       [rng.normal(size=(2, 3, 4)), rng.normal(size=(1, 3, 1))])
    for kind in ("sum", "mean", "max"):
        cases[f"reduce_{kind}"] = (lambda x, kind=kind: reduce(kind, x, [1, 2]), [rng.normal(size=(2, 3, 4, 2))])
    errors = {name: check_inputs(fn, arrays) for name, (fn, arrays) in cases.items()}

    cfg = ModelConfig(scale_factor=2, backbone_layers=4, filters=8, target_shape=(8, 6))
    model = build_model(cfg, seed=10)
    x = Tensor(np.log1p(rng.gamma(0.7, 4.0, size=(2, 4, 3, 1))))
    elev = Tensor(np.log1p(rng.uniform(0, 2000, size=(1, 8, 6, 1))))
    jitter_biases(model.params, seed=10)
    before = dict(KINK_STATS)
    model_errors = check_parameters(lambda: forward(model, x, elev), model.params)
    errors.update({f"model/{k}": v for k, v in model_errors.items()})
    kinks = {k: KINK_STATS[k] - before[k] for k in KINK_STATS}
    elapsed = time.monotonic() - t0
    worst = max(errors, key=errors.get)
    accept("gradient suite", errors[worst] < 1e-2 and elapsed < 120,
           f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e} (< 1e-2), {elapsed:.1f}s (< 120s); "
           f"model FD samples {kinks['samples']}: {kinks['redrawn']} redrawn off a ReLU kink, "
           f"{kinks['smaller_step']} needed a step below 1e-3")


def test_convolution_oracle(accept):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        n, h, w = rng.integers(1, 3), rng.integers(1, 8), rng.integers(1, 8)
        ci, co = rng.integers(1, 4), rng.integers(1, 4)
        ksz = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        x = rng.normal(size=(n, h, w, ci)).astype(np.float32)
        k = rng.normal(size=(ksz, ksz, ci, co)).astype(np.float32)
        b = rng.normal(size=co).astype(np.float32)
        got = conv2d(Tensor(x), Conv2DParams(Tensor(k), Tensor(b), stride=stride)).data
        worst = max(worst, float(np.abs(got - conv_loops(x, k, b, stride)).max()))
    accept("convolution oracle", worst <= 1e-5, f"50 random cases, max abs diff {worst:.2e} (<= 1e-5)")


def test_pixel_shuffle_round_trip(accept):
    rng = np.random.default_rng(2)
    exact = 0
    for _ in range(100):
        r = int(rng.integers(1, 6))
        c = int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5)), r * r * c))
        x = x.astype(np.float32)
        up = pixel_shuffle(Tensor(x), r)
        exact += np.array_equal(inverse_pixel_shuffle(up, r).data, x) and \
            np.array_equal(pixel_shuffle(inverse_pixel_shuffle(up, r), r).data, up.data)
    layout = pixel_shuffle(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)), 2).data[0, :, :, 0]
    ok_layout = layout.tolist() == [[1, 2], [3, 4]]
    accept("pixel-shuffle round trip", exact == 100 and ok_layout,
           f"{exact}/100 exact round trips; 1x1x1x4 layout {layout.tolist()}")


def test_shape_law(accept):
    results = []
    for r in (2, 4, 5, 8):
        target = (66, 41) if r == 5 else (round(66 * r / 5), round(41 * r / 5))
        cfg = ModelConfig(scale_factor=r, backbone_layers=2, filters=4, cab_mlp_nodes=8, target_shape=target)
        model = build_model(cfg, seed=r)
        elev = Tensor(np.zeros((1,) + target + (1,)))
        for lr in ((9, 14), (14, 9)):
            out = forward(model, Tensor(np.ones((1,) + lr + (1,))), elev).shape
            results.append((r, lr, out, out == (1,) + target + (1,)))
    bad = [x for x in results if not x[3]]
    detail = ", ".join(f"r={r} {lr[0]}x{lr[1]}->{o[1]}x{o[2]}" for r, lr, o, _ in results)
    accept("shape law", not bad, detail)


def test_qm_identity_and_distribution(accept):
    rng = np.random.default_rng(3)
    F = EmpiricalCDF(rng.gamma(0.8, 3.0, 500))
    grid = [[F]]
    nodes = F.nodes
    ident = max(abs(qm_values(np.array([[v]]), grid, grid)[0, 0] - v) for v in nodes)
    n = 2000
    ref = rng.gamma(0.9, 6.0, n)
    biased = 1.7 * rng.gamma(0.9, 6.0, n) + 2.0
    fresh = 1.7 * rng.gamma(0.9, 6.0, n) + 2.0
    fb, fr = [[EmpiricalCDF(biased)] * 50] * 40, [[EmpiricalCDF(ref)] * 50] * 40
    corrected = qm_values(fresh.reshape(40, 50), fb, fr).ravel()
    ks = ks_2samp(corrected, ref).statistic
    accept("QM identity and distribution matching", ident < 1e-9 and ks < 0.05,
           f"identity max err {ident:.1e} over {nodes.size} nodes; KS of {n} fresh corrected draws vs reference {ks:.4f} (< 0.05), "
           f"KS before {ks_2samp(biased, ref).statistic:.3f}")


def test_bcsd_algebra(accept):
    rng = np.random.default_rng(4)
    y_l = rng.gamma(1.0, 3.0, (14, 9))
    y_h = rng.gamma(1.0, 3.0, (66, 41))
    zero_anomaly = np.array_equal(bcsd_values(y_l.copy(), y_l, y_h, 5), y_h)
    x_cor = np.array([[2.0, 0.0], [5.0, 1.0]])
    yl = np.array([[1.0, 1.0], [2.0, 3.0]])
    yh = np.arange(1.0, 17.0).reshape(4, 4) / 4
    M = np.array([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    symbolic = np.maximum(yh + (M @ (x_cor - yl) @ M.T) * yh / (M @ yl @ M.T + 1), 0)
    err = float(np.abs(bcsd_values(x_cor, yl, yh, 2) - symbolic).max())
    accept("BCSD algebra", zero_anomaly and err <= 1e-6,
           f"zero anomaly returns Y_h exactly: {zero_anomaly}; 2x2->4x4 max err {err:.1e} (<= 1e-6)")


def test_metrics_identities(accept):
    rng = np.random.default_rng(5)
    x = rng.gamma(0.6, 8.0, (30, 20))
    y = rng.gamma(0.6, 8.0, (30, 20))
    self_mae, self_ssim = mae(x, x), ssim(x, x)
    affine = abs(pearson(2.5 * x + 3.0, y) - pearson(x, y))
    ordered = 0
    for _ in range(1000):
        a, b = rng.gamma(0.7, 5.0, (8, 6)), rng.gamma(0.7, 5.0, (8, 6))
        ordered += mae(a, b) <= rmse(a, b)
    obs = np.zeros((10, 10))
    obs[4, 4] = 2.0
    pod = forecast_indicators(np.full((10, 10), 5.0), obs)[0]
    ok = self_mae == 0 and abs(self_ssim - 1) < 1e-12 and affine < 1e-6 and ordered == 1000 and pod == 1.0
    accept("metrics identities", ok, f"mae(x,x)={self_mae}, ssim(x,x)={self_ssim:.12f}, pearson affine diff "
                                     f"{affine:.1e}, mae<=rmse {ordered}/1000, POD wet-everywhere {pod}")


def test_end_to_end_ordering(accept):
    with threadpool_limits(1):
        score = harness.run(0, n_days=400, backbone=8, filters=16, epochs=40, learning_rate=1e-3, with_qm=True,
                            max_seconds=13 * 60)
    ok = score.model_mae < score.bilinear_mae and score.model_mae < score.qm_mae and score.train_seconds < 15 * 60
    accept("end-to-end ordering", ok,
           f"test MAE model {score.model_mae:.3f} < bilinear {score.bilinear_mae:.3f}, < QM {score.qm_mae:.3f}; "
           f"{score.epochs} epochs in {score.train_seconds:.0f}s (< 900s)")


def test_topography_ablation(accept):
    seeds = range(7)
    wins, pairs = 0, []
    with threadpool_limits(1):
        for seed in seeds:
            on = harness.run(seed, n_days=300, backbone=4, filters=8, epochs=40, learning_rate=2e-3, topo=True)
            off = harness.run(seed, n_days=300, backbone=4, filters=8, epochs=40, learning_rate=2e-3, topo=False)
            pairs.append((on.model_mae, off.model_mae))
            wins += on.model_mae < off.model_mae
    p = binomtest(wins, len(pairs), 0.5, alternative="greater").pvalue
    detail = " ".join(f"{a:.3f}/{b:.3f}" for a, b in pairs)
    accept("topography ablation", p < 0.1, f"on<off in {wins}/{len(pairs)} seeds, sign test p={p:.4f} (< 0.1); "
                                           f"MAE on/off: {detail}")


def _toy(n, seed):
    rng = np.random.default_rng(seed)
    x = np.log1p(rng.gamma(0.8, 3.0, (n, 4, 3, 1))).astype(np.float32)
    y = (1.3 * np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)).astype(np.float32)
    return ArrayDataset(x, y, np.log1p(rng.uniform(0, 1000, (1, 8, 6, 1))).astype(np.float32))


def _tiny():
    return ModelConfig(scale_factor=2, backbone_layers=2, filters=4, cab_mlp_nodes=8, target_shape=(8, 6))


def test_early_stopping(accept):
    outcomes = []
    for patience in (1, 4, 9):
        model = build_model(_tiny(), seed=0)
        losses = iter(np.arange(1.0, 100.0))
        snaps = []

        def worsening(m, d):
            snaps.append(m.state_arrays())
            return float(next(losses))

        result = train(model, _toy(8, 0), _toy(4, 1),
                       TrainConfig(epochs_max=100, batch_size=4, patience=patience, learning_rate=1e-2),
                       val_loss_fn=worsening)
        now = model.state_arrays()
        restored = all(np.array_equal(now[k], snaps[0][k]) for k in now)
        outcomes.append((patience, len(result.history), restored))
    ok = all(n == p + 1 and restored for p, n, restored in outcomes)
    accept("early stopping", ok, "; ".join(f"patience {p}: {n} epochs, best restored {r}" for p, n, r in outcomes))


def test_determinism(accept):
    runs = []
    for _ in range(2):
        with threadpool_limits(1):
            model = build_model(_tiny(), seed=5)
            res = train(model, _toy(24, 2), _toy(6, 3),
                        TrainConfig(epochs_max=6, batch_size=5, patience=5, learning_rate=2e-3, seed=11))
        runs.append((np.array(res.history, dtype=np.float64), checkpoint_bytes(model)))
    diff = float(np.abs(runs[0][0] - runs[1][0]).max())
    same = runs[0][1] == runs[1][1]
    accept("determinism", diff <= 1e-6 and same,
           f"loss history max diff {diff:.1e} (<= 1e-6); checkpoints byte-identical: {same}")
