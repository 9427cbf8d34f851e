"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from emobev.corpus import cv_split, shuffle_labels
from emobev.dsp import (
    IDX_DF0,
    IDX_ENERGY,
    IDX_F0,
    IDX_NCCF,
    Waveform,
    extract_features,
    fft_mag2,
    inverse_mfcc,
    mfcc,
    pitch_track,
)
from emobev.metrics import (
    BEHAVIORS,
    ConfusionCounts,
    Prediction,
    aggregate_folds,
    mcnemar,
    pur,
    uncertainty,
    weighted_accuracy,
)
from emobev.models import (
    ERModel,
    ReducedContextModel,
    _pool_flat,
    load_checkpoint,
    param_checksum,
    save_checkpoint,
)
from emobev.nn import (
    GRU,
    Conv1d,
    Linear,
    PReLU,
    adaptive_max_pool1d,
    avg_pool1d,
    dropout,
    gru_cell,
    output_length,
    receptive_field,
)
from emobev.optim import cross_entropy_2class, masked_bce_logits, mse_loss
from emobev.pipelines import (
    TrainConfig,
    epochs_to_reach,
    train_behavior_context,
    train_behavior_reduced,
    train_ec,
    train_er,
)
from emobev.synth import SyntheticEmotionSpec, SyntheticRuleSpec, audit_histograms, synth_behavior_corpus, synth_emotion_corpus
from emobev.tensor import Tensor, grad_check, grad_check_report, mul, no_grad, relu, sigmoid, tanh, tsum

SR = 16000


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def er():
    corpus = synth_emotion_corpus(SyntheticEmotionSpec(), 700, seed=0)
    train = [u for u in corpus if u.split == "train"]
    valid = [u for u in corpus if u.split == "valid"]
    model, hist = train_er(train, valid, TrainConfig(lr=1e-3, epochs=15, seed=0))
    return model, hist, train, valid


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def _layer_cases(rng):
    x3 = Tensor(rng.normal(size=(2, 3, 11)))
    w, b = Tensor(rng.normal(size=(4, 3, 3))), Tensor(rng.normal(size=4))
    p_conv = Tensor(rng.normal(size=(2, 4, 6)))
    p_pool = Tensor(rng.normal(size=(2, 3, 5)))
    p_max = Tensor(rng.normal(size=(2, 3, 1)))
    x2 = Tensor(rng.normal(size=(3, 6)))
    x2.data[np.abs(x2.data) < 1e-3] = 0.1
    lin = Linear(6, 4, rng)
    p_lin = Tensor(rng.normal(size=(3, 4)))
    p_act = Tensor(rng.normal(size=(3, 6)))
    act = PReLU()
    gru = GRU(3, 4, 2, rng)
    xs = Tensor(rng.normal(size=(2, 5, 3)))
    p_gru = Tensor(rng.normal(size=(2, 5, 4)))
    h = Tensor(rng.normal(size=(2, 4)))
    xc = Tensor(rng.normal(size=(2, 3)))
    p_cell = Tensor(rng.normal(size=(2, 4)))
    drop_seed = int(rng.integers(1 << 30))
    tgt = Tensor(rng.normal(size=(3, 6)))
    y2 = rng.integers(0, 2, 3)
    yb, mb = rng.integers(0, 2, (3, 6)), rng.random((3, 6)) < 0.6
    mb[0, 0] = True
    return {
        "conv1d": (lambda t: tsum(mul(_conv(w, b)(t), p_conv)), x3, [w, b]),
        "avg_pool1d": (lambda t: tsum(mul(avg_pool1d(t, 2, 2), p_pool)), x3, []),
        "adaptive_max_pool1d": (lambda t: tsum(mul(adaptive_max_pool1d(t), p_max)), x3, []),
        "linear": (lambda t: tsum(mul(lin(t), p_lin)), x2, [lin.weight, lin.bias]),
        "relu": (lambda t: tsum(mul(relu(t), p_act)), x2, []),
        "prelu": (lambda t: tsum(mul(act(t), p_act)), x2, [act.slope]),
        "sigmoid": (lambda t: tsum(mul(sigmoid(t), p_act)), x2, []),
        "tanh": (lambda t: tsum(mul(tanh(t), p_act)), x2, []),
        "dropout": (lambda t: tsum(mul(dropout(t, 0.4, True, drop_seed), p_act)), x2, []),
        "gru": (lambda t: tsum(mul(gru(t)[0], p_gru)), xs, gru.parameters()),
        "gru_cell": (lambda t: tsum(mul(gru_cell(t, h, gru.w_ih[0], gru.w_hh[0], gru.b[0]), p_cell)),
                     xc, [h]),
        "mse_loss": (lambda t: mse_loss(t, tgt), x2, []),
        "cross_entropy_2class": (lambda t: cross_entropy_2class(_first2(t), y2), x2, []),
        "masked_bce_logits": (lambda t: masked_bce_logits(t, yb, mb), x2, []),
    }


def _conv(w, b):
    c = Conv1d(3, 4, 3, stride=2, padding=1)
    c.weight, c.bias = w, b
    return c


def _first2(t):
    from emobev.tensor import take
    return take(t, (slice(None), slice(0, 2)))


def test_criterion_1_gradients(report):
    start = time.time()
    worst = {}
    for seed in range(20):
        for name, (f, x, wrt) in _layer_cases(np.random.default_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(f, x, wrt=wrt))
    er_worst, checked, kinks = 0.0, 0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = ERModel(seed)
        model.norm.fit(rng.normal(size=(84, 200)))
        x = rng.normal(size=(2, 84, 60))
        target = Tensor(rng.normal(size=(2, 6)))
        params = model.trainable_parameters()
        # the input normalizer is fixed preprocessing, so every trainable tensor is checked instead of x
        rep = grad_check_report(lambda _: mse_loss(model(x), target), params[0], wrt=params[1:],
                                max_coords=8, seed=seed, kink_tol=1e-4)
        er_worst = max(er_worst, rep.max_error)
        checked, kinks = checked + rep.n_checked, kinks + rep.n_kinks
    worst["er_network"] = er_worst
    elapsed = time.time() - start
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    top = max(worst, key=worst.get)
    report(1, not bad and kinks <= 0.01 * checked and elapsed < 120,
           f"{len(worst)} checks x 20 instances, max rel. error {worst[top]:.2e} ({top}), "
           f"network coords {checked} checked / {kinks} skipped at kinks, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 2. shape / receptive-field oracle
# ---------------------------------------------------------------------------

def _rf_oracle(layers):
    """Receptive field by explicit back-projection of one output index."""
    lo, hi = 0, 0
    for k, s in reversed(layers):
        lo, hi = lo * s, hi * s + k - 1
    return hi - lo + 1


def test_criterion_2_shapes_and_rf(report):
    er = ERModel(0)
    lengths, L = [], 100
    for block in er.convs:
        L = output_length(L, block.conv.kernel, block.conv.stride)
        lengths.append(L)
    with no_grad():
        fmap = er.feature_map(np.zeros((1, 84, 100)))
    rf, sec = receptive_field(er.stack())
    oracle = _rf_oracle([(b.conv.kernel, b.conv.stride) for b in er.convs])
    reduced = [ReducedContextModel(n) for n in range(5)]
    rfs = [m.receptive_field()[0] for m in reduced]
    oracles = [_rf_oracle([(s.kernel, s.stride) for s in m.stack() if s.kind in ("conv", "avgpool")])
               for m in reduced]
    counts = [m.num_trainable() for m in reduced]
    ok = (lengths == [46, 21, 9, 4] and fmap.shape == (1, 128, 4) and rf == oracle == 50
          and math.isclose(sec, 0.5) and rfs == oracles
          and all(a < b for a, b in zip(rfs, rfs[1:])) and len(set(counts)) == 1)
    report(2, ok, f"lengths {lengths}, ER RF {rf} frames ({sec:.2f} s), reduced RF {rfs}, "
                  f"trainable params {counts[0]} for every pool count")


# ---------------------------------------------------------------------------
# 3. metric exactness
# ---------------------------------------------------------------------------

def test_criterion_3_metrics(report):
    rng = np.random.default_rng(0)
    errs = []
    for _ in range(200):
        tp, tn, fp, fn = (int(v) for v in rng.integers(1, 60, 4))
        oracle = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
        errs.append(abs(weighted_accuracy(ConfusionCounts(tp, tn, fp, fn)) - oracle))
        p, q = rng.random(2)
        ent = lambda v: -(v * math.log(v) + (1 - v) * math.log(1 - v)) / math.log(2)
        errs.append(abs(uncertainty(p) - ent(p)))
        errs.append(abs(pur(p, q) - (ent(p) - ent(q))))
        b, c = (int(v) for v in rng.integers(0, 13, 2))
        if b + c:
            errs.append(abs(mcnemar(b, c) - min(1.0, stats.binomtest(b, b + c, 0.5).pvalue)))
    chi_errs = []
    for _ in range(200):
        b, c = (int(v) for v in rng.integers(13, 80, 2))
        chi2 = (abs(b - c) - 1) ** 2 / (b + c)
        chi_errs.append(abs(mcnemar(b, c) - math.erfc(math.sqrt(chi2 / 2))))
    accs = [61.07, 63.21, 59.64, 59.29, 58.93]
    preds = [Prediction(f"s{i}", b, 1, 1.0 if i < round(a * 100) else -1.0, 0)
             for b, a in enumerate(accs) for i in range(10000)]
    avg = aggregate_folds(preds)["average"]
    u = uncertainty(0.6043)
    ok = (max(errs) < 1e-10 and max(chi_errs) < 1e-6 and abs(u - 0.9685) < 2e-4
          and abs(avg - 60.43) < 0.01)
    report(3, ok, f"analytic max err {max(errs):.1e}, chi-square max err {max(chi_errs):.1e}, "
                  f"uncertainty(0.6043) = {u:.5f}, average {avg:.4f}")


# ---------------------------------------------------------------------------
# 4. DSP correctness
# ---------------------------------------------------------------------------

def test_criterion_4_dsp(report):
    start = time.time()
    rng = np.random.default_rng(0)
    fft_err = 0.0
    for n in (1, 7, 64, 255, 400, 512):
        x = rng.normal(size=n)
        k = np.arange(n // 2 + 1)[:, None]
        ref = np.abs((x * np.exp(-2j * np.pi * k * np.arange(n) / n)).sum(axis=1)) ** 2
        fft_err = max(fft_err, np.max(np.abs(fft_mag2(x) - ref)) / np.max(ref))
    v = rng.normal(size=(50, 40))
    dct_err = np.max(np.abs(inverse_mfcc(mfcc(v)) - v))
    pitch_ok, pitch_worst = True, 0.0
    for f in (80, 100, 133, 180, 220, 275, 330, 400):
        t = np.arange(SR) / SR
        f0 = pitch_track(Waveform(0.5 * np.sin(2 * np.pi * f * t)))[0]
        est = np.median(f0[f0 > 0])
        tol = max(5.0, f - SR / (SR / f + 1))
        pitch_worst = max(pitch_worst, abs(est - f))
        pitch_ok &= abs(est - f) <= tol
    t = np.arange(SR) / SR
    w = 0.2 * np.sin(2 * np.pi * 170 * t) + 0.01 * rng.normal(size=SR)
    a = extract_features(Waveform(w))
    c = 3.0
    b = extract_features(Waveform(c * w))
    shift = 2 * math.log(c)  # amplitude c is power c^2
    shift_err = max(np.max(np.abs(b[:40] - a[:40] - shift)), np.max(np.abs(b[IDX_ENERGY] - a[IDX_ENERGY] - shift)))
    inv_err = max(np.max(np.abs(a[i] - b[i])) for i in (IDX_F0, IDX_DF0, IDX_NCCF))
    elapsed = time.time() - start
    ok = (fft_err <= 1e-8 and dct_err <= 1e-10 and pitch_ok and shift_err < 1e-9 and inv_err < 1e-9
          and elapsed < 60)
    report(4, ok, f"FFT rel err {fft_err:.1e}, DCT round-trip {dct_err:.1e}, worst pitch error "
                  f"{pitch_worst:.2f} Hz, log shift err {shift_err:.1e}, pitch invariance {inv_err:.1e}, "
                  f"{elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 5. context separation
# ---------------------------------------------------------------------------

BEH_CFG = dict(batch_size=1, patience=100, seed=0)


def test_criterion_5_context_separation(report, er):
    model, _, _, _ = er
    start = time.time()
    order = synth_behavior_corpus(SyntheticRuleSpec(rule_kind="order_dependent"), 200, seed=0)
    bag = synth_behavior_corpus(SyntheticRuleSpec(rule_kind="bag_based"), 200, seed=0)
    divergence = audit_histograms(order, 0)["max_divergence"]
    f_order, f_bag = cv_split(order, 10, 5, seed=0), cv_split(bag, 10, 5, seed=0)
    ctx_cfg = TrainConfig(lr=1e-3, epochs=6, **BEH_CFG)
    red_cfg = TrainConfig(lr=1e-3, epochs=15, **BEH_CFG)
    acc = {
        "order/ebp4": train_behavior_context("ebp", order, f_order, ctx_cfg, l=4, er=model),
        "order/reduced0": train_behavior_reduced(0, order, f_order, red_cfg, model),
        "bag/ebp4": train_behavior_context("ebp", bag, f_bag, ctx_cfg, l=4, er=model),
        "bag/reduced0": train_behavior_reduced(0, bag, f_bag, red_cfg, model),
    }
    runs = acc
    acc = {k: r.accuracy() for k, r in runs.items()}
    shuffled = shuffle_labels(order, 1)
    acc["shuffled/ebp4"] = train_behavior_context("ebp", shuffled, f_order, ctx_cfg, l=4, er=model).accuracy()
    acc["shuffled/reduced0"] = train_behavior_reduced(0, shuffled, f_order, TrainConfig(lr=1e-3, epochs=6, **BEH_CFG),
                                                      model).accuracy()
    elapsed = time.time() - start
    # determinism: re-run one fold and compare with the full run
    again = train_behavior_context("ebp", order, f_order[:1], ctx_cfg, l=4, er=model)
    same = (again.histories[0] == runs["order/ebp4"].histories[0]
            and again.predictions == [p for p in runs["order/ebp4"].predictions if p.fold == 0])
    ok = (divergence < 0.01 and acc["order/ebp4"] >= 0.90 and acc["order/reduced0"] <= 0.60
          and acc["bag/ebp4"] >= 0.85 and acc["bag/reduced0"] >= 0.85
          and all(0.40 <= acc[k] <= 0.60 for k in ("shuffled/ebp4", "shuffled/reduced0"))
          and acc["order/ebp4"] - acc["order/reduced0"] >= 0.25
          and abs(acc["bag/ebp4"] - acc["bag/reduced0"]) <= 0.10
          and elapsed < 1800 and same)
    detail = ", ".join(f"{k} {v:.3f}" for k, v in acc.items())
    report(5, ok, f"{detail}; histogram divergence {divergence:.4f}; deterministic {same}; {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 6. transfer and freezing
# ---------------------------------------------------------------------------

def test_criterion_6_transfer_and_freezing(report, er):
    model, _, train, valid = er
    er_sum = param_checksum(model.parameters())
    ec, _ = train_ec(model, 0, train, valid, TrainConfig(lr=1e-3, epochs=1, batch_size=64, seed=0))
    ec_frozen = param_checksum(ec.er.parameters()) == er_sum
    weak = synth_behavior_corpus(SyntheticRuleSpec(event_rating=(0.3, 0.7)), 200, seed=0)
    folds = cv_split(weak, 10, 5, seed=0)[:1]
    cfg = TrainConfig(lr=1e-4, epochs=8, **BEH_CFG)
    runs = {l: train_behavior_context("ebp", weak, folds, cfg, l=l, er=model, keep_models=True) for l in (0, 4)}
    reach = {l: epochs_to_reach(runs[l].histories[0], 0.90) for l in (0, 4)}
    ebp_model = runs[4].models[0]
    ebp_frozen = param_checksum([p for b in ebp_model.convs for p in (b.conv.weight, b.conv.bias)]) == \
        param_checksum([p for b in model.convs for p in (b.conv.weight, b.conv.bias)])
    red = train_behavior_reduced(0, weak, folds, TrainConfig(lr=1e-3, epochs=1, **BEH_CFG), model, keep_models=True)
    red_model = red.models[0]
    red_frozen = param_checksum([p for b in red_model.prefix for p in (b.conv.weight, b.conv.bias)]) == \
        param_checksum([p for b in model.convs for p in (b.conv.weight, b.conv.bias)])
    converged = reach[4] is not None and (reach[0] is None or reach[4] < reach[0])
    ok = ec_frozen and ebp_frozen and red_frozen and converged
    report(6, ok, f"frozen checksums unchanged: ec {ec_frozen}, ebp4 {ebp_frozen}, reduced {red_frozen}; "
                  f"epochs to 0.90 valid acc: ebp4 {reach[4]}, ebp0 {reach[0]} (budget 8)")


# ---------------------------------------------------------------------------
# 7. determinism and persistence
# ---------------------------------------------------------------------------

def test_criterion_7_determinism_and_checkpoints(report, er, tmp_path):
    model, _, train, valid = er
    cfg = TrainConfig(lr=1e-3, epochs=3, seed=5)
    _, h1 = train_er(train[:80], valid[:20], cfg)
    _, h2 = train_er(train[:80], valid[:20], cfg)
    sess = synth_behavior_corpus(SyntheticRuleSpec(n_couples=12), 24, seed=2)
    folds = cv_split(sess, 4, 2, seed=0)
    bcfg = TrainConfig(lr=1e-3, epochs=2, **BEH_CFG)
    r1 = train_behavior_context("ebp", sess, folds, bcfg, l=4, er=model)
    r2 = train_behavior_context("ebp", sess, folds, bcfg, l=4, er=model)
    rep1, rep2 = aggregate_folds(r1.predictions), aggregate_folds(r2.predictions)
    same_runs = h1 == h2 and r1.histories == r2.histories and rep1 == rep2 and r1.predictions == r2.predictions
    save_checkpoint(model, tmp_path / "er.ckpt", seed=0)
    back, _ = load_checkpoint(tmp_path / "er.ckpt", expect_kind="er")
    x = np.random.default_rng(0).normal(size=(4, 84, 100))
    with no_grad():
        bitwise = np.array_equal(model(x).data, back(x).data)
    report(7, same_runs and bitwise, f"identical histories/reports {same_runs}; checkpoint forward bitwise {bitwise}")


# ---------------------------------------------------------------------------
# 8. pooling invariance
# ---------------------------------------------------------------------------

def test_criterion_8_pool_permutation(report, er):
    model, _, _, _ = er
    rng = np.random.default_rng(0)
    trials, equal = 0, 0
    for n in range(5):
        red = ReducedContextModel(n, model, seed=n).eval()
        cached = red.frozen_features(rng.normal(size=(84, 3000)))
        with no_grad():
            pre = red.pre_pool(cached)
            base = red.head(_pool_flat(pre)).data
            for _ in range(4):
                perm = rng.permutation(pre.shape[2])
                out = red.head(_pool_flat(Tensor(pre.data[:, :, perm]))).data
                trials += 1
                equal += np.array_equal(out, base)
    fmap = model.feature_map(rng.normal(size=(2, 84, 300)))
    with no_grad():
        e1 = model.out(_relu_head(model, _pool_flat(fmap))).data
        e2 = model.out(_relu_head(model, _pool_flat(Tensor(fmap.data[:, :, rng.permutation(fmap.shape[2])])))).data
    er_ok = np.array_equal(e1, e2)
    report(8, equal == trials and er_ok,
           f"{equal}/{trials} reduced-context permutations bitwise equal; emotion network {er_ok}")


def _relu_head(model, z):
    return relu(model.fc2(relu(model.fc1(z))))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
