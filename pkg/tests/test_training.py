import math

import numpy as np
import pytest

from unicsi import channelgen as cg
from unicsi import models as md
from unicsi import neural
from unicsi import training as tr
from unicsi.errors import TrainingError, UsageError
from unicsi.pipeline import category, tensors_to_delay

import oracles

CAT1 = category(1)
LS = md.LambdaSet.uniform([2, 4, 8])


@pytest.fixture(scope="module")
def toy():
    """512 delay-domain samples of 16-bin EPA channels."""
    s = cg.GenSetting(cg.get_profile("EPA"), 30.0, 16, 8, 4, seed=4, samples=16)
    return tensors_to_delay(cg.generate_csi(s))


def _identity_layer(n):
    return neural.DenseLayer(np.eye(n), np.zeros(n), "linear")


def test_perfect_autoencoder_has_zero_loss():
    enc = neural.ModelParams([_identity_layer(4)])
    dec = neural.ModelParams([_identity_layer(4)])
    x = np.random.default_rng(0).standard_normal((5, 4))
    assert tr.masked_reconstruction_loss(enc, dec, x, neural.MaskVector(4, 4)) < 1e-20


def test_zero_mask_with_zero_bias_decoder_gives_signal_energy():
    rng = np.random.default_rng(1)
    enc = neural.init_dense([6, 5, 3], rng)
    dec = neural.init_dense([3, 4, 6], rng)
    for l in dec.layers:
        l.biases[:] = 0.0
    x = rng.standard_normal((7, 6))
    loss = tr.masked_reconstruction_loss(enc, dec, x, neural.MaskVector(0, 3))
    assert loss == pytest.approx(np.mean(np.sum(x * x, axis=1)), rel=1e-15)


def test_tiny_model_matches_scalar_evaluation():
    rng = np.random.default_rng(2)
    enc = neural.init_dense([4, 3, 2], rng)
    dec = neural.init_dense([2, 3, 4], rng)
    x = rng.standard_normal((3, 4))
    for lam in (0, 1, 2):
        z = oracles.straight_forward(oracles.triples(enc), x)
        z[:, lam:] = 0.0
        y = oracles.straight_forward(oracles.triples(dec), z)
        ref = sum(sum((x[i, j] - y[i, j]) ** 2 for j in range(4)) for i in range(3)) / 3
        got = tr.masked_reconstruction_loss(enc, dec, x, neural.MaskVector(lam, 2))
        assert abs(got - ref) < 1e-12


def test_empty_batch_rejected():
    b = md.build_masked(CAT1, LS)
    with pytest.raises(ValueError):
        tr.masked_loss(b, np.zeros((0, 32)), 4)


def test_masked_loss_accepts_delay_samples(toy):
    b = md.build_masked(CAT1, LS, seed=1)
    samples = [toy.sample(i) for i in range(5)]
    assert tr.masked_loss(b, samples, 4) == tr.masked_loss(b, toy.data[:5], 4)


def test_total_loss_weightings(toy):
    ls4 = md.LambdaSet.uniform([2, 4, 8, 16])
    b = md.build_masked(CAT1, ls4, seed=2)
    rep = tr.total_loss(b, toy.data[:32])
    assert rep.total == pytest.approx(np.mean(list(rep.per_lambda.values())), rel=1e-14)
    one = md.LambdaSet((2, 4, 8, 16), (1.0, 0.0, 0.0, 0.0))
    assert tr.total_loss(b, toy.data[:32], one).total == rep.per_lambda[2]
    w = np.random.default_rng(3).random(4)
    w /= math.fsum(w)
    w[-1] = 1.0 - math.fsum(w[:-1])
    rnd = md.LambdaSet((2, 4, 8, 16), tuple(w))
    r = tr.total_loss(b, toy.data[:32], rnd)
    assert abs(r.total - float(np.dot(w, [r.per_lambda[l] for l in (2, 4, 8, 16)]))) < 1e-12


@pytest.mark.parametrize("approach", md.APPROACHES)
def test_bundle_gradients_match_finite_differences(approach, toy):
    b = md.build(approach, CAT1, md.LambdaSet.uniform([2, 4, 6]), seed=5)
    x = toy.data[:4]
    weights = {2: 0.5, 4: 0.2, 6: 0.3}
    _, grads = tr.loss_and_grads(b, x, weights)
    models = b.named_models()
    assert set(grads) == set(models)

    def loss():
        return sum(w * tr.masked_loss(b, x, lam) for lam, w in weights.items())

    for name, g in grads.items():
        layers = models[name].layers
        arrays = [p for l in layers for p in (l.weights, l.biases)]
        numeric = oracles.central_difference(loss, arrays)
        for (dw, db), nw, nb in zip(g, numeric[0::2], numeric[1::2]):
            assert oracles.rel_err(dw, nw) < 1e-4, name
            assert oracles.rel_err(db, nb) < 1e-4, name


def test_joint_training_descends(toy):
    b = md.build_masked(CAT1, LS, seed=0)
    cfg = tr.TrainConfig(epochs_joint=200, batch_size=64, seed=1, lambda_set=LS)
    _, hist = tr.train_joint(b, toy, cfg)
    totals = hist.totals()
    assert len(totals) == 201
    assert totals[-1] < totals[0]


@pytest.mark.parametrize("approach", md.APPROACHES)
def test_training_is_deterministic(approach, toy):
    def run():
        b = md.build(approach, CAT1, LS, seed=3)
        _, h = tr.train_joint(b, toy, tr.TrainConfig(epochs_joint=3, batch_size=32, seed=9))
        return h.totals(), [m.flatten().tobytes() for m in b.named_models().values()]

    assert run() == run()


def test_equal_budget_across_approaches(toy):
    steps = {}
    for a in md.APPROACHES:
        count = []
        b = md.build(a, CAT1, LS, seed=0)
        tr.train_joint(b, toy, tr.TrainConfig(epochs_joint=2, batch_size=50, seed=0),
                       callback=lambda *args: count.append(1))
        steps[a] = len(count)
    assert len(set(steps.values())) == 1
    assert steps["masked"] == 2 * math.ceil(len(toy) / 50)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_diagnostics(toy):
    b = md.build_masked(CAT1, LS, seed=0)
    bad = toy.data[:64].copy()
    bad[3, 0] = 1e200
    with pytest.raises(TrainingError) as exc:
        tr.train_joint(b, bad, tr.TrainConfig(epochs_joint=1, batch_size=64))
    assert exc.value.diagnostics["phase"] == "joint"


def test_lambda_set_mismatch_rejected(toy):
    b = md.build_masked(CAT1, LS)
    with pytest.raises(UsageError):
        tr.train_joint(b, toy, tr.TrainConfig(epochs_joint=1, lambda_set=md.LambdaSet.uniform([2, 8])))


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_size=0)


def test_history_csv(toy, tmp_path):
    b = md.build_masked(CAT1, LS, seed=0)
    cfg = tr.TrainConfig(epochs_joint=2, epochs_per_substep=1, batch_size=128, fine_tune=True)
    _, hist = tr.train(b, toy, cfg)
    path = tmp_path / "h.csv"
    hist.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,phase,target_lambda,D_2,D_4,D_8,total"
    assert len(lines) == 1 + 3 + 3
    assert [r.target_lambda for r in hist.rows[3:]] == [2, 4, 8]
    for r in hist.rows:
        assert abs(r.report.total - math.fsum(r.report.per_lambda[l] / 3 for l in (2, 4, 8))) < 1e-12


def test_fine_tune_requires_masked(toy):
    b = md.build_saldr(CAT1, LS)
    with pytest.raises(UsageError):
        tr.fine_tune(b, toy, tr.TrainConfig(epochs_per_substep=1))


def _snapshot(bundle):
    return {n: [(l.weights.copy(), l.biases.copy()) for l in m.layers]
            for n, m in bundle.named_models().items()}


def test_fine_tune_freeze_contract(toy):
    ls = md.LambdaSet.uniform([4, 8, 16, 32])
    b = md.build_masked(CAT1, ls, seed=6)
    cfg = tr.TrainConfig(epochs_joint=2, epochs_per_substep=2, batch_size=64, seed=2)
    tr.train_joint(b, toy, cfg)
    probe = toy.data[:64]

    def losses(bundle):
        return {j: tr.masked_loss(bundle, probe, j) for j in ls}

    before = _snapshot(b)
    # state right before the running sub-step, and after the latest step
    state = {"lam": None, "last": (before, losses(b))}
    violations = []

    def cb(phase, lam, step, bundle):
        if state["lam"] != lam:
            state["lam"] = lam
            state["base"] = state["last"]
        base, ref = state["base"]
        lo = max([l for l in ls if l < lam], default=0)
        rows = np.arange(bundle.lambda_max)
        frozen = (rows < lo) | (rows >= lam)
        enc = bundle.encoders[0]
        for i, layer in enumerate(enc.layers):
            w0, b0 = base["encoder"][i]
            sel = frozen if i == len(enc.layers) - 1 else slice(None)
            if not (np.array_equal(layer.weights[sel], w0[sel]) and np.array_equal(layer.biases[sel], b0[sel])):
                violations.append(("encoder", i, lam, step))
        for name, layers in base.items():
            if name in ("encoder", f"decoder_{lam}"):
                continue
            cur = bundle.named_models()[name].layers
            if any(not (np.array_equal(c.weights, w) and np.array_equal(c.biases, bb))
                   for c, (w, bb) in zip(cur, layers)):
                violations.append((name, lam, step))
        now = losses(bundle)
        violations.extend((f"D({j})", lam, step) for j in ls if j < lam and now[j] != ref[j])
        state["last"] = (_snapshot(bundle), now)

    tr.fine_tune(b, toy, cfg, callback=cb)
    assert not violations
    after = _snapshot(b)
    assert np.array_equal(after["encoder"][0][0], before["encoder"][0][0])
    assert all(l.trainable.all() for l in b.encoders[0].layers)
    for lam in ls:
        assert not np.array_equal(after[f"decoder_{lam}"][0][0], before[f"decoder_{lam}"][0][0])
    assert not np.array_equal(after["encoder"][-1][0], before["encoder"][-1][0])


def test_fine_tune_substep_trains_exact_rows(toy):
    ls = md.LambdaSet.uniform([4, 8, 16, 32])
    b = md.build_masked(CAT1, ls, seed=7)
    cfg = tr.TrainConfig(epochs_per_substep=1, batch_size=64, seed=3)
    starts = {}
    ends = {}

    def cb(phase, lam, step, bundle):
        last = bundle.encoders[0].layers[-1]
        ends[lam] = (last.weights.copy(), last.biases.copy())

    def tracker(phase, lam, step, bundle):
        if lam not in starts:
            prev = max([l for l in ends if l < lam], default=None)
            starts[lam] = ends[prev] if prev is not None else start0
        cb(phase, lam, step, bundle)

    last = b.encoders[0].layers[-1]
    start0 = (last.weights.copy(), last.biases.copy())
    tr.fine_tune(b, toy, cfg, callback=tracker)
    w_start, b_start = starts[16]
    w_end, b_end = ends[16]
    changed = np.flatnonzero(np.any(w_start != w_end, axis=1) | (b_start != b_end))
    # zero-based rows 8..15 feed latent entries 9..16
    assert changed.tolist() == list(range(8, 16))
