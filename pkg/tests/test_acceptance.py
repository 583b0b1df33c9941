"""Acceptance gate: every criterion at its stated tolerance, one line each.

Run with `pytest tests/test_acceptance.py -v` (each test prints an explicit
PASS line as well). The OOD-behavior matrix (criterion 5) trains 30
federations and takes a few minutes; everything else is fast.
"""

import os
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from perinvfl.analysis import convergence_slope, random_assumption1_spec, theorem1_gap
from perinvfl.data import parse_idx, partition_clients, default_federation_spec
from perinvfl.federation import Hyperparams, train, evaluate, _seed_for
from perinvfl.harness import (
    ExperimentConfig,
    build_federation,
    check_gradients,
    parse_config,
    run_experiment,
)
from perinvfl.metrics import MetricsLog
from perinvfl.models import ModelArch, init_params, risk
from perinvfl.numerics import grad
from perinvfl.objectives import GroupWeights, groupdro_update_q, irm_loss

from test_analysis import HAND_I_F1, HAND_LHS, HAND_RHS, hand_joint
from perinvfl.analysis import ClientFeatureSpec
from test_federation import tiny_clients, TINY_ARCH


def report(criterion, message):
    print(f"ACCEPTANCE {criterion}: PASS - {message}")


# ---------------------------------------------------------------------------
# 1. gradient oracle
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_oracle():
    t0 = time.time()
    audit = check_gradients(n_trials=20, seed=0, tolerance=1e-4)
    elapsed = time.time() - t0
    assert audit.passed, audit.failures
    assert elapsed < 10.0, f"gradient audit took {elapsed:.1f}s"
    worst = max(audit.max_errors.values())
    report(1, f"20-seed finite-difference audit, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. reductions
# ---------------------------------------------------------------------------


def test_criterion_2_reductions():
    # (a) lambda = 0: invariance loss collapses to the sum of risks exactly
    clients = tiny_clients()
    envs = list(clients[0].train_envs)
    p = init_params(TINY_ARCH, 7)
    lhs = float(irm_loss(p, TINY_ARCH, envs, 0.0))
    rhs = sum(float(risk(p, TINY_ARCH, e)) for e in sorted(envs, key=lambda e: e.context_id))
    assert lhs == rhs

    # (b) beta = 0: the personalized step is plain invariance descent, bit-exact
    from perinvfl.federation import personalized_step

    theta = init_params(TINY_ARCH, 8)
    anchor = init_params(TINY_ARCH, 9)
    stepped = personalized_step(theta, anchor, TINY_ARCH, envs, 0.02, 0.0, 1.0)
    g = grad(lambda q: irm_loss(q, TINY_ARCH, envs, 1.0), theta)
    assert stepped.data.tobytes() == (theta.data - 0.02 * g.data).tobytes()

    # (c) perinvfl global track with lambda = 0, alpha = 1 reproduces the
    # plain-averaging baseline bit-exactly for T = 5, R = 3
    base = dict(T=5, R=3, S=1, eta=0.02, gamma=0.05, alpha=1.0, lambda_warmup_rounds=0)
    pero = train(clients, TINY_ARCH, Hyperparams(beta=0.0, lam=0.0, method="perinvfl", **base),
                 seed=3, record_global_history=True)
    fed = train(clients, TINY_ARCH, Hyperparams(lam=0.0, method="fedavg", **base),
                seed=3, record_global_history=True)
    for a, b in zip(pero.global_history, fed.global_history):
        assert a.data.tobytes() == b.data.tobytes()
    report(2, "lambda-0, beta-0 and global-track reductions are exact")


# ---------------------------------------------------------------------------
# 3. worst-group weight invariants
# ---------------------------------------------------------------------------


def test_criterion_3_groupdro_simplex():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        g = int(rng.integers(2, 6))
        raw = rng.random(g) + 1e-12
        q = GroupWeights(raw / raw.sum())
        for _ in range(int(rng.integers(1, 8))):
            risks = rng.uniform(0.0, 20.0, g)
            q = groupdro_update_q(q, risks, dro_step=float(rng.uniform(0.001, 2.0)))
            assert (q.q >= 0).all()
            assert abs(float(q.q.sum()) - 1.0) <= 1e-12
    q = GroupWeights(np.array([0.3, 0.2, 0.5]))
    out = groupdro_update_q(q, [1.1, 1.1, 1.1], 0.7)
    np.testing.assert_allclose(out.q, q.q, rtol=0, atol=1e-15)
    report(3, "simplex preserved over 1000 random update sequences; equal risks fixed")


# ---------------------------------------------------------------------------
# 4. information-gap bound
# ---------------------------------------------------------------------------


def test_criterion_4_information_gap():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    for trial in range(100):
        specs, joint = random_assumption1_spec(rng, max_clients=4, max_features=6)
        rep = theorem1_gap(specs, joint)
        assert rep.applicable, f"spec {trial}: {rep.note}"
        assert rep.holds, f"spec {trial}: lhs={rep.lhs} rhs={rep.rhs}"
    # hand-built two-client example reproduces the enumerated gap exactly
    specs = [
        ClientFeatureSpec(frozenset({0, 1}), frozenset({1})),
        ClientFeatureSpec(frozenset({0})),
    ]
    rep = theorem1_gap(specs, hand_joint())
    assert abs(rep.lhs - HAND_LHS) <= 1e-12
    assert abs(rep.rhs - HAND_RHS) <= 1e-12
    assert abs(rep.delta - HAND_I_F1) <= 1e-12
    elapsed = time.time() - t0
    assert elapsed < 30.0, f"information-gap sweep took {elapsed:.1f}s"
    report(4, f"bound holds on 100 random conforming specs, enumerated example exact, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5 + 6. OOD behavior and ablation direction on the synthetic federation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ood_matrix(tmp_path_factory):
    out = tmp_path_factory.mktemp("ood")
    config = ExperimentConfig(
        output_dir=str(out), seeds=(0, 1, 2), methods=("perinvfl", "fedavg")
    )
    t0 = time.time()
    rep = run_experiment(config)
    return config, rep, time.time() - t0


def test_criterion_5_ood_gap_and_stability(ood_matrix):
    config, rep, elapsed = ood_matrix
    assert not rep.any_divergence
    methods = rep.summary["methods"]
    gap = methods["perinvfl"]["0.10"]["mean"] - methods["fedavg"]["0.10"]["mean"]
    assert gap >= 10.0, f"flipped-test gap only {gap:.2f} points"
    ratio = methods["perinvfl"]["Average"]["std"] / methods["fedavg"]["Average"]["std"]
    assert ratio <= 0.5, f"across-case std ratio {ratio:.3f}"
    assert elapsed < 600.0, f"OOD matrix took {elapsed:.0f}s"
    report(
        5,
        f"gap at p_test=0.10 is {gap:.1f} points, across-case std ratio {ratio:.2f}, {elapsed:.0f}s",
    )


def test_criterion_6_single_regularizer_ablations(ood_matrix):
    config, rep, _ = ood_matrix
    per_seed_perinvfl = [
        o.accuracy for o in rep.outcomes if o.method == "perinvfl" and o.ood_case == 0.10
    ]
    perinvfl_mean = float(np.mean(per_seed_perinvfl))
    means = {}
    for method in ("irm_l2", "irm_ft"):
        accs = []
        for seed in config.seeds:
            clients, arch = build_federation(config, 0.10, seed)
            result = train(clients, arch, Hyperparams(method=method), seed)
            accs.append(evaluate(result, arch, clients)["average"])
        means[method] = float(np.mean(accs))
        assert means[method] <= perinvfl_mean, (
            f"{method} mean {means[method]:.3f} exceeds perinvfl {perinvfl_mean:.3f}"
        )
    report(
        6,
        "dual regularization dominates: perinvfl "
        f"{perinvfl_mean:.3f} >= irm_l2 {means['irm_l2']:.3f} >= "
        f"irm_ft {means['irm_ft']:.3f} at p_test=0.10 (3 seeds)",
    )


# ---------------------------------------------------------------------------
# 7. convergence diagnostic
# ---------------------------------------------------------------------------


def test_criterion_7_convergence_slope():
    clients, arch = build_federation(ExperimentConfig(), 0.10, seed=0)
    hyper = Hyperparams(T=200, gamma=0.02, lambda_warmup_rounds=0, eval_every=100)
    log = MetricsLog()
    train(clients, arch, hyper, seed=0, log=log)
    series = log.series("global_grad_sq", split="global")
    assert len(series) == 200
    slope = convergence_slope(series)
    assert slope <= -0.3, f"running-minimum slope {slope:.3f}"
    report(7, f"T=200 running-minimum gradient-norm slope {slope:.2f} <= -0.3")


# ---------------------------------------------------------------------------
# 8. determinism of the runner
# ---------------------------------------------------------------------------


DETERMINISM_CFG = """\
dataset = sem_synthetic
output_dir = {out}
seeds = 0
ood_cases = 0.10, 0.50
methods = perinvfl, fedavg
hyper.T = 5
hyper.eval_every = 2
sem.n_train = 200
sem.n_test = 200
"""


def test_criterion_8_byte_identical_reruns(tmp_path):
    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(DETERMINISM_CFG.format(out=tmp_path / "out"))
    config = parse_config(cfg_path)
    first = run_experiment(config)
    blobs = {o.csv_path: Path(o.csv_path).read_bytes() for o in first.outcomes}
    summary = Path(first.summary_path).read_bytes(), Path(first.json_path).read_bytes()
    second = run_experiment(config)
    for outcome in second.outcomes:
        assert Path(outcome.csv_path).read_bytes() == blobs[outcome.csv_path]
    assert (Path(second.summary_path).read_bytes(), Path(second.json_path).read_bytes()) == summary
    report(8, f"two runs produced byte-identical CSVs ({len(blobs)} files) and summaries")


# ---------------------------------------------------------------------------
# 9. IDX ingestion and the full digit pipeline
# ---------------------------------------------------------------------------


def test_criterion_9_idx_golden():
    labels_blob = struct.pack(">II", 0x00000801, 4) + bytes([7, 2, 1, 9])
    assert parse_idx(labels_blob).tolist() == [7, 2, 1, 9]
    images_blob = struct.pack(">IIII", 0x00000803, 4, 2, 2) + bytes(range(16))
    images = parse_idx(images_blob)
    assert images.shape == (4, 2, 2)
    np.testing.assert_allclose(images.data.ravel(), np.arange(16) / 255.0)

    from perinvfl.data import IdxFormatError

    with pytest.raises(IdxFormatError, match="0x00000802"):
        parse_idx(struct.pack(">II", 0x00000802, 4))
    with pytest.raises(IdxFormatError, match="truncated"):
        parse_idx(struct.pack(">II", 0x00000801, 10) + bytes([1]))
    report(9, "IDX golden fixtures round-trip; malformed inputs rejected as specified")


def _find_mnist():
    candidates = []
    env_dir = os.environ.get("MNIST_DIR")
    if env_dir:
        candidates.append(Path(env_dir))
    candidates += [Path("data/mnist"), Path("/root/data/mnist")]
    for base in candidates:
        imgs = base / "train-images-idx3-ubyte"
        labels = base / "train-labels-idx1-ubyte"
        if imgs.exists() and labels.exists():
            return imgs, labels
    return None


def test_criterion_9_real_mnist_pipeline_counts():
    found = _find_mnist()
    if found is None:
        pytest.skip("real MNIST IDX files not present (set MNIST_DIR to enable)")
    imgs_path, labels_path = found
    images = parse_idx(imgs_path.read_bytes())
    labels = parse_idx(labels_path.read_bytes())
    spec = default_federation_spec()  # 12500 train / 2500 test per client
    clients = partition_clients(
        spec, images.data[:50000], labels[:50000], images.data[50000:], labels[50000:], seed=0
    )
    assert len(clients) == 4
    for c in clients:
        assert sum(e.n for e in c.train_envs) == 12500
        assert c.test_env.n == 2500
        assert c.train_envs[0].inputs.shape[1] == 14 * 14 * 2
    report(9, "RC-MNIST pipeline built 12500/2500 splits per client at 14x14x2")
