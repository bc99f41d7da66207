"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the "acceptance criteria"
section of the pytest summary) and then asserts it, including the runtime
budget.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from mtelab import autodiff as ad
from mtelab import cli, data, experiment, nn, trainer
from mtelab import losses as L
from mtelab import metrics as M
from mtelab.nn import Schedule
from mtelab.trainer import TrainConfig

from conftest import micro_net
from test_losses import LOSS_NAMES, loss_fd_error

SEEDS = (0, 1, 2, 3, 4)
SEVERITIES = (1, 2, 3, 4, 5)


def _rel_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Largest coordinate-wise |a - b| / max(|a|, |b|); 0 where both vanish."""
    scale = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    mask = scale > 0
    return float(np.max(diff[mask] / scale[mask])) if mask.any() else 0.0


# 1 ----------------------------------------------------------------------

def test_c1_gradient_identity(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for net in range(20):
        k = 2 if net < 10 else 10
        for beta in (0.1, 0.5, 0.9):
            tape = ad.Tape()
            f_logp, theta, _ = micro_net(tape, seed=100 + net, k=k)
            g_logp, _, _ = micro_net(tape, seed=200 + net, k=k)
            g = g_logp.exp()
            h = f_logp.exp().detach() * (1.0 - beta) + g * beta
            lhs = ad.backward(tape, L.kl_divergence(h, f_logp))
            rhs = ad.backward(tape, L.kl_divergence(g, f_logp))
            for p in theta:
                worst = max(worst, _rel_gap(lhs[p.id], beta * rhs[p.id]))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 10
    criterion("1 gradient identity", ok, f"max rel gap {worst:.2e}, {elapsed:.1f}s")
    assert ok


# 2 ----------------------------------------------------------------------

def test_c2_autodiff_correctness(criterion):
    t0 = time.perf_counter()
    fd_worst = max(loss_fd_error(name, seed) for name in LOSS_NAMES for seed in range(5))
    rng = np.random.default_rng(0)
    jac_worst = 0.0
    for _ in range(50):
        k = int(rng.integers(2, 12))
        tape = ad.Tape()
        z = tape.parameter(rng.normal(scale=5.0, size=(1, k)))
        p = ad.softmax(z)
        total = np.zeros(k)
        for c in range(k):
            sel = np.zeros((1, k))
            sel[0, c] = 1.0
            total += ad.backward(tape, (p * sel).sum())[z.id][0]
        jac_worst = max(jac_worst, float(np.max(np.abs(total))))
    elapsed = time.perf_counter() - t0
    ok = fd_worst <= 1e-5 and jac_worst <= 1e-12 and elapsed < 30
    criterion("2 autodiff correctness", ok,
              f"FD rel err {fd_worst:.2e}, softmax Jacobian row sum {jac_worst:.1e}, {elapsed:.1f}s")
    assert ok


# 3 ----------------------------------------------------------------------

def test_c3_metric_oracles(criterion):
    t0 = time.perf_counter()
    p = np.array([[0.9, 0.05, 0.03, 0.02], [0.8, 0.1, 0.05, 0.05],
                  [0.4, 0.3, 0.2, 0.1], [0.3, 0.25, 0.25, 0.2]])
    y = np.array([0, 1, 0, 3])
    fixture = M.ece(p, y, 2)[0]

    rng = np.random.default_rng(7)
    auroc_worst = 0.0
    for _ in range(200):
        n_pos, n_neg = rng.integers(1, 80, size=2)
        if rng.random() < 0.5:
            pos, neg = rng.normal(0.5, size=n_pos), rng.normal(size=n_neg)
        else:  # heavy ties
            pos, neg = rng.integers(0, 6, n_pos) / 5.0, rng.integers(0, 6, n_neg) / 5.0
        auroc_worst = max(auroc_worst, abs(M.detection_metrics(pos, neg).auroc - M.auroc_bruteforce(pos, neg)))

    consistent = True
    for _ in range(20):
        logits = rng.normal(scale=3.0, size=(500, 5))
        probs = L.ProbBatch.from_logits(logits)
        labels = rng.integers(0, 5, 500)
        value, _ = M.ece(probs, labels, 15)
        consistent &= M.ece_from_bins(M.reliability_diagram(probs, labels, 15)) == value
    elapsed = time.perf_counter() - t0
    ok = fixture == 0.25 and auroc_worst <= 1e-12 and consistent and elapsed < 10
    criterion("3 metric oracles", ok,
              f"fixture ECE {fixture!r}, AUROC gap {auroc_worst:.1e}, diagram==ece {consistent}, {elapsed:.1f}s")
    assert ok


# 4 ----------------------------------------------------------------------

def _params(ck):
    return ck.params.tobytes()


def test_c4_degeneracy_chain(criterion):
    t0 = time.perf_counter()
    spec = experiment.mixture_spec({"samples_per_class": 300}, 0)
    tr, va, te = data.train_val_test_split(data.make_gaussian_mixture(spec),
                                           experiment.DEFAULT_DATASET["split"], 0)
    base = TrainConfig(primary_hidden=(32, 32), aux_hidden=(16,), epochs=6,
                       primary_schedule=Schedule(0.1, 3, 1, 0.5))
    ce, ce_hist = trainer.train_single(base, tr, va)
    mte, _, mte_hist = trainer.train_mte(replace(base, method="mte", alpha=0.0), tr, va)
    same_mte = _params(mte) == _params(ce) and [
        (r["val_acc"], r["val_ece"]) for r in mte_hist.records] == [(r["val_acc"], r["val_ece"]) for r in ce_hist.records]
    focal, _ = trainer.train_single(replace(base, method="baseline", baseline=L.BaselineLossSpec("focal", 0.0)), tr, va)
    ls, _ = trainer.train_single(replace(base, method="baseline",
                                         baseline=L.BaselineLossSpec("label-smoothing", 0.0)), tr, va)
    same_focal = _params(focal) == _params(ce)
    same_ls = _params(ls) == _params(ce)

    other = init = nn.init_params(base.aux_spec(tr.dim, tr.n_classes, 0))
    f = trainer.predict(ce, te.features).probs
    g = trainer.predict(other, te.features).probs
    ends = (np.array_equal(L.ensemble_probs([f, g], [1.0, 0.0]).probs, f)
            and np.array_equal(L.ensemble_probs([f, g], [0.0, 1.0]).probs, g)
            and np.array_equal(trainer.predict([ce, init], te.features, "ensemble", [1.0, 0.0]).probs, f))
    elapsed = time.perf_counter() - t0
    ok = same_mte and same_focal and same_ls and ends and elapsed < 120
    criterion("4 degeneracy chain", ok,
              f"mte(a=0)==ce {same_mte}, focal(0)==ce {same_focal}, ls(0)==ce {same_ls}, "
              f"ensemble endpoints {ends}, {elapsed:.1f}s")
    assert ok


# 5-7 --------------------------------------------------------------------

def _desk_config() -> dict:
    return {
        "dataset": {"kind": "mixture"},
        "methods": [{"name": "ce", "method": "ce"},
                    {"name": "mte1", "method": "mte", "alpha": 0.8, "n_aux": 1}],
        "eval": {"bins": 15, "detection": ["far_ood"],
                 "corruption": {"kinds": ["gaussian-noise"], "severities": list(SEVERITIES)}},
    }


@pytest.fixture(scope="module")
def desk_runs():
    """Per-seed reports for CE and MTE-1 on the default mixture, with timings."""
    cfg = _desk_config()
    assert experiment.validate_config(cfg) == []
    runs = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        report = experiment.run(cfg, seed=seed)
        runs.append(({m["name"]: m for m in report["methods"]}, time.perf_counter() - t0, report))
    return runs


def _median(values):
    return float(np.median(values))


def test_c5_accuracy_and_calibration_trend(criterion, desk_runs):
    rep = desk_runs[0][2]
    sizes_ok = (rep["dataset"]["n_train"], rep["dataset"]["n_val"], rep["dataset"]["n_test"]) == (6000, 1000, 2000)
    acc = {n: _median([r[n]["accuracy"] for r, _, _ in desk_runs]) for n in ("ce", "mte1")}
    ece = {n: _median([r[n]["ece"] for r, _, _ in desk_runs]) for n in ("ce", "mte1")}
    elapsed = sum(t for _, t, _ in desk_runs)
    ok = (sizes_ok and acc["mte1"] >= acc["ce"] - 0.003 and ece["mte1"] <= 0.6 * ece["ce"]
          and elapsed <= 300)
    criterion("5 accuracy and ECE trend", ok,
              f"median acc CE {acc['ce']:.4f} MTE {acc['mte1']:.4f}; median ECE CE {ece['ce']:.4f} "
              f"MTE {ece['mte1']:.4f} (ratio {ece['mte1'] / ece['ce']:.2f}); pipeline {elapsed:.0f}s")
    assert ok


def test_c6_corruption_trend(criterion, desk_runs):
    def sev_ece(name, sev):
        return _median([next(c["ece"] for c in r[name]["corruption"] if c["severity"] == sev)
                        for r, _, _ in desk_runs])

    rows = [(s, sev_ece("ce", s), sev_ece("mte1", s)) for s in SEVERITIES]
    elapsed = sum(t for _, t, _ in desk_runs)
    ok = all(m <= c for _, c, m in rows) and elapsed <= 600
    criterion("6 corruption-severity trend", ok,
              "median ECE CE/MTE by severity " + ", ".join(f"{s}: {c:.3f}/{m:.3f}" for s, c, m in rows)
              + f"; pipeline {elapsed:.0f}s")
    assert ok


def test_c7_far_ood_detection_trend(criterion, desk_runs):
    auroc = {n: _median([r[n]["detection"]["far_ood"]["auroc"] for r, _, _ in desk_runs]) for n in ("ce", "mte1")}
    fpr = {n: _median([r[n]["detection"]["far_ood"]["fpr95"] for r, _, _ in desk_runs]) for n in ("ce", "mte1")}
    elapsed = sum(t for _, t, _ in desk_runs)
    ok = auroc["mte1"] >= auroc["ce"] and fpr["mte1"] <= fpr["ce"] and elapsed <= 300
    criterion("7 far-OOD detection trend", ok,
              f"median AUROC CE {auroc['ce']:.4f} MTE {auroc['mte1']:.4f}; "
              f"median FPR-95 CE {fpr['ce']:.4f} MTE {fpr['mte1']:.4f}; pipeline {elapsed:.0f}s")
    assert ok


# 8 ----------------------------------------------------------------------

def test_c8_structural_claims(criterion, monkeypatch, tmp_path):
    t0 = time.perf_counter()
    ds = data.make_gaussian_mixture(data.MixtureSpec(data.circle_means(3, 1.0, 4), 0.6, 60, seed=0))
    small = dict(primary_hidden=(16,), aux_hidden=(8,), epochs=1, batch_size=30)

    calls = []
    real = trainer.forward_logits
    monkeypatch.setattr(trainer, "forward_logits", lambda c, x: calls.append(c) or real(c, x))
    one_model = True
    results = {}
    for n_aux in (1, 2, 3):
        monkeypatch.setattr(trainer, "forward_logits", real)
        results[n_aux] = trainer.train(TrainConfig(method="mte", n_aux=n_aux, **small), ds)
        calls.clear()
        monkeypatch.setattr(trainer, "forward_logits", lambda c, x: calls.append(c) or real(c, x))
        results[n_aux].predict(ds.features)
        one_model &= len(calls) == 1 and calls[0] is results[n_aux].inference[0]
    monkeypatch.setattr(trainer, "forward_logits", real)

    tape = ad.Tape()
    f, theta, _ = micro_net(tape, seed=1)
    g, phi, _ = micro_net(tape, seed=2)
    y = np.array([0, 1, 2, 0, 1, 2])
    _, aux_terms = L.mte_auxiliary_loss(f.exp(), g, return_terms=True)
    _, dml_terms = L.dml_loss(g, f.exp(), y, 0.8, return_terms=True)
    # the auxiliary loss does not even see labels: flipping them cannot change it
    no_ce = set(aux_terms) == {"kl"} and all(
        a.train_meta["loss_terms"] == ["kl"] for a in results[2].extra)
    dml = trainer.train(TrainConfig(method="dml", **small), ds)
    has_ce = "ce" in dml_terms and all("ce" in c.train_meta["loss_terms"] for c in dml.inference + dml.extra)

    path = tmp_path / "mte2.json"
    path.write_text(json.dumps({
        "dataset": {"kind": "mixture", "dim": 4, "samples_per_class": 60},
        "methods": [{"name": "mte2", "method": "mte", "n_aux": 2, "primary_hidden": [16],
                     "aux_hidden": [8], "epochs": 1}],
    }))
    assert cli.main(["run", str(path), "--out", str(tmp_path / "out")]) == 0
    ckpts = sorted(p.name for p in (tmp_path / "out" / "checkpoints").iterdir())
    two_aux = len(results[2].extra) == 2 and ckpts == ["mte2_aux0.json", "mte2_aux1.json", "mte2_primary.json"]
    elapsed = time.perf_counter() - t0
    ok = one_model and no_ce and has_ce and two_aux and elapsed < 60
    criterion("8 structural claims", ok,
              f"single forward for N_g=1..3 {one_model}, aux loss KL-only {no_ce}, DML has CE {has_ce}, "
              f"MTE-2 checkpoints {ckpts}, {elapsed:.1f}s")
    assert ok


# 9 ----------------------------------------------------------------------

def test_c9_determinism_and_persistence(criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = {
        "seed": 3,
        "dataset": {"kind": "mixture", "samples_per_class": 300},
        "methods": [{"name": "ce", "method": "ce", "epochs": 5, "primary_hidden": [32, 32]},
                    {"name": "mte1", "method": "mte", "epochs": 5, "primary_hidden": [32, 32]}],
        "eval": {"detection": ["misclassification", "near_ood", "far_ood"],
                 "corruption": {"kinds": ["gaussian-noise", "feature-mask"], "severities": [1, 5]}},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outs = []
    for run in ("a", "b"):
        assert cli.main(["run", str(path), "--out", str(tmp_path / run)]) == 0
        outs.append((tmp_path / run / "report.json").read_bytes())
    identical = outs[0] == outs[1]

    exact = True
    for p in sorted((tmp_path / "a" / "checkpoints").iterdir()):
        ck = nn.load_checkpoint(p)
        nn.save_checkpoint(ck, tmp_path / "copy.json")
        back = nn.load_checkpoint(tmp_path / "copy.json")
        exact &= back.params.tobytes() == ck.params.tobytes() and back.spec == ck.spec
    rng = np.random.default_rng(0)
    ck = nn.init_params(nn.ModelSpec((7, 13, 5), init_seed=1))
    ck = nn.ModelCheckpoint(ck.spec, rng.normal(size=ck.spec.n_params) * 10.0 ** rng.integers(-300, 300, ck.spec.n_params))
    nn.save_checkpoint(ck, tmp_path / "extreme.json")
    exact &= nn.load_checkpoint(tmp_path / "extreme.json").params.tobytes() == ck.params.tobytes()
    elapsed = time.perf_counter() - t0
    ok = identical and exact and elapsed < 120
    criterion("9 determinism and persistence", ok,
              f"report bytes identical {identical}, checkpoint round trip exact {exact}, {elapsed:.1f}s")
    assert ok
