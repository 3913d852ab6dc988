"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py`` (lines printed directly).
The four systems are trained once per session on the default synthetic world,
pinned to a single BLAS thread.
"""

from __future__ import annotations

import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

sys.path.insert(0, str(Path(__file__).parent))

from conftest import fd_check  # noqa: E402
from promptspk import formats  # noqa: E402
from promptspk.cli import main as cli_main  # noqa: E402
from promptspk.discriminative import (  # noqa: E402
    DiscConfig, disc_loss_and_grad, init_discriminative, train_discriminative,
)
from promptspk.flow import FlowConfig, cfm_loss, init_vector_field, integrate  # noqa: E402
from promptspk.mathcore import init_mlp, mlp_backward, mlp_forward  # noqa: E402
from promptspk.metrics import (  # noqa: E402
    GaussianStats, cosine_similarity, emd_1d, fad_score, fit_gaussian, frechet_distance, gaussian_ball_radius,
    spearman_srcc,
)
from promptspk.prompt import FrozenEncoder, init_lora, lora_apply, lora_backward, load_schema  # noqa: E402
from promptspk.synthdata import SynthWorld, generate_corpus, oracle_conditional_samples, world_preset  # noqa: E402
from promptspk.systems import (  # noqa: E402
    GENERATIVE, SYSTEMS, RunConfig, ablation_similarity, corpus_features, train_system,
)

RESULTS: list[str] = []
DRAWS_PER_RECORD = 100      # flow draws per eval prompt for FAD
MODE_RECORDS = 10
MODE_DRAWS = 1000


def record(number: int, ok: bool, detail: str) -> None:
    RESULTS.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def bench():
    """Default world, all four systems, timings."""
    with threadpool_limits(1):
        start = time.perf_counter()
        schema = load_schema()
        config = RunConfig()
        corpus = generate_corpus(config.world, schema)
        systems, train_time = {}, {}
        for name in SYSTEMS:
            t0 = time.perf_counter()
            systems[name] = train_system(name, corpus, config, schema)
            train_time[name] = time.perf_counter() - t0
        records, targets = corpus.split("eval")
        background = corpus.embeddings["heldout"]
        fad = {}
        for name, system in systems.items():
            feats = corpus_features(system.encoder, schema, records)
            fad[name] = fad_score(background, system.generate(feats, DRAWS_PER_RECORD, seed=0))
        oracle = np.concatenate([oracle_conditional_samples(config.world, schema, r, DRAWS_PER_RECORD, seed=i)
                                 for i, r in enumerate(records)])
        floor = fad_score(background, oracle)
        elapsed = time.perf_counter() - start
    return dict(schema=schema, config=config, corpus=corpus, systems=systems, train_time=train_time,
                fad=fad, floor=floor, elapsed=elapsed)


def test_criterion_1_fad_ordering(bench):
    fad, floor = bench["fad"], bench["floor"]
    flows = [fad[n] for n in GENERATIVE]
    checks = {
        "nolora>lora": fad["disc_nolora"] > fad["disc_lora"],
        "lora>flows": all(fad["disc_lora"] > f for f in flows),
        "flow<0.5*lora": all(f < 0.5 * fad["disc_lora"] for f in flows),
        "flow<3*floor": all(f < 3 * floor for f in flows),
        "runtime<600s": bench["elapsed"] < 600,
    }
    ok = all(checks.values())
    detail = ", ".join(f"{k} {v:.3f}" for k, v in fad.items())
    record(1, ok, f"FAD {detail}; floor {floor:.3f}; total {bench['elapsed']:.0f} s; "
                  f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    assert ok, checks


def test_criterion_2_mode_recovery(bench):
    schema, config = bench["schema"], bench["config"]
    world = SynthWorld(config.world, schema)
    records = bench["corpus"].records["eval"][:MODE_RECORDS]
    sigma, d = config.world.noise, config.world.d
    r3 = sigma * gaussian_ball_radius(3.0, d)
    r2 = sigma * gaussian_ball_radius(2.0, d)
    worst = {}
    ok = True
    for name in ("flow_lora", "disc_plus_flow", "disc_lora", "disc_nolora"):
        system = bench["systems"][name]
        feats = corpus_features(system.encoder, schema, records)
        stats = []
        for i, rec in enumerate(records):
            means = world.mode_means(rec)
            if system.generative:
                x = system.generate(feats[i:i + 1], MODE_DRAWS, seed=5)
                dist = np.linalg.norm(x[:, None, :] - means[None], axis=2)
                inside = dist.min(axis=1) <= r3
                mass = [np.mean(inside & (dist.argmin(axis=1) == k)) for k in range(len(means))]
                stats.append((inside.mean(), min(mass)))
            else:
                e = system.generate(feats[i:i + 1])[0]
                stats.append((np.linalg.norm(means - e, axis=1).min(),))
        stats = np.array(stats)
        if system.generative:
            worst[name] = f"in-ball>={stats[:, 0].min():.3f}, min mode mass {stats[:, 1].min():.3f}"
            ok &= bool(stats[:, 0].min() >= 0.8 and stats[:, 1].min() >= 0.2)
        else:
            worst[name] = f"min dist to a mode {stats[:, 0].min():.3f} (2sigma ball {r2:.3f})"
            ok &= bool(stats[:, 0].min() > r2)
    record(2, ok, "; ".join(f"{k}: {v}" for k, v in worst.items()) + f"; 3sigma ball {r3:.3f}")
    assert ok, worst


def test_criterion_3_lora_effect():
    with threadpool_limits(1):
        schema = load_schema()
        config = RunConfig(world=world_preset("lora_stress"))
        corpus = generate_corpus(config.world, schema)
        losses = {}
        for name in ("disc_nolora", "disc_lora"):
            system = train_system(name, corpus, config, schema)
            records, targets = corpus.split("eval")
            pred = system.generate(corpus_features(system.encoder, schema, records))
            losses[name] = float(disc_loss_and_grad(pred, targets)[0].mean())
        encoder = FrozenEncoder(config.encoder, schema)
        feats = corpus_features(encoder, schema, corpus.records["eval"])
        with_lora = init_discriminative(encoder, config.world.d, replace(config.disc, use_lora=True))
        without = init_discriminative(encoder, config.world.d, replace(config.disc, use_lora=False))
        step0_same = np.array_equal(with_lora.predict_features(feats), without.predict_features(feats))
    reduction = 1 - losses["disc_lora"] / losses["disc_nolora"]
    ok = reduction >= 0.20 and step0_same
    record(3, ok, f"eval disc_loss nolora {losses['disc_nolora']:.3f} -> lora {losses['disc_lora']:.3f} "
                  f"({100 * reduction:.1f}% reduction); step-0 outputs identical: {step0_same}")
    assert ok


def test_criterion_4_ablation_trend(bench):
    schema = bench["schema"]
    records, targets = bench["corpus"].split("eval")
    means = {}
    with threadpool_limits(1):
        for name, system in bench["systems"].items():
            means[name] = ablation_similarity(system, schema, records, targets, seeds=(0, 1, 2), n=10)
    ok = all(m[0] <= m[1] <= m[2] and m[2] - m[0] >= 0.03 for m in means.values())
    detail = "; ".join(f"{k} " + "/".join(f"{v:.3f}" for v in m) for k, m in means.items())
    record(4, ok, f"{len(records)} speakers x 3 seeds: {detail}")
    assert ok, means


def test_criterion_5_metric_oracles():
    checks = {}
    g = fit_gaussian([[0.0, 0.0], [2.0, 2.0]])
    checks["fit_gaussian hand"] = np.allclose(g.mean, [1, 1]) and np.allclose(g.covariance, [[2, 2], [2, 2]], atol=2e-6)

    def gs(m, c):
        return GaussianStats(np.asarray(m, float), np.asarray(c, float), 2)

    a = gs([0.5, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    checks["frechet a==a"] = frechet_distance(a, a) == 0.0
    checks["frechet mean shift"] = abs(frechet_distance(gs([1, 0], np.eye(2)), gs([0, 0], np.eye(2))) - 1) < 1e-12
    checks["frechet 4I vs I"] = abs(frechet_distance(gs([0, 0], 4 * np.eye(2)), gs([0, 0], np.eye(2))) - 2) < 1e-12
    rng = np.random.default_rng(0)
    self_fd = fad_score(rng.standard_normal((10_000, 16)), rng.standard_normal((10_000, 16)))
    checks["frechet self 10k d16 < 0.05"] = self_fd < 0.05
    bg = rng.standard_normal((10_000, 16))
    checks["fad shift 16 +-5%"] = abs(fad_score(bg, bg + 1.0) / 16 - 1) < 0.05
    checks["fad copy"] = fad_score(bg, bg.copy()) == 0.0
    checks["srcc identity"] = abs(spearman_srcc(np.arange(7.0), np.arange(7.0))[0] - 1) < 1e-12
    checks["srcc reversed"] = abs(spearman_srcc([1, 2, 3], [3, 2, 1])[0] + 1) < 1e-12
    checks["srcc hand 0.5"] = abs(spearman_srcc([1, 2, 3], [1, 3, 2])[0] - 0.5) < 1e-12
    checks["emd a==a"] = emd_1d([3.0, 1.0], [1.0, 3.0]) == 0.0
    checks["emd points"] = emd_1d([0.0], [5.0]) == 5.0
    checks["emd pairing"] = emd_1d([0.0, 1.0], [1.0, 2.0]) == 1.0
    checks["cos self"] = abs(cosine_similarity([0.3, 2.0], [0.3, 2.0]) - 1) < 1e-12
    checks["cos orthogonal"] = cosine_similarity([1.0, 0.0], [0.0, 2.0]) == 0.0
    checks["cos hand"] = abs(cosine_similarity([1.0, 1.0], [1.0, 0.0]) - 2**-0.5) < 1e-12
    ok = all(checks.values())
    record(5, ok, f"{sum(checks.values())}/{len(checks)} oracle checks; self-FD {self_fd:.4f}; "
                  f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    assert ok, checks


def test_criterion_6_numerics(schema):
    rng = np.random.default_rng(42)
    errors = {}

    p = init_mlp([6, 10, 10, 4], rng)
    x = rng.normal(size=(5, 6))
    probe = rng.normal(size=(5, 4))
    _, tape = mlp_forward(p, x)
    errors["mlp"] = fd_check(lambda: float(np.sum(mlp_forward(p, x)[0] * probe)), p.arrays(),
                             mlp_backward(p, tape, probe).arrays(), rng)

    encoder = FrozenEncoder(RunConfig().encoder, schema)
    adapter = init_lora(encoder, rng, rank=8)
    adapter.b[:] = rng.normal(0, 0.2, size=adapter.b.shape)
    u = rng.normal(size=(5, encoder.in_dim))
    probe = rng.normal(size=(5, encoder.out_dim))
    errors["lora"] = fd_check(lambda: float(np.sum(lora_apply(encoder, adapter, u) * probe)), adapter.arrays(),
                              lora_backward(adapter, u, probe).arrays(), rng)

    model = init_discriminative(encoder, 16, DiscConfig(hidden=24))
    model.adapter.b[:] = rng.normal(0, 0.2, size=model.adapter.b.shape)
    e = rng.normal(size=(5, 16))
    pred, tape = mlp_forward(model.projection, model.condition(u))
    pg, cg = mlp_backward(model.projection, tape, disc_loss_and_grad(pred, e)[1], return_input_grad=True)
    errors["discriminative"] = fd_check(
        lambda: float(disc_loss_and_grad(model.predict_features(u), e)[0].sum()),
        model.projection.arrays() + model.adapter.arrays(),
        pg.arrays() + lora_backward(model.adapter, u, cg).arrays(), rng)

    net = init_vector_field(16, encoder.out_dim, FlowConfig(hidden=24, n_layers=3), rng)
    for b in net.params.biases:
        b[:] = rng.normal(0, 0.2, size=b.shape)
    x1 = rng.normal(size=(5, 16))

    def flow_loss():
        return cfm_loss(net, x1, lora_apply(encoder, adapter, u), np.random.default_rng(1), with_grad=False)[0]

    _, grads, cond_grad = cfm_loss(net, x1, lora_apply(encoder, adapter, u), np.random.default_rng(1))
    errors["vector_field"] = fd_check(flow_loss, net.params.arrays(), grads.arrays(), rng)
    errors["flow_lora"] = fd_check(flow_loss, adapter.arrays(), lora_backward(adapter, u, cond_grad).arrays(), rng)

    euler, doubling = [], []
    sigma_min = FlowConfig().sigma_min
    for _ in range(100):
        target, x0 = rng.normal(size=16) * 2, rng.standard_normal(16)

        def field(x, c, t, target=target):
            return (target - (1 - sigma_min) * x) / (1 - (1 - sigma_min) * t)

        end32 = integrate(field, None, x0, ode_steps=32)
        end64 = integrate(field, None, x0, ode_steps=64)
        euler.append(np.linalg.norm(end32 - target) / np.linalg.norm(target - x0))
        doubling.append(np.linalg.norm(end32 - end64) / np.linalg.norm(end32))
    ok = max(errors.values()) < 1e-4 and max(euler) < 0.05 and max(doubling) < 1e-3
    record(6, ok, "max FD rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
           + f"; Euler-32 rel err {max(euler):.1e}; 32->64 change {max(doubling):.1e}")
    assert ok


def test_criterion_7_determinism(tmp_path):
    config = tmp_path / "det.toml"
    config.write_text("disc.epochs = 15\nflow.epochs = 15\n")
    runs = []
    with threadpool_limits(1):
        for k in range(2):
            out = tmp_path / f"run{k}"
            out.mkdir()
            codes = [
                cli_main(["gen-corpus", "--out", str(out / "corpus"), "--seed", "11"]),
                cli_main(["train", "disc_plus_flow", "--corpus", str(out / "corpus"), "--config", str(config),
                          "--seed", "3", "--out", str(out / "m.ckpt")]),
                cli_main(["generate", "--checkpoint", str(out / "m.ckpt"), "--records", str(out / "corpus/eval.jsonl"),
                          "--n", "5", "--seed", "4", "--out", str(out / "g.emb")]),
                cli_main(["evaluate", "fad", "--corpus", str(out / "corpus"), "--generated", str(out / "g.emb"),
                          "--out", str(out / "fad.csv")]),
                cli_main(["evaluate", "similarity", "--corpus", str(out / "corpus"), "--generated",
                          str(out / "g.emb"), "--out", str(out / "sim.csv")]),
                cli_main(["evaluate", "ablation", "--corpus", str(out / "corpus"), "--checkpoint", str(out / "m.ckpt"),
                          "--n", "3", "--out", str(out / "ablation.csv")]),
            ]
            assert codes == [0] * 6, codes
            runs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    groups = {"gen-corpus": "corpus/", "train": "m.ckpt", "generate": "g.emb", "evaluate": ".csv"}
    verdict = {}
    for cmd, key in groups.items():
        files = [f for f in runs[0] if key in str(f) and (cmd != "evaluate" or "loss" not in str(f))]
        verdict[cmd] = bool(files) and all(runs[0][f] == runs[1].get(f) for f in files)
    ok = all(verdict.values()) and set(runs[0]) == set(runs[1])
    record(7, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in verdict.items())
           + f" ({len(runs[0])} files)")
    assert ok, verdict
    # sanity: the checkpoint really is a disc_plus_flow model
    assert formats.read_checkpoint_header(tmp_path / "run0/m.ckpt")["system"] == "disc_plus_flow"


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print("\n".join(RESULTS))
    sys.exit(code)
