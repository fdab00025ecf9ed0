"""Acceptance checks for the full engine: gradient correctness, exact scoring
math, sampler fidelity, generator recovery, anchored retraining, end-to-end
detection on a planted-anomaly stream, metric oracles, and the feedback loop.

Each check prints exactly one [acceptance] PASS/FAIL line on the live
terminal (capture is bypassed) so a plain pytest run shows the scorecard."""

import gzip
import math
import os
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from anomstream import kernels
from anomstream import train as tr
from anomstream.evaluate import detection_rate_at_budget, truncated_roc
from anomstream.ingest import (SynthConfig, generate_synthetic,
                               intern_records, parse_auth, parse_proc,
                               parse_redteam, register_default_schema)
from anomstream.model import (CLAMP, ModelParams, conditional_distribution,
                              conditional_probability)
from anomstream.schema import Catalog, Event
from anomstream.score import Scorer, discrete_p_value, fit_standardizer
from anomstream.stream import (RetrainConfig, group_by_window, process_window,
                               retrain, window_rng)
from anomstream.train import (Adam, TrainConfig, build_noise_tables, fit,
                              pack_events, run_epoch, sample_fixed_negatives)
from helpers import (draw_negatives, fd_gradients, make_catalog, one_type_catalog,
                     oracle_roc, random_events, rel_err, small_setup)


def report(capsys, name: str, ok: bool, detail: str = "") -> None:
    tail = f" ({detail})" if detail else ""
    line = f"[acceptance] {name}: {'PASS' if ok else 'FAIL'}{tail}"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, line


# 1. analytic gradients of the weighted event loss vs central differences


def test_gradients_match_finite_differences(capsys):
    t0 = time.time()
    backends = [kernels.get_backend(n) for n in kernels.available_backends()]
    worst = 0.0
    for k in range(100):
        rng = np.random.default_rng(900 + k)
        d = int(rng.integers(2, 9))
        cat = make_catalog(int(rng.integers(2, 11)), int(rng.integers(2, 10)))
        events = random_events(cat, 40, rng)
        cat.accumulate_counts(events)
        noises = build_noise_tables(cat)
        params = ModelParams.initialize(cat, d, rng)
        params.embeddings[:] = rng.normal(0.0, 1.0, params.embeddings.shape)
        for tp in params.type_params.values():
            tp.beta[:] = rng.normal(1.0, 0.3, d)
            tp.log_sigma[:] = rng.normal(0.0, 0.3, tp.log_sigma.shape)
            for w in tp.weights:
                w[:] = rng.normal(1.0, 0.3, w.shape)
        ev = events[int(rng.integers(len(events)))]
        negs = draw_negatives(cat, ev, noises, int(rng.integers(1, 8)), rng)
        g_emb, g_w, g_beta, g_ls = fd_gradients(params, cat, ev, negs, noises,
                                                h=1e-5)
        for backend in backends:
            _, grads = tr.event_gradients(params, cat, ev, negs, noises,
                                          backend=backend)
            eid = ev.event_type
            worst = max(worst, rel_err(grads.emb, g_emb))
            for key, g in g_w.items():
                worst = max(worst, rel_err(grads.w[key], g))
            worst = max(worst, rel_err(grads.beta[eid], g_beta))
            worst = max(worst, rel_err(grads.log_sigma[eid], g_ls))
    elapsed = time.time() - t0
    report(capsys, "gradient-check", worst < 1e-4 and elapsed < 60,
           f"max rel err {worst:.2e} over 100 instances x "
           f"{[b.BACKEND_NAME for b in backends]}, {elapsed:.1f}s")


# 2. softmax probabilities and discrete p-values vs brute-force enumeration


def brute_conditional(params, cat, eid, position, prefix):
    """Plain-python softmax over the whole vocabulary."""
    spec = cat.event_spec(eid)
    tp = params.type_params[eid]
    d = params.dim
    w = tp.weights[position - 2]
    h = [0.0] * d
    for j, local in enumerate(prefix):
        row = params.embeddings[cat.global_row(spec.signature[j], local)]
        for c in range(d):
            h[c] += float(w[j]) * float(row[c])
    cand_type = spec.signature[position - 1]
    kappas = []
    for v in range(cat.n_entities(cand_type)):
        x = params.embeddings[cat.global_row(cand_type, v)]
        z = sum(float(tp.beta[c]) * float(x[c]) * h[c] for c in range(d))
        kappas.append(math.exp(min(max(z, -CLAMP), CLAMP)))
    total = sum(kappas)
    return [kap / total for kap in kappas]


def test_probabilities_match_brute_force(capsys):
    t0 = time.time()
    worst = 0.0
    for k in range(50):
        rng = np.random.default_rng(2200 + k)
        cat = make_catalog(int(rng.integers(2, 26)), int(rng.integers(2, 26)))
        events = random_events(cat, 10, rng)
        params = ModelParams.initialize(cat, int(rng.integers(2, 7)), rng)
        params.embeddings[:] = rng.normal(0.0, 1.0, params.embeddings.shape)
        for tp in params.type_params.values():
            tp.beta[:] = rng.normal(1.0, 0.3, params.dim)
        for ev in events[:4]:
            spec = cat.event_spec(ev.event_type)
            for i in range(2, spec.arity + 1):
                probs = brute_conditional(params, cat, ev.event_type, i,
                                          ev.entities[: i - 1])
                for v in range(len(probs)):
                    got = conditional_probability(params, cat, ev.event_type,
                                                  i, ev.entities[: i - 1], v)
                    worst = max(worst, abs(got - probs[v]))
                p_obs = probs[ev.entities[i - 1]]
                want = sum(p for p in probs if p <= p_obs)
                got = discrete_p_value(params, cat, ev, i)
                worst = max(worst, abs(got - want))
    elapsed = time.time() - t0
    report(capsys, "exact-probabilities", worst <= 1e-12 and elapsed < 60,
           f"max abs diff {worst:.2e} over 50 vocabularies, {elapsed:.1f}s")


# 3. negative-sampling distribution matches its log-count target


def test_noise_sampler_matches_target(capsys):
    rng = np.random.default_rng(1)
    counts = rng.integers(1, 1000, size=100)
    cat = one_type_catalog(1, 100)
    events = []
    for v, c in enumerate(counts):
        events.extend([Event(0, 0, (0, v))] * int(c))
    cat.accumulate_counts(events)
    noise = build_noise_tables(cat)[(0, 2)]
    target = np.log1p(counts.astype(float))
    target /= target.sum()
    draws = noise.sample(10**6, np.random.default_rng(501))
    freq = np.bincount(noise.support_local[draws], minlength=100) / 1e6
    tv = 0.5 * float(np.abs(freq - target).sum())
    report(capsys, "noise-sampling", tv <= 0.005,
           f"TV {tv:.5f} over 1e6 draws on a 100-entity support")


# 4. training recovers a known conditional distribution


def test_training_recovers_generator(capsys):
    t0 = time.time()
    gen = np.random.default_rng(42)
    table = gen.gamma(0.5, size=(20, 20)) + 1e-3
    table /= table.sum(axis=1, keepdims=True)
    prefixes = gen.integers(0, 20, size=100_000)
    cdf = table.cumsum(axis=1)
    u = gen.random(100_000)
    cands = (u[:, None] > cdf[prefixes]).sum(axis=1)
    events = [Event(0, 0, (int(p), int(c))) for p, c in zip(prefixes, cands)]

    cat = one_type_catalog(20, 20)
    cat.accumulate_counts(events)
    cfg = TrainConfig(dim=32, negatives=20, epochs=20, batch_size=256,
                      learning_rate=3e-3, seed=0)
    result = fit(events, cat, cfg, noises=build_noise_tables(cat))

    occ = np.bincount(prefixes, minlength=20)
    tvs = [0.5 * float(np.abs(
               conditional_distribution(result.params, cat, 0, 2, (p,))
               - table[p]).sum())
           for p in range(20) if occ[p] >= 500]
    elapsed = time.time() - t0
    ok = len(tvs) == 20 and max(tvs) <= 0.1 and elapsed < 600
    report(capsys, "generator-recovery", ok,
           f"max TV {max(tvs):.3f} over {len(tvs)} prefixes "
           f"({result.backend} backend, {elapsed:.1f}s)")


# 5. standardized training scores have zero mean and unit variance per type


def test_standardized_training_scores_centered(capsys):
    cat, events, noises, params = small_setup(seed=5, n_events=400, dim=6)
    scored = Scorer(params, cat, None).score_events(events)
    st = fit_standardizer(scored, cat)
    by_type = defaultdict(list)
    for s in scored:
        name = cat.event_spec(s.event.event_type).name
        by_type[name].append(st.transform(name, s.raw_score))
    worst_mean = max(abs(float(np.mean(v))) for v in by_type.values())
    worst_std = max(abs(float(np.std(v, ddof=1)) - 1.0)
                    for v in by_type.values())
    report(capsys, "standardization",
           worst_mean < 1e-9 and worst_std < 1e-9,
           f"max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e} "
           f"across {len(by_type)} event types")


# 6. anchored retraining: huge lambda pins old embeddings; zero lambda
#    reduces a retrain epoch to a plain embedding-only epoch, bit for bit


def test_retrain_anchoring_and_plain_epoch_equivalence(capsys):
    backend = kernels.get_backend("numpy")

    cat, events, noises, params = small_setup(seed=11, n_events=400, dim=6)
    pinned = params.copy()
    cfg = RetrainConfig(lambda0=1e6, lambda1=1e6, learning_rate=3e-3,
                        batch_size=64, negatives=5, max_epochs=4,
                        min_improvement=-1.0)
    stats = retrain(events, pinned, cat, cfg, window_rng(5, 1), noises,
                    window_idx=1, backend=backend)
    drift_ok = 0.0 < stats.drift_old_max < 1e-3 and stats.epochs_run == 4

    cat, events, noises, params0 = small_setup(seed=12, n_events=500, dim=6)
    cfg = RetrainConfig(lambda0=0.0, lambda1=0.0, learning_rate=3e-3,
                        batch_size=64, negatives=5, max_epochs=1,
                        min_improvement=0.0)
    p_r = params0.copy()
    retrain(events, p_r, cat, cfg, window_rng(7, 3), noises, window_idx=3,
            backend=backend)

    # mirror the retrain rng stream: split permutation, validation negatives,
    # then one plain embedding-only epoch on the retrain slice
    rng = window_rng(7, 3)
    perm = rng.permutation(len(events))
    n_val = min(max(int(round(cfg.validation_fraction * len(events))), 1),
                len(events) - 1)
    val = [events[i] for i in perm[:n_val]]
    ret = [events[i] for i in perm[n_val:]]
    sample_fixed_negatives(pack_events(val, cat), cat, noises, cfg.negatives,
                           rng)
    p_m = params0.copy()
    optimizer = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                     cfg.adam_epsilon)
    shim = TrainConfig(dim=p_m.dim, negatives=cfg.negatives,
                       batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate)
    run_epoch(p_m, pack_events(ret, cat), cat, noises, optimizer, shim, rng,
              1, backend=backend, update_type_params=False)

    exact = np.array_equal(p_r.embeddings, p_m.embeddings)
    frozen = all(
        np.array_equal(p_r.type_params[e].beta, p_m.type_params[e].beta)
        and np.array_equal(p_r.type_params[e].log_sigma,
                           p_m.type_params[e].log_sigma)
        and all(np.array_equal(a, b)
                for a, b in zip(p_r.type_params[e].weights,
                                p_m.type_params[e].weights))
        for e in p_r.type_params)
    report(capsys, "retrain-anchoring", drift_ok and exact and frozen,
           f"old-row drift {stats.drift_old_max:.1e} under lambda 1e6; "
           f"zero-lambda epoch bit-exact={exact}")


# 7. planted cross-community anomalies are detected end to end


AUTH_TYPES = {"local_auth", "remote_auth"}


def _planted_anomaly_run(seed: int) -> tuple[float, float]:
    synth = SynthConfig()
    records = group_by_window(generate_synthetic(synth), synth.window_seconds)
    cat = register_default_schema(Catalog())
    train_events = []
    for t in range(synth.train_windows):
        train_events.extend(intern_records(records[t], cat,
                                           synth.window_seconds))
    cat.accumulate_counts(train_events)
    noises = build_noise_tables(cat)
    cfg = TrainConfig(dim=32, negatives=10, epochs=12, batch_size=512,
                      learning_rate=3e-3, seed=seed)
    params = fit(train_events, cat, cfg, noises=noises).params
    standardizer = fit_standardizer(
        Scorer(params, cat, None).score_events(train_events), cat)

    rcfg = RetrainConfig()
    daily: dict[int, list] = {}
    for t in sorted(k for k in records if k >= synth.train_windows):
        events = intern_records(records[t], cat, synth.window_seconds)
        rep = process_window(events, params, cat, t, noises, rcfg,
                             standardizer, window_rng(seed, t))
        daily[t] = [(s.standardized_score, s.event.label, s.event.timestamp)
                    for s in rep.scored
                    if cat.event_spec(s.event.event_type).name in AUTH_TYPES]

    flat = [r for rows in daily.values() for r in rows]
    _, auc = truncated_roc([r[0] for r in flat], [r[1] for r in flat],
                           max_fpr=0.01)
    return auc, detection_rate_at_budget(daily, budget=160)


def test_planted_anomalies_detected(capsys):
    t0 = time.time()
    results = [_planted_anomaly_run(seed) for seed in range(5)]
    aucs = [auc for auc, _ in results]
    drs = [dr for _, dr in results]
    elapsed = time.time() - t0
    ok = (float(np.mean(aucs)) >= 0.3 and float(np.mean(drs)) >= 0.5
          and elapsed < 1800)
    report(capsys, "planted-anomalies", ok,
           f"mean auc@1% {np.mean(aucs):.3f} (min {min(aucs):.3f}), "
           f"mean dr-160 {np.mean(drs):.3f} over 5 seeds, {elapsed:.0f}s")


# 8. metric implementations vs independent oracles and hand cases


def test_metric_oracles(capsys):
    rng = np.random.default_rng(77)
    roc_ok = True
    for trial in range(60):
        n = int(rng.integers(5, 201))
        if trial % 3 == 0:
            scores = rng.normal(size=n).tolist()
        else:
            scores = rng.integers(0, 8, size=n).astype(float).tolist()
        labels = rng.integers(0, 2, size=n).tolist()
        if sum(labels) in (0, n):
            labels[0] = 1 - labels[0]
        max_fpr = float(rng.choice([0.01, 0.05, 0.1, 0.5, 1.0]))
        want = oracle_roc(scores, labels, max_fpr)
        got = truncated_roc(scores, labels, max_fpr)
        roc_ok = roc_ok and got == want

    two_day = {0: [(3.0, 1), (2.0, 0)], 1: [(5.0, 0), (4.0, 1)]}
    dr_ok = (detection_rate_at_budget(two_day, 1) == 0.5
             and detection_rate_at_budget(two_day, 2) == 1.0
             and detection_rate_at_budget(
                 {0: [(1.0, 0, 5), (1.0, 1, 3)]}, 1) == 1.0
             and detection_rate_at_budget(
                 {0: [(1.0, 1, 3), (1.0, 0, 3)]}, 1) == 1.0
             and detection_rate_at_budget(
                 {0: [(1.0, 0, 3), (1.0, 1, 3)]}, 1) == 0.0)
    report(capsys, "metric-oracles", roc_ok and dr_ok,
           f"roc == enumeration oracle on 60 instances (n<=200), "
           f"budget hand cases exact")


# 9. real-corpus ingestion tallies (runs only when the corpus is available)


DAY = 86400
TRAIN_DAYS = 8
TOTAL_DAYS = 13


def _corpus_file(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = root / name
        if p.exists():
            return p
    raise AssertionError(f"{stem}(.gz) not found under {root}")


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def test_corpus_ingestion_tallies(capsys, tmp_path):
    corpus = os.environ.get("ANOMSTREAM_LANL_DIR")
    if not corpus:
        with capsys.disabled():
            print("[acceptance] corpus-tallies: SKIP "
                  "(set ANOMSTREAM_LANL_DIR to run)", flush=True)
        pytest.skip("corpus directory not configured")
    root = Path(corpus)
    cutoff = TOTAL_DAYS * DAY

    red_path = _corpus_file(root, "redteam.txt")
    if red_path.suffix == ".gz":
        plain = tmp_path / "redteam.txt"
        with gzip.open(red_path, "rt", encoding="utf-8") as f:
            plain.write_text(f.read())
        red_path = plain
    redteam = parse_redteam(str(red_path))

    users: set = set()
    computers: set = set()
    auth_types: set = set()
    auth_total = {"local_auth": [0, 0], "remote_auth": [0, 0]}
    auth_mal = {"local_auth": [0, 0], "remote_auth": [0, 0]}
    # the corpus is time-ordered; stop at the end of the evaluation slice
    with _open_text(_corpus_file(root, "auth.txt")) as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            head = line.split(",", 1)[0]
            if head.isdigit() and int(head) >= cutoff:
                break
            rec = parse_auth(line, i)
            if rec is None:
                continue
            split = 0 if rec.timestamp // DAY < TRAIN_DAYS else 1
            users.add(rec.entity_names[0])
            auth_types.add(rec.entity_names[1])
            computers.update(rec.entity_names[2:])
            auth_total[rec.type_name][split] += 1
            parts = line.rstrip("\n").split(",")
            if (rec.timestamp, parts[2], parts[3], parts[4]) in redteam:
                auth_mal[rec.type_name][split] += 1

    proc_counts: dict[str, int] = {}
    proc_total = [0, 0]
    with _open_text(_corpus_file(root, "proc.txt")) as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            head = line.split(",", 1)[0]
            if head.isdigit() and int(head) >= cutoff:
                break
            rec = parse_proc(line, i)
            if rec is None:
                continue
            split = 0 if rec.timestamp // DAY < TRAIN_DAYS else 1
            computers.add(rec.entity_names[0])
            users.add(rec.entity_names[1])
            proc_counts[rec.entity_names[2]] = \
                proc_counts.get(rec.entity_names[2], 0) + 1
            proc_total[split] += 1
    # rare processes collapse into one shared token entity
    n_processes = (sum(1 for c in proc_counts.values() if c >= 40)
                   + (1 if any(c < 40 for c in proc_counts.values()) else 0))

    want = {
        "users": (len(users), 13_176),
        "computers": (len(computers), 13_090),
        "auth types": (len(auth_types), 24),
        "processes": (n_processes, 1_593),
        "train local": (auth_total["local_auth"][0], 3_418_117),
        "train local mal": (auth_mal["local_auth"][0], 0),
        "train remote": (auth_total["remote_auth"][0], 13_198_597),
        "train remote mal": (auth_mal["remote_auth"][0], 50),
        "test local": (auth_total["local_auth"][1], 2_173_349),
        "test local mal": (auth_mal["local_auth"][1], 0),
        "test remote": (auth_total["remote_auth"][1], 8_310_963),
        "test remote mal": (auth_mal["remote_auth"][1], 473),
        "train proc": (proc_total[0], 4_949_066),
        "test proc": (proc_total[1], 2_758_106),
    }
    bad = {k: v for k, v in want.items() if v[0] != v[1]}
    report(capsys, "corpus-tallies", not bad,
           "all 14 tallies exact" if not bad else f"mismatches: {bad}")


# 10. feedback isolation: a malicious mark reshapes the next parameters but
#     can never touch scores the window already produced


def test_feedback_changes_future_parameters_only(capsys):
    cat, events, noises, params = small_setup(seed=9, n_events=300, dim=6)
    rcfg = RetrainConfig(learning_rate=1e-3, batch_size=64, negatives=5,
                         max_epochs=2, min_improvement=0.0)
    base = params.copy()
    runs = {}
    for name, exclude in (("none", None), ("one", {7}),
                          ("all", set(range(len(events))))):
        p = base.copy()
        rep = process_window(events, p, cat, 1, noises, rcfg, None,
                             window_rng(9, 1), extra_exclude=exclude)
        runs[name] = (p, [(s.p_values, s.raw_score, s.standardized_score)
                          for s in rep.scored])

    scores_frozen = runs["none"][1] == runs["one"][1] == runs["all"][1]
    params_move = not np.array_equal(runs["none"][0].embeddings,
                                     runs["one"][0].embeddings)
    trained_at_all = not np.array_equal(runs["none"][0].embeddings,
                                        base.embeddings)
    empty_noop = np.array_equal(runs["all"][0].embeddings, base.embeddings)
    report(capsys, "feedback-isolation",
           scores_frozen and params_move and trained_at_all and empty_noop,
           "verdict shifts next-window parameters; emitted scores and the "
           "empty-retrain case are untouched")
