"""Acceptance gate: twelve go/no-go checks on the full system.

Six are oracle checks (finite differences, Monte Carlo, exact streaming
identities, bitwise causality, inference self-consistency); six reproduce
the qualitative orderings of the default comparison grid (adaptation beats
frozen inference, source-free lands near source-light, multi-pass beats
one-pass, filters don't hurt, stream-order stability, temporal-consistency
filtering earns its keep). Each test prints one PASS/FAIL line with the
measured numbers; the grid cells run once per session and are shared.
"""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from streamalign import (
    AugmentationConfig,
    FilterDecision,
    GaussianStats,
    MixtureWeights,
    ModelParams,
    ProtocolConfig,
    RunningStats,
    Stream,
    anchored_clustering_loss,
    backward,
    batch_moments,
    cross_entropy_loss,
    entropy_loss,
    filtered_cluster_update,
    forward,
    gaussian_kl,
    global_alignment_loss,
    init_mlp,
    merge_mixture,
    running_update,
    run_stream,
    self_training_loss,
    uniform_weights,
)
from streamalign.banks import SourceBank, TargetBank
from streamalign.losses import strong_view, weak_view
from streamalign.bench import (
    DomainSpec,
    default_grid,
    generate_domain,
    prepare_source,
    run_grid,
    train_source,
)
from streamalign.source import InferenceConfig, infer_source_means, inference_objective

PP = 0.01  # one percentage point, as an error fraction


def _verdict(num: int, label: str, ok: bool, detail: str) -> None:
    print(f"criterion {num:02d} [{label}]: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {num} ({label}): {detail}"


def _rel_dev(analytic: np.ndarray, fd: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=float).ravel()
    b = np.asarray(fd, dtype=float).ravel()
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-4)))


# ---------------------------------------------------------------------------
# shared fixtures


@pytest.fixture(scope="module")
def grid_rows():
    rows = run_grid(default_grid())
    bad = [f"{r['name']}: {r.get('message')}" for r in rows if r.get("status") != "ok"]
    assert not bad, f"grid cells failed: {bad}"
    return {row["name"]: row for row in rows}


def _median(row) -> float:
    return float(np.median(row["errors"]))


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness for every loss


def _random_gaussian(rng, d, scale=1.0):
    mean = rng.normal(0.0, scale, size=d)
    a = rng.normal(size=(d, d))
    return GaussianStats(mean, a @ a.T + 0.5 * np.eye(d))


def _random_banks(rng, k, d, count, clip):
    classes = [_random_gaussian(rng, d) for _ in range(k)]
    source = SourceBank(classes, _random_gaussian(rng, d), uniform_weights(k), "estimated")
    stats = []
    for _ in range(k):
        g = _random_gaussian(rng, d)
        stats.append(RunningStats(g.mean, g.cov, count=count, clip=clip))
    g = _random_gaussian(rng, d)
    target = TargetBank(
        stats, RunningStats(g.mean, g.cov, count=4 * count, clip=4 * clip),
        uniform_weights(k),
    )
    return source, target


def _flatten_params(params):
    parts = []
    for layer in params.layers:
        parts.append(layer.weight.ravel())
        parts.append(layer.bias.ravel())
    parts.append(params.classifier.ravel())
    return np.concatenate(parts)


def _flatten_grads(grads):
    parts = []
    for layer in grads.layers:
        parts.append(layer.weight.ravel())
        parts.append(layer.bias.ravel())
    parts.append(grads.classifier.ravel())
    return np.concatenate(parts)


def _unflatten(vec, template):
    from streamalign import Layer

    layers, pos = [], 0
    for layer in template.layers:
        w = vec[pos : pos + layer.weight.size].reshape(layer.weight.shape)
        pos += layer.weight.size
        b = vec[pos : pos + layer.bias.size]
        pos += layer.bias.size
        layers.append(Layer(w.copy(), b.copy()))
    return ModelParams(layers, vec[pos:].reshape(template.classifier.shape).copy())


def _fd_param_grad(loss_fn, params, h=1e-5):
    theta = _flatten_params(params)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (loss_fn(_unflatten(up, params)) - loss_fn(_unflatten(dn, params))) / (2 * h)
    return grad


def _fd_feature_grad(value_fn, rows, h=1e-5):
    fd = np.zeros_like(rows)
    for i in range(rows.shape[0]):
        for j in range(rows.shape[1]):
            up, dn = rows.copy(), rows.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd[i, j] = (value_fn(up) - value_fn(dn)) / (2 * h)
    return fd


def _cluster_instance(rng, trial):
    k = 2 + trial % 4
    d = 2 + trial % 5
    n = 5
    count = int(rng.integers(2, 40))
    clip = int(rng.integers(8, 100))
    source, bank0 = _random_banks(rng, k, d, count, clip)
    rows = rng.normal(size=(n, d))
    labels = rng.integers(0, k, size=n)
    accepted = rng.random(n) < 0.7
    accepted[0] = True  # keep at least one member
    decisions = [
        FilterDecision(i, int(labels[i]), bool(accepted[i]), True, bool(accepted[i]))
        for i in range(n)
    ]
    return source, bank0, rows, decisions


def _st_fd_safe(params, x, aug, tau, seed):
    """Screen a self-training instance for finite-difference validity.

    The gated pseudo-label loss is piecewise smooth: the gate and the argmax
    label are step functions of the weak posteriors, and the value clamps the
    log at a tiny floor. Central differences are only meaningful away from
    those kinks, so require a margin at the gate, a separated top-2 on the
    gated rows, and picked probabilities far above the floor.
    """
    probe = np.random.default_rng(seed)
    weak = weak_view(x, aug, probe)
    strong = strong_view(x, aug, probe)
    qw = forward(params, weak).posteriors
    qs = forward(params, strong).posteriors
    gates = qw.max(axis=1) >= tau
    if not gates.any():
        return False
    if np.any(np.abs(qw.max(axis=1) - tau) < 1e-3):
        return False
    top2 = np.sort(qw, axis=1)[gates, -2:]
    if np.any(top2[:, 1] - top2[:, 0] < 1e-3):
        return False
    picked = qs[np.arange(x.shape[0]), qw.argmax(axis=1)][gates]
    return bool(picked.min() > 1e-6)


def test_c01_gradient_correctness():
    rng = np.random.default_rng(20)
    worst = {}

    # anchored clustering and global alignment: d(loss)/d(rows) through the
    # streaming bank update, against finite differences of a full recompute
    for name, which in (("l_ac", "ac"), ("l_ga", "ga")):
        devs = []
        for trial in range(20):
            source, bank0, rows, decisions = _cluster_instance(rng, trial)

            def value(x):
                per_class, _ = filtered_cluster_update(bank0, x, decisions)
                post = running_update(bank0.global_stats, x)
                bank = TargetBank(per_class.class_stats, post, bank0.weights)
                if which == "ac":
                    return anchored_clustering_loss(source, bank, x, decisions)[0]
                return global_alignment_loss(source.global_stats, post, x)[0]

            per_class, _ = filtered_cluster_update(bank0, rows, decisions)
            post = running_update(bank0.global_stats, rows)
            bank = TargetBank(per_class.class_stats, post, bank0.weights)
            if which == "ac":
                _, analytic = anchored_clustering_loss(source, bank, rows, decisions)
            else:
                _, analytic = global_alignment_loss(source.global_stats, post, rows)
            devs.append(_rel_dev(analytic, _fd_feature_grad(value, rows)))
        worst[name] = max(devs)

    # self-training: full parameter gradients on small random networks with a
    # sharpened classifier so the pseudo-label gate opens; instances are
    # screened so finite differences stay away from the gate and argmax kinks
    st_devs = []
    trial = 0
    while len(st_devs) < 20 and trial < 120:
        k = 2 + trial % 4
        d_in = 3 + trial % 3
        trial += 1
        params = init_mlp(rng, d_in, (5,), 4, k)
        params.classifier *= 4.0
        x = rng.normal(size=(8, d_in))
        aug = AugmentationConfig(sigma_weak=0.05, sigma_strong=0.3)
        seed = int(rng.integers(1 << 31))
        if not _st_fd_safe(params, x, aug, 0.5, seed):
            continue
        _, grads, n_in = self_training_loss(
            params, x, aug, 0.5, np.random.default_rng(seed)
        )
        assert n_in > 0
        fd = _fd_param_grad(
            lambda p: self_training_loss(p, x, aug, 0.5, np.random.default_rng(seed))[0],
            params,
        )
        st_devs.append(_rel_dev(_flatten_grads(grads), fd))
    assert len(st_devs) >= 20

    # entropy and source cross-entropy on random networks. Zero-init biases
    # park fully-dead samples exactly on the next layer's relu kink (pre-act
    # 0.0), where central differences straddle the corner, so jitter the
    # biases and require a margin at every kink.
    ent_devs, ce_devs = [], []
    for trial in range(20):
        k = 2 + trial % 4
        d_in = 3 + trial % 3
        for _ in range(50):
            params = init_mlp(rng, d_in, (5,), 4, k)
            for layer in params.layers:
                layer.bias[:] = rng.normal(0.0, 0.2, size=layer.bias.shape)
            x = rng.normal(size=(8, d_in))
            trace = forward(params, x)
            if min(float(np.abs(p).min()) for p in trace.pre_acts) > 1e-3:
                break
        else:
            raise AssertionError("no kink-free instance found")
        labels = rng.integers(0, k, size=8)

        _, d_logits = entropy_loss(trace)
        ent = backward(params, trace, d_logits=d_logits)
        fd = _fd_param_grad(lambda p: entropy_loss(forward(p, x))[0], params)
        ent_devs.append(_rel_dev(_flatten_grads(ent), fd))

        _, d_logits = cross_entropy_loss(trace, labels)
        ce = backward(params, trace, d_logits=d_logits)
        fd = _fd_param_grad(
            lambda p: cross_entropy_loss(forward(p, x), labels)[0], params
        )
        ce_devs.append(_rel_dev(_flatten_grads(ce), fd))
    worst["l_st"] = max(st_devs)
    worst["entropy"] = max(ent_devs)
    worst["source_ce"] = max(ce_devs)

    # source-distribution inference objective: gradient w.r.t. the means
    inf_devs = []
    for trial in range(20):
        k = 2 + trial % 4
        d = 3 + trial % 14  # up to 16
        w = rng.normal(size=(k, d))
        mu = np.abs(rng.normal(size=(k, d)))
        _, grad = inference_objective(w, mu)
        fd = np.zeros_like(mu)
        h = 1e-6
        for i in range(k):
            for j in range(d):
                up, dn = mu.copy(), mu.copy()
                up[i, j] += h
                dn[i, j] -= h
                fd[i, j] = (inference_objective(w, up)[0] - inference_objective(w, dn)[0]) / (2 * h)
        inf_devs.append(_rel_dev(grad, fd))
    worst["inference"] = max(inf_devs)

    bad = {k: v for k, v in worst.items() if v > 1e-4}
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    _verdict(1, "gradient correctness", not bad, f"max rel deviation: {detail}")


# ---------------------------------------------------------------------------
# criterion 2: streaming moments are partition-exact


def test_c02_streaming_moment_exactness():
    rng = np.random.default_rng(21)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 80))
        d = int(rng.integers(1, 8))
        x = rng.normal(1.0, 2.5, size=(n, d))
        whole = batch_moments(x)
        n_cuts = int(rng.integers(1, min(6, n)))
        cuts = np.sort(rng.choice(np.arange(1, n), size=n_cuts, replace=False))
        s = RunningStats.zeros(d)
        for part in np.split(x, cuts):
            if len(part):
                s = running_update(s, part)
        assert s.count == n
        dev = max(
            _rel_dev(s.mean, whole.mean) if np.abs(whole.mean).max() > 0 else 0.0,
            _rel_dev(s.cov, whole.cov),
        )
        worst = max(worst, dev)

    s = RunningStats.zeros(1)
    s = running_update(s, np.array([[0.0]]))
    s = running_update(s, np.array([[2.0]]))
    exact = s.mean[0] == 1.0 and s.cov[0, 0] == 1.0
    _verdict(
        2, "streaming-moment exactness",
        worst <= 1e-9 and exact,
        f"100 partitions, max rel deviation {worst:.2e}; "
        f"{{0}},{{2}} -> ({s.mean[0]}, {s.cov[0, 0]})",
    )


# ---------------------------------------------------------------------------
# criterion 3: closed-form KL vs Monte Carlo


def test_c03_kl_against_monte_carlo():
    rng = np.random.default_rng(22)
    worst = 0.0
    for trial in range(10):
        d = 1 + trial % 4
        p = _random_gaussian(rng, d)
        q = _random_gaussian(rng, d)
        analytic = gaussian_kl(p, q)
        x = rng.multivariate_normal(p.mean, p.cov, size=1_000_000)
        mc = float(
            np.mean(
                multivariate_normal.logpdf(x, p.mean, p.cov)
                - multivariate_normal.logpdf(x, q.mean, q.cov)
            )
        )
        worst = max(worst, abs(analytic - mc) / abs(mc))
    p = _random_gaussian(rng, 3)
    self_kl = gaussian_kl(p, p)
    _verdict(
        3, "KL oracle",
        worst <= 0.01 and self_kl == 0.0,
        f"10 pairs, max rel deviation {worst:.3%}; kl(p,p) = {self_kl}",
    )


# ---------------------------------------------------------------------------
# criterion 4: mixture merge vs pooled sampling


def test_c04_merge_against_pooled_sampling():
    rng = np.random.default_rng(23)
    worst_z = 0.0
    n = 60_000
    for trial in range(10):
        k = 2 + trial % 3
        d = 1 + trial % 4
        comps = [_random_gaussian(rng, d, scale=2.0) for _ in range(k)]
        w = rng.dirichlet(np.full(k, 5.0))
        merged = merge_mixture(comps, MixtureWeights(w))
        labels = rng.choice(k, size=n, p=w)
        x = np.empty((n, d))
        for j in range(k):
            idx = np.flatnonzero(labels == j)
            x[idx] = rng.multivariate_normal(comps[j].mean, comps[j].cov, size=len(idx))
        xbar = x.mean(axis=0)
        se_mean = x.std(axis=0, ddof=1) / np.sqrt(n)
        worst_z = max(worst_z, float(np.max(np.abs(merged.mean - xbar) / se_mean)))
        centered = x - xbar
        prods = centered[:, :, None] * centered[:, None, :]
        c_hat = prods.mean(axis=0)
        se_cov = prods.std(axis=0, ddof=1) / np.sqrt(n)
        worst_z = max(worst_z, float(np.max(np.abs(merged.cov - c_hat) / se_cov)))
    _verdict(
        4, "mixture-merge oracle",
        worst_z <= 3.0,
        f"10 mixtures of {n} pooled samples, max |z| = {worst_z:.2f} (limit 3)",
    )


# ---------------------------------------------------------------------------
# criterion 5: streaming causality on the default benchmark


def test_c05_causality_on_stream_prefixes():
    data = generate_domain(DomainSpec())
    params, _ = train_source(data.train_x, data.train_y, data.val_x, data.val_y)
    source = prepare_source(data.train_x, data.train_y, params, source_free=False)
    cfg = ProtocolConfig.from_dict({
        "protocol": "N-O-SL", "seed": 0, "lambda2": 1.0, "tau_tc_diff": -0.003,
        "sigma_weak": 0.05 * data.input_std, "sigma_strong": 0.15 * data.input_std,
    })
    stream = data.stream.shuffled(0)
    full = run_stream(cfg, source, params, stream, method="full")
    ok = True
    details = []
    for cut in (640, 777):  # batch-aligned and mid-batch
        prefix = Stream(stream.x[:cut].copy(), stream.y[:cut].copy())
        part = run_stream(cfg, source, params, prefix, method="full")
        same = np.array_equal(part.predictions, full.predictions[:cut])
        ok = ok and same
        details.append(f"cut {cut}: {'bitwise equal' if same else 'DIVERGED'}")
    _verdict(5, "causality", ok, "; ".join(details))


# ---------------------------------------------------------------------------
# criteria 6-10, 12: default-grid orderings


def test_c06_adaptation_benefit_ordering(grid_rows):
    full = _median(grid_rows["full"])
    st = _median(grid_rows["st-only"])
    test = _median(grid_rows["test"])
    ablation = _median(grid_rows["anchored-only"])
    ok = (st - full >= PP) and (test - st >= PP) and (ablation - full >= 0.0)
    _verdict(
        6, "adaptation benefit ordering", ok,
        f"full {full:.4f} | st-only {st:.4f} | test {test:.4f} | "
        f"anchored-only {ablation:.4f} (need full+1pp <= st-only+1pp <= test, "
        f"full <= anchored-only)",
    )


def test_c07_source_free_viability(grid_rows):
    sf = _median(grid_rows["full-source-free"])
    sl = _median(grid_rows["full"])
    test = _median(grid_rows["test"])
    ok = (test - sf >= 5 * PP) and (sf - sl <= 5 * PP)
    _verdict(
        7, "source-free viability", ok,
        f"source-free {sf:.4f} vs test {test:.4f} (gain {100 * (test - sf):.2f}pp, "
        f"need >= 5) and vs source-light {sl:.4f} (gap {100 * (sf - sl):.2f}pp, need <= 5)",
    )


def test_c08_multi_pass_gain(grid_rows):
    nm = _median(grid_rows["full-multipass"])
    no = _median(grid_rows["full"])
    _verdict(
        8, "multi-pass gain", nm <= no,
        f"multi-pass {nm:.4f} <= one-pass {no:.4f}",
    )


def test_c09_filter_ablation(grid_rows):
    with_f = _median(grid_rows["full"])
    without = _median(grid_rows["full-no-filters"])
    ok = (without >= with_f) and (with_f <= without + 0.5 * PP)
    _verdict(
        9, "filter ablation", ok,
        f"with filters {with_f:.4f} vs without {without:.4f} "
        f"(disabling must not improve; with <= without + 0.5pp)",
    )


def test_c10_stream_order_robustness(grid_rows):
    std = grid_rows["full"]["error_std"]
    _verdict(
        10, "stream-order robustness", std <= 0.75 * PP,
        f"std over 5 shuffles {100 * std:.3f}pp (limit 0.75pp)",
    )


def test_c11_source_inference_self_consistency():
    rng = np.random.default_rng(3)
    trials, ok_trials, nonneg = 20, 0, 0
    for _ in range(trials):
        k = int(rng.integers(2, 9))
        d = int(rng.integers(k, 33))
        w = rng.normal(size=(k, d))
        for _ in range(50):  # redraw near-colinear class rows
            norms = np.linalg.norm(w, axis=1, keepdims=True)
            cos = (w / norms) @ (w / norms).T
            np.fill_diagonal(cos, 0.0)
            if cos.max() < 0.95:
                break
            w = rng.normal(size=(k, d))
        result = infer_source_means(w, InferenceConfig(seed=int(rng.integers(1 << 31))))
        nonneg += bool(np.all(result.means >= 0.0))
        ok_trials += result.consistency_rate == 1.0
    ok = ok_trials >= 0.95 * trials and nonneg == trials
    _verdict(
        11, "inference self-consistency", ok,
        f"{ok_trials}/{trials} fully self-consistent (need >= {int(0.95 * trials)}), "
        f"{nonneg}/{trials} nonnegative (need all)",
    )


def test_c12_temporal_consistency_earns_its_keep(grid_rows):
    disabled = _median(grid_rows["full-no-tc"])
    tuned = _median(grid_rows["full"])
    _verdict(
        12, "threshold sensitivity shape", disabled >= tuned,
        f"TC disabled {disabled:.4f} >= tuned default {tuned:.4f}",
    )
