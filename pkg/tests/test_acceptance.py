"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or directly with ``python tests/test_acceptance.py``.

Criterion 8 compares ingestion counts against the published dataset sizes.
Real files are used when ``METAMF_DATA_DIR`` points at a directory holding
``douban.tsv``, ``ml-1m/ratings.dat`` or ``jester.csv``; otherwise files
with exactly those counts are synthesized.
"""

from __future__ import annotations

import functools
import json
import os
import sys
import time
from pathlib import Path

import mpmath
import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
from conftest import central_difference, relative_errors  # noqa: E402

from metamf import autodiff as ad  # noqa: E402
from metamf.analysis import EmbeddingRequest, conditional_affinities, squared_distances, tsne_embed  # noqa: E402
from metamf.cli import main as cli_main  # noqa: E402
from metamf.dataset import (  # noqa: E402
    Ratings,
    UserGroup,
    identify_user_groups,
    movielens_like_ratings,
    sample_privacy_budget,
    split_dataset,
    synthetic_ratings,
)
from metamf.evaluation import (  # noqa: E402
    EvalReport,
    beta_sweep,
    bind_baseline,
    delta_mae_at_beta,
    group_mae,
    mae,
    mse,
    one_tailed_t_test,
)
from metamf.model import METAMF, NOMETAMF, NON_META, MetaParams, ModelConfig, forward, predict  # noqa: E402
from metamf.optim import Adam  # noqa: E402
from metamf.training import TrainConfig, training_step  # noqa: E402

RESULTS: list[str] = []


def record(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------ 1 gradients


def criterion_gradients():
    cfg = ModelConfig(d_user=4, d_collab=4, d_item=4, d_rp_hidden=3)
    t0 = time.perf_counter()
    fractions = []
    for seed in range(5):
        p = MetaParams.initialize(cfg, 6, 5, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(100 + seed)
        users, items = rng.integers(0, 6, 12), rng.integers(0, 5, 12)
        targets = rng.uniform(1, 5, 12)
        with ad.Tape() as tape:
            loss = ad.mse_loss(forward(p, users, items), ad.Tensor(targets.reshape(-1, 1), dtype=np.float64))
        tape.backward(loss)
        tensors = list(p)
        nums = central_difference(lambda: np.mean((predict(p, users, items) - targets) ** 2),
                                  [t.values for t in tensors], step=1e-4)
        errs = np.concatenate([relative_errors(t.grad, n) for t, n in zip(tensors, nums)])
        fractions.append(float(np.mean(errs < 1e-4)))
    seconds = time.perf_counter() - t0
    ok = min(fractions) >= 0.99 and seconds < 60
    return ok, f"min fraction within 1e-4 over 5 seeds = {min(fractions):.4f}, {seconds:.1f}s"


# ---------------------------------------------------------------- 2 freeze


def criterion_freeze():
    t0 = time.perf_counter()
    records = synthetic_ratings(40, 30, rank=1, density=0.5, seed=0)
    params = MetaParams.initialize(ModelConfig(variant=NOMETAMF), 40, 30, seed=0)
    init = params.snapshot()
    opt = Adam(params.trainable(), lr=1e-3)
    rng = np.random.default_rng(0)
    for _ in range(100):
        idx = rng.integers(0, len(records), 32)
        training_step(params, opt, records.users[idx], records.items[idx], records.ratings[idx])
    after = params.snapshot()
    frozen_ok = all(np.array_equal(init[n], after[n]) for n in init if n not in NON_META)
    moved_ok = all(not np.array_equal(init[n], after[n]) for n in NON_META)
    seconds = time.perf_counter() - t0
    ok = frozen_ok and moved_ok and seconds < 60
    return ok, (f"{len(init) - len(NON_META)} meta tensors bitwise unchanged={frozen_ok}, "
                f"user_embeddings and memory moved={moved_ok}, {seconds:.1f}s")


# --------------------------------------------------------------- 3 sampler


def criterion_sampler():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    sizes = rng.integers(1, 201, 1000)
    users = np.repeat(np.arange(1000), sizes)
    train = Ratings(users, rng.integers(0, 5000, users.size), rng.integers(1, 6, users.size))
    problems = []
    previous = None
    for tenths in range(10, 0, -1):
        beta = tenths / 10
        s = sample_privacy_budget(train, beta, seed=7)
        want = np.maximum(1, (tenths * sizes + 5) // 10)  # integer round-half-up
        got = np.bincount(s.records.users, minlength=1000)
        if not np.array_equal(got, want):
            problems.append(f"counts at {beta}")
        if not np.all(train.users[s.index] == s.records.users):
            problems.append(f"not a subset at {beta}")
        if previous is not None and not set(s.index.tolist()) <= previous:
            problems.append(f"not nested at {beta}")
        previous = set(s.index.tolist())
        again = sample_privacy_budget(train, beta, seed=7)
        if not np.array_equal(again.index, s.index):
            problems.append(f"not deterministic at {beta}")
    seconds = time.perf_counter() - t0
    ok = not problems and seconds < 10
    return ok, f"{users.size} ratings, 10 budgets, {seconds:.2f}s" + (f", problems: {problems}" if problems else "")


# --------------------------------------------------------------- 4 metrics


def criterion_metrics():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 300))
        p, t, p2 = rng.uniform(0, 6, n), rng.integers(1, 6, n).astype(float), rng.uniform(0, 6, n)
        loop_mae = sum(abs(a - b) for a, b in zip(p, t)) / n
        loop_mse = sum((a - b) ** 2 for a, b in zip(p, t)) / n
        loop_mae2 = sum(abs(a - b) for a, b in zip(p2, t)) / n
        full = EvalReport(mae=mae(p, t), mse=mse(p, t), n=n, test_hash="h")
        at_beta = EvalReport(mae=mae(p2, t), mse=mse(p2, t), n=n, test_hash="h")
        worst = max(worst, abs(mae(p, t) - loop_mae), abs(mse(p, t) - loop_mse),
                    abs(delta_mae_at_beta(at_beta, full) - loop_mae2 / loop_mae))
        users = rng.integers(0, 20, n)
        groups = [UserGroup("a", frozenset(range(0, 7))), UserGroup("b", frozenset(range(7, 20)))]
        parts = group_mae(p, t, users, groups) if len(set(users < 7)) == 2 else None
        if parts:
            total = sum(m * k for m, k in parts.values()) / n
            worst = max(worst, abs(total - mae(p, t)))
        identity = bind_baseline(full, full).delta_mae
        if identity != 1.0:
            return False, f"delta MAE at 1.0 is {identity!r}"
    ok = worst < 1e-9
    return ok, f"max deviation from loop oracles {worst:.2e} over 100 instances; delta MAE at 1.0 = 1.0 exactly"


# ------------------------------------------------------ 5 and 6 desk sweep

DESK_BETAS = (1.0, 0.9, 0.7, 0.5, 0.3, 0.1)
DESK_SEEDS = (0, 1, 2)


@functools.lru_cache(maxsize=1)
def desk_sweep():
    """Both variants on the desk dataset; each seed drives init, shuffles and sampling."""
    t0 = time.perf_counter()
    records = movielens_like_ratings(400, 300, min_count=10, seed=0)
    split = split_dataset(records, seed=0, n_users=400, n_items=300)
    groups = identify_user_groups(split.train, split.n_users)
    train_cfg = TrainConfig(learning_rate=2e-3, batch_size=128)
    out = {}
    for variant in (METAMF, NOMETAMF):
        reports = beta_sweep(ModelConfig(variant=variant), train_cfg, split, betas=DESK_BETAS,
                             seeds=DESK_SEEDS, groups=groups, dataset="desk")
        out[variant] = {(r.seed, r.beta): r for r in reports}
    return out, time.perf_counter() - t0


def criterion_trend():
    reports, seconds = desk_sweep()
    meta = np.median([reports[METAMF][(s, 0.1)].delta_mae for s in DESK_SEEDS])
    nometa = np.median([reports[NOMETAMF][(s, 0.1)].delta_mae for s in DESK_SEEDS])
    curve = [float(np.median([reports[METAMF][(s, b)].delta_mae for s in DESK_SEEDS])) for b in DESK_BETAS]
    monotone = all(b >= a * 0.98 for a, b in zip(curve, curve[1:]))
    ok_a = nometa > meta
    ok = ok_a and monotone and seconds < 20 * 60
    curve_txt = " ".join(f"{b}:{d:.3f}" for b, d in zip(DESK_BETAS, curve))
    return ok, (f"(a) median dMAE@0.1 NoMetaMF {nometa:.3f} vs MetaMF {meta:.3f} -> {ok_a}; "
                f"(b) MetaMF median curve [{curve_txt}] monotone within 2% -> {monotone}; "
                f"sweep {seconds:.0f}s")


def _fixed_t_cases():
    rng = np.random.default_rng(2024)
    cases = [([2.1, 2.0, 1.9], [1.1, 1.0, 0.9]), ([1.0, 2.0, 3.0, 4.0], [1.5, 2.5, 3.5])]
    while len(cases) < 20:
        na, nb = int(rng.integers(2, 60)), int(rng.integers(2, 60))
        a = rng.normal(rng.uniform(0.5, 1.2), rng.uniform(0.1, 1.0), na)
        b = rng.normal(rng.uniform(0.5, 1.2), rng.uniform(0.1, 1.0), nb)
        cases.append((a.tolist(), b.tolist()))
    return cases


def _oracle(a, b):
    mpmath.mp.dps = 40
    a = [mpmath.mpf(x) for x in a]
    b = [mpmath.mpf(x) for x in b]
    ma, mb = mpmath.fsum(a) / len(a), mpmath.fsum(b) / len(b)
    va = mpmath.fsum((x - ma) ** 2 for x in a) / (len(a) - 1) / len(a)
    vb = mpmath.fsum((x - mb) ** 2 for x in b) / (len(b) - 1) / len(b)
    t = (ma - mb) / mpmath.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    const = mpmath.gamma((df + 1) / 2) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
    p = mpmath.quad(lambda x: const * (1 + x * x / df) ** (-(df + 1) / 2), [t, mpmath.inf])
    return float(t), float(p)


def criterion_groups():
    reports, _ = desk_sweep()
    low = [reports[METAMF][(s, 1.0)].groups["Low"][0] for s in DESK_SEEDS]
    high = [reports[METAMF][(s, 1.0)].groups["High"][0] for s in DESK_SEEDS]
    ordering = float(np.median(low)) > float(np.median(high))
    worst_t = worst_p = 0.0
    for a, b in _fixed_t_cases():
        r = one_tailed_t_test(a, b)
        t, p = _oracle(a, b)
        worst_t = max(worst_t, abs(r.t_statistic - t))
        worst_p = max(worst_p, abs(r.p_value_one_tailed - p))
    oracle_ok = worst_t < 1e-6 and worst_p < 1e-4
    ok = ordering and oracle_ok
    return ok, (f"median MAE Low {np.median(low):.3f} > High {np.median(high):.3f} -> {ordering}; "
                f"t-test vs oracle on 20 cases: max |dt| {worst_t:.1e}, max |dp| {worst_p:.1e}")


# ------------------------------------------------------------------ 7 t-SNE


def criterion_tsne():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 250)
    x = rng.normal(size=(500, 10))
    x[labels == 1, 0] += 20.0
    p, _ = conditional_affinities(squared_distances(x), 30.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
    entropy_err = float(np.max(np.abs(h - np.log(30.0))))
    a = tsne_embed(EmbeddingRequest(x, perplexity=30, seed=3))
    b = tsne_embed(EmbeddingRequest(x, perplexity=30, seed=3))
    seconds = (time.perf_counter() - t0) / 2
    d = np.sum((a.coordinates[:, None, :] - a.coordinates[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1)[:, :10]
    purity = float(np.mean(labels[nn] == labels[:, None]))
    same = np.array_equal(a.coordinates, b.coordinates)
    ok = purity >= 0.95 and entropy_err < 1e-5 and same and seconds < 120
    return ok, f"purity@10 {purity:.3f}, entropy error {entropy_err:.1e}, deterministic {same}, {seconds:.1f}s per run"


# -------------------------------------------------------------- 8 ingestion

PUBLISHED = {
    # name: (format, users, items, ratings, rescale)
    "douban": ("tsv", 2509, 39576, 893575, None),
    "ml-1m": ("movielens", 6040, 3706, 1000209, None),
    "jester": ("csv", 73421, 100, 4136360, "-10,10"),
}
REAL_FILES = {"douban": "douban.tsv", "ml-1m": "ml-1m/ratings.dat", "jester": "jester.csv"}


def _synthesize(path, fmt, n_users, n_items, n_ratings, seed):
    """A file with exactly the given counts; consecutive windows cover every item."""
    counts = np.full(n_users, n_ratings // n_users)
    counts[: n_ratings - counts.sum()] += 1
    users = np.repeat(np.arange(1, n_users + 1), counts)
    items = np.arange(n_ratings) % n_items + 1
    rng = np.random.default_rng(seed)
    if fmt == "csv":
        values = np.round(rng.uniform(-10, 10, n_ratings), 2).tolist()
    else:
        values = rng.integers(1, 6, n_ratings).tolist()
    sep = {"tsv": "\t", "csv": ",", "movielens": "::"}[fmt]
    tail = "::978300760" if fmt == "movielens" else ""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(f"{u}{sep}{i}{sep}{v}{tail}" for u, i, v in zip(users.tolist(), items.tolist(), values)))
        fh.write("\n")


def criterion_ingestion(tmp_dir: Path):
    data_dir = os.environ.get("METAMF_DATA_DIR")
    details, ok = [], True
    for k, (name, (fmt, n_users, n_items, n_ratings, rescale)) in enumerate(PUBLISHED.items()):
        real = Path(data_dir) / REAL_FILES[name] if data_dir else None
        if real is not None and real.exists():
            path, source = real, "real"
        else:
            path, source = tmp_dir / f"{name}.txt", "synthetic"
            _synthesize(path, fmt, n_users, n_items, n_ratings, seed=k)
        run = tmp_dir / f"run-{name}"
        argv = ["ingest", "--dataset", str(path), "--format", fmt, "--out", str(run), "--force"]
        if rescale:
            argv.append(f"--rescale={rescale}")
        code = cli_main(argv)
        stats = json.loads((run / "stats.json").read_text()) if code == 0 else {}
        got = (stats.get("n_users"), stats.get("n_items"), stats.get("n_ratings"))
        match = got == (n_users, n_items, n_ratings)
        ok &= match
        details.append(f"{name} ({source}) {got[0]}/{got[1]}/{got[2]} {'ok' if match else 'MISMATCH'}")
    return ok, "; ".join(details)


# ------------------------------------------------------------- pytest hooks


def test_criterion_1_gradient_check():
    record(1, *criterion_gradients())


def test_criterion_2_nometamf_freeze():
    record(2, *criterion_freeze())


def test_criterion_3_privacy_sampler():
    record(3, *criterion_sampler())


def test_criterion_4_metric_oracles():
    record(4, *criterion_metrics())


def test_criterion_5_budget_trend():
    record(5, *criterion_trend())


def test_criterion_6_group_ordering():
    record(6, *criterion_groups())


def test_criterion_7_tsne_quality():
    record(7, *criterion_tsne())


def test_criterion_8_ingestion_counts(tmp_path):
    record(8, *criterion_ingestion(tmp_path))


if __name__ == "__main__":
    import tempfile

    checks = [criterion_gradients, criterion_freeze, criterion_sampler, criterion_metrics,
              criterion_trend, criterion_groups, criterion_tsne]
    failed = 0
    for n, fn in enumerate(checks, start=1):
        ok, detail = fn()
        print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
        failed += not ok
    with tempfile.TemporaryDirectory() as tmp:
        ok, detail = criterion_ingestion(Path(tmp))
    print(f"{'PASS' if ok else 'FAIL'} criterion 8: {detail}")
    failed += not ok
    sys.exit(1 if failed else 0)
