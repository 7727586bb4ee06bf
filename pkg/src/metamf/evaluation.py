"""Error metrics, relative error under a privacy budget, group analysis."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .dataset import GROUP_LABELS, DatasetSplit, Ratings, UserGroup, sample_privacy_budget
from .errors import ContractError
from .model import ModelConfig, predict
from .training import TrainConfig, train

REPORT_COLUMNS = ["dataset", "variant", "beta", "mae", "mse", "delta_mae", "group", "n", "seed"]


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ContractError(f"predictions ({p.size}) and targets ({t.size}) differ in length")
    if p.size == 0:
        raise ContractError("cannot score an empty prediction list")
    return p, t


def mae(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    return float(np.mean(np.abs(p - t)))


def mse(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    d = p - t
    return float(np.mean(d * d))


@dataclass
class EvalReport:
    mae: float
    mse: float
    n: int
    test_hash: str
    groups: dict = field(default_factory=dict)  # label -> (mae, n)
    beta: float | None = None
    delta_mae: float | None = None
    group_delta: dict = field(default_factory=dict)  # label -> delta_mae
    variant: str = ""
    seed: int | None = None
    dataset: str = ""
    n_train: int | None = None

    def rows(self) -> list[dict]:
        base = {"dataset": self.dataset, "variant": self.variant, "beta": self.beta, "seed": self.seed}
        out = [{**base, "mae": self.mae, "mse": self.mse, "delta_mae": self.delta_mae,
                "group": "all", "n": self.n}]
        order = {label: k for k, label in enumerate(GROUP_LABELS)}
        for label in sorted(self.groups, key=lambda g: (order.get(g, len(order)), g)):
            g_mae, g_n = self.groups[label]
            out.append({**base, "mae": g_mae, "mse": None, "delta_mae": self.group_delta.get(label),
                        "group": label, "n": g_n})
        return out


def group_mae(predictions, targets, users, groups) -> dict:
    """MAE restricted to the test ratings of each group's users."""
    p, t = _pair(predictions, targets)
    users = np.asarray(users)
    out = {}
    for g in groups:
        mask = np.isin(users, np.fromiter(g.user_ids, dtype=np.int64, count=len(g.user_ids)))
        if not mask.any():
            raise ContractError(f"group {g.label} has no ratings in the test set")
        out[g.label] = (mae(p[mask], t[mask]), int(mask.sum()))
    return out


def evaluate(params, test: Ratings, groups=None, clip: bool = False, **meta) -> EvalReport:
    """Score a trained model on ``test``; ``clip`` bounds predictions to [1, 5]."""
    pred = predict(params, test.users, test.items)
    if clip:
        pred = np.clip(pred, 1.0, 5.0)
    report = EvalReport(mae=mae(pred, test.ratings), mse=mse(pred, test.ratings), n=len(test),
                        test_hash=test.content_hash(), variant=params.config.variant, **meta)
    if groups:
        report.groups = group_mae(pred, test.ratings, test.users, groups)
    return report


def absolute_errors(params, test: Ratings, clip: bool = False) -> np.ndarray:
    pred = predict(params, test.users, test.items)
    if clip:
        pred = np.clip(pred, 1.0, 5.0)
    return np.abs(pred - test.ratings)


def delta_mae_at_beta(at_beta: EvalReport, at_full: EvalReport) -> float:
    """MAE@beta / MAE@1.0; both reports must come from the same test set."""
    if at_beta.test_hash != at_full.test_hash:
        raise ContractError("reports were computed on different test sets")
    if at_full.mae == 0:
        raise ContractError("baseline MAE@1.0 is zero")
    return at_beta.mae / at_full.mae


def bind_baseline(report: EvalReport, baseline: EvalReport) -> EvalReport:
    """Copy of ``report`` with overall and per-group delta MAE filled in."""
    out = replace(report, delta_mae=delta_mae_at_beta(report, baseline), group_delta={})
    for label, (g_mae, _) in report.groups.items():
        base = baseline.groups.get(label)
        if base and base[0] > 0:
            out.group_delta[label] = g_mae / base[0]
    return out


# ----------------------------------------------------------------- t-test

SIGNIFICANCE_LEVELS = (0.0001, 0.05)


@dataclass
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value_one_tailed: float
    significance_level_reached: str  # "none", "0.05" or "0.0001"
    degenerate: bool = False

    @property
    def stars(self) -> str:
        return {"0.0001": "****", "0.05": "*"}.get(self.significance_level_reached, "")


def _level(p: float) -> str:
    for alpha in SIGNIFICANCE_LEVELS:
        if p < alpha:
            return str(alpha)
    return "none"


def one_tailed_t_test(errors_low, errors_high) -> TTestResult:
    """Welch's t-test of H1: mean(errors_low) > mean(errors_high)."""
    a = np.asarray(errors_low, dtype=np.float64).reshape(-1)
    b = np.asarray(errors_high, dtype=np.float64).reshape(-1)
    if a.size < 2 or b.size < 2:
        raise ContractError("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return TTestResult(0.0, math.nan, 0.5, "none", degenerate=True)
        t = math.copysign(math.inf, diff)
        p = 0.0 if diff > 0 else 1.0
        return TTestResult(t, math.nan, p, _level(p), degenerate=True)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    # upper tail P(T_df > t)
    p = float(special.stdtr(df, -t))
    return TTestResult(float(t), float(df), p, _level(p))


def per_user_mean_errors(errors, users, group: UserGroup) -> np.ndarray:
    """Mean absolute error per user of ``group`` (alternative t-test unit)."""
    errors = np.asarray(errors, dtype=np.float64)
    users = np.asarray(users)
    out = [errors[users == u].mean() for u in sorted(group.user_ids) if np.any(users == u)]
    return np.asarray(out)


# ------------------------------------------------------------------ sweeps

DEFAULT_BETAS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)


def run_budget(model_config: ModelConfig, train_config: TrainConfig, split: DatasetSplit,
               beta: float, seed: int, groups=None, clip: bool = False, dataset: str = "") -> EvalReport:
    """Sample R^beta, train from scratch, score on the fixed test set."""
    sample = sample_privacy_budget(split.train, beta, seed)
    cfg = replace(train_config, seed=seed)
    params, _ = train(model_config, cfg, sample.records, split.validation, split.n_users, split.n_items)
    return evaluate(params, split.test, groups=groups, clip=clip, beta=beta, seed=seed,
                    dataset=dataset, n_train=len(sample.records))


def beta_sweep(model_config: ModelConfig, train_config: TrainConfig, split: DatasetSplit,
               betas=DEFAULT_BETAS, seeds=(0,), groups=None, clip: bool = False, dataset: str = "",
               jobs: int = 1, done: dict | None = None, on_report=None) -> list[EvalReport]:
    """Train one model per (seed, beta) and bind delta MAE to each seed's beta=1.0 run.

    ``done`` maps ``(seed, beta)`` to reports from an earlier, interrupted
    sweep; those runs are not repeated. ``on_report`` is called with each
    freshly computed raw report as soon as it is available.
    """
    betas = [float(b) for b in betas]
    if not betas:
        raise ContractError("betas must not be empty")
    for b in betas:
        if not 0.0 < b <= 1.0:
            raise ContractError(f"beta must lie in (0, 1], got {b}")
    if 1.0 not in betas:
        raise ContractError("a sweep needs beta = 1.0 as its baseline")
    done = dict(done or {})
    todo = [(s, b) for s in seeds for b in betas if (s, b) not in done]

    args = [(model_config, train_config, split, b, s, groups, clip, dataset) for s, b in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {key: pool.submit(run_budget, *a) for key, a in zip(todo, args)}
            for key, fut in futures.items():
                done[key] = fut.result()
                if on_report:
                    on_report(done[key])
    else:
        for key, a in zip(todo, args):
            done[key] = run_budget(*a)
            if on_report:
                on_report(done[key])

    reports = []
    for s in seeds:
        baseline = done[(s, 1.0)]
        for b in betas:
            reports.append(bind_baseline(done[(s, b)], baseline))
    return reports


# ----------------------------------------------------------------- output


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_rows(rows, path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in REPORT_COLUMNS])


def read_report_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_table(reports) -> str:
    """Plain-text table, one line per report and group."""
    lines = [f"{'variant':<9} {'seed':>4} {'beta':>5} {'group':<5} {'n':>7} {'MAE':>7} {'MSE':>7} {'dMAE':>7}"]
    for rep in reports:
        for row in rep.rows():
            lines.append(
                f"{row['variant']:<9} {_fmt(row['seed']):>4} {_fmt_num(row['beta'], 1):>5} {row['group']:<5} "
                f"{row['n']:>7} {_fmt_num(row['mae'], 4):>7} {_fmt_num(row['mse'], 4):>7} "
                f"{_fmt_num(row['delta_mae'], 4):>7}"
            )
    return "\n".join(lines)


def _fmt_num(v, digits):
    return "" if v is None else f"{v:.{digits}f}"


def group_table(groups_mae: dict, test_result: TTestResult) -> str:
    lines = [f"{'group':<5} {'n':>7} {'MAE':>7}"]
    for label in GROUP_LABELS:
        if label in groups_mae:
            m, n = groups_mae[label]
            lines.append(f"{label:<5} {n:>7} {m:>7.4f}")
    lines.append(
        f"Low > High (Welch, one-tailed): t={test_result.t_statistic:.4f} "
        f"df={test_result.degrees_of_freedom:.1f} p={test_result.p_value_one_tailed:.3g} "
        f"{test_result.stars or '(n.s.)'}"
    )
    return "\n".join(lines)
