"""Command-line entry point: ``metamf <command> --out RUN_DIR ...``.

A run directory is created by ``ingest`` and is append-only afterwards:
commands refuse to overwrite an existing output unless ``--force`` is given.

Exit codes: 0 success, 1 contract error, 2 IO/ingestion error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis, dataset, evaluation, model
from .errors import ContractError, IngestionError, MetaMFError, TrainingError
from .training import TrainConfig, train

logger = logging.getLogger("metamf")

RUN_CONFIG = "run_config.txt"
MANIFEST = "split.manifest"


# ------------------------------------------------------------------ config


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys use flag spelling."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestionError(f"{path}: expected 'key = value'", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def write_config_file(path, values: dict) -> None:
    lines = [f"{k} = {_cfg_value(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cfg_value(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if v is None:
        return ""
    return str(v).replace("\t", "\\t")


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _variants(text: str) -> list[str]:
    return [model.parse_variant(v.strip()) for v in str(text).split(",") if v.strip()]


# --------------------------------------------------------------- run dirs


def _out_file(run: Path, name: str, force: bool) -> Path:
    path = run / name
    if path.exists() and not force:
        raise ContractError(f"{path} already exists; use --force or a new --out directory")
    return path


def _run_dir(args) -> Path:
    run = Path(args.out)
    if not (run / RUN_CONFIG).exists():
        raise ContractError(f"{run} is not an ingested run directory (missing {RUN_CONFIG}); run 'ingest' first")
    return run


def load_run_data(run: Path) -> tuple[dataset.DatasetSplit, dict]:
    cfg = read_config_file(run / RUN_CONFIG)
    fmt = dataset.RatingFormat.parse(cfg.get("format") or None)
    records, _ = dataset.load_ratings(cfg["dataset"], fmt)
    if cfg.get("rescale"):
        records = dataset.rescale_ratings(records, _floats(cfg["rescale"]))
    m = dataset.read_split_manifest(run / MANIFEST)
    if m["n_records"] != len(records):
        raise IngestionError(f"{cfg['dataset']} has {len(records)} records, manifest expects {m['n_records']}")
    split = dataset.split_from_indices(records, m["train"], m["val"], m["test"], m["seed"],
                                       m["n_users"], m["n_items"])
    return split, cfg


def model_config_from(args, variant: str) -> model.ModelConfig:
    return model.ModelConfig(
        d_user=args.d_user, d_collab=args.d_collab, d_hidden_meta=args.d_hidden_meta,
        d_item=args.d_item, d_rp_hidden=args.d_rp_hidden, r_lowrank=args.r_lowrank, variant=variant,
    )


def train_config_from(args, seed: int) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, max_epochs=args.max_epochs,
                       patience=args.patience, seed=seed, optimizer=args.optimizer)


def _single_variant(args) -> str:
    variants = _variants(args.variant)
    if len(variants) != 1:
        raise ContractError("this command takes exactly one --variant")
    return variants[0]


def _checkpoint_name(variant: str) -> str:
    return f"checkpoint-{variant.lower()}.mmf"


def _load_trained(run: Path, variant: str) -> model.MetaParams:
    path = run / _checkpoint_name(variant)
    if not path.exists():
        raise ContractError(f"{path} not found; run 'train --variant {variant.lower()}' first")
    return model.load_checkpoint(path)


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if args.kind == "rank1":
        records = dataset.synthetic_ratings(args.users, args.items, rank=1, density=args.density, seed=args.seed)
    else:
        records = dataset.movielens_like_ratings(args.users, args.items, min_count=10, seed=args.seed)
    path = Path(args.path)
    if path.exists() and not args.force:
        raise ContractError(f"{path} already exists; use --force")
    dataset.write_ratings(records, path)
    print(f"wrote {len(records)} ratings to {path}")
    return 0


def cmd_ingest(args) -> int:
    run = Path(args.out)
    cfg_path = _out_file(run, RUN_CONFIG, args.force)
    manifest_path = _out_file(run, MANIFEST, args.force)
    if not args.dataset:
        raise ContractError("--dataset is required")
    fmt = dataset.RatingFormat.parse(args.format)
    records, maps = dataset.load_ratings(args.dataset, fmt)
    if args.rescale:
        records = dataset.rescale_ratings(records, _floats(args.rescale))
    elif records.ratings.min() < 1 or records.ratings.max() > 5:
        raise ContractError("ratings fall outside [1, 5]; pass --rescale LO,HI")
    stats = dataset.dataset_stats(records, maps.n_users, maps.n_items)
    split = dataset.split_dataset(records, seed=args.seed, n_users=maps.n_users, n_items=maps.n_items)
    run.mkdir(parents=True, exist_ok=True)
    dataset.write_split_manifest(split, manifest_path, len(records))
    write_config_file(cfg_path, {
        "dataset": str(Path(args.dataset).resolve()),
        "format": args.format or "tsv",
        "rescale": args.rescale or "",
        "seed": args.seed,
        "name": args.name or Path(args.dataset).stem,
    })
    stats.update(train=len(split.train), validation=len(split.validation), test=len(split.test))
    (run / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(f"users           {stats['n_users']:,}")
    print(f"items           {stats['n_items']:,}")
    print(f"ratings         {stats['n_ratings']:,}")
    print(f"ratings/user    {stats['ratings_per_user']:.1f}")
    print(f"ratings/item    {stats['ratings_per_item']:.1f}")
    print(f"split           {len(split.train):,} / {len(split.validation):,} / {len(split.test):,}")
    return 0


def cmd_train(args) -> int:
    run = _run_dir(args)
    variant = _single_variant(args)
    seed = _ints(args.seeds)[0]
    ckpt = _out_file(run, _checkpoint_name(variant), args.force)
    log_path = _out_file(run, f"trainlog-{variant.lower()}.csv", args.force)
    split, _ = load_run_data(run)
    mcfg = model_config_from(args, variant)
    tcfg = train_config_from(args, seed)
    params, log = train(mcfg, tcfg, split.train, split.validation, split.n_users, split.n_items)
    model.save_checkpoint(params, ckpt)
    log.checkpoint_path = str(ckpt)
    log.write_csv(log_path)
    write_config_file(run / f"train-{variant.lower()}.config.txt", {**asdict(mcfg), **asdict(tcfg)})
    print(f"{variant}: best epoch {log.best_epoch}, validation MSE {log.val_mse[log.best_epoch]:.4f}")
    print(f"checkpoint {ckpt} sha256 {model.checkpoint_digest(ckpt)}")
    return 0


def _report_from_json(d: dict) -> evaluation.EvalReport:
    d = dict(d)
    d["groups"] = {k: tuple(v) for k, v in d.get("groups", {}).items()}
    return evaluation.EvalReport(**d)


def cmd_sweep(args) -> int:
    run = _run_dir(args)
    variants = _variants(args.variant)
    betas = _floats(args.betas)
    seeds = _ints(args.seeds)
    csv_path = run / "sweep.csv"
    runs_path = run / "sweep-runs.jsonl"
    if args.resume and args.force:
        raise ContractError("--resume and --force are mutually exclusive")
    if not args.resume:
        _out_file(run, "sweep.csv", args.force)
        _out_file(run, "sweep-runs.jsonl", args.force)
        runs_path.write_text("", encoding="utf-8")
    elif not runs_path.exists():
        runs_path.write_text("", encoding="utf-8")

    split, cfg = load_run_data(run)
    groups = dataset.identify_user_groups(split.train, split.n_users) if args.groups else None
    finished: dict = {}
    for line in runs_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rep = _report_from_json(json.loads(line))
            finished[(rep.variant, rep.seed, rep.beta)] = rep

    def persist(rep):
        with open(runs_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(rep), sort_keys=True) + "\n")

    all_reports = []
    for variant in variants:
        done = {(s, b): r for (v, s, b), r in finished.items() if v == variant}
        if done:
            print(f"{variant}: resuming, {len(done)} runs already complete")
        reports = evaluation.beta_sweep(
            model_config_from(args, variant), train_config_from(args, seeds[0]), split,
            betas=betas, seeds=seeds, groups=groups, clip=args.clip_eval, dataset=cfg.get("name", ""),
            jobs=args.jobs, done=done, on_report=persist,
        )
        all_reports.extend(reports)
    evaluation.write_report_rows([row for r in all_reports for row in r.rows()], csv_path)
    print(evaluation.format_table(all_reports))
    return 0


def cmd_groups(args) -> int:
    run = _run_dir(args)
    variant = _single_variant(args)
    csv_path = _out_file(run, f"groups-{variant.lower()}.csv", args.force)
    json_path = _out_file(run, f"ttest-{variant.lower()}.json", args.force)
    params = _load_trained(run, variant)
    split, cfg = load_run_data(run)
    low, med, high = dataset.identify_user_groups(split.train, split.n_users)
    test = split.test
    errors = evaluation.absolute_errors(params, test, clip=args.clip_eval)
    report = evaluation.evaluate(params, test, groups=(low, med, high), clip=args.clip_eval,
                                 beta=1.0, dataset=cfg.get("name", ""))

    def sample(group):
        if args.per_user:
            return evaluation.per_user_mean_errors(errors, test.users, group)
        return errors[np.isin(test.users, list(group.user_ids))]

    result = evaluation.one_tailed_t_test(sample(low), sample(high))
    evaluation.write_report_rows(report.rows(), csv_path)
    json_path.write_text(json.dumps({
        **asdict(result), "unit": "user" if args.per_user else "rating",
        "group_size": len(low), "alternative": "mean(Low) > mean(High)",
    }, indent=2) + "\n", encoding="utf-8")
    print(f"group size {len(low)} (of {split.n_users} users)")
    print(evaluation.group_table(report.groups, result))
    return 0


def cmd_embed(args) -> int:
    run = _run_dir(args)
    variant = _single_variant(args)
    weights_path = _out_file(run, f"embed-weights-{variant.lower()}.csv", args.force)
    items_path = _out_file(run, f"embed-items-{variant.lower()}.csv", args.force)
    params = _load_trained(run, variant)
    split, _ = load_run_data(run)
    seed = _ints(args.seeds)[0]

    label_of = {}
    try:
        for g in dataset.identify_user_groups(split.train, split.n_users):
            for u in g.user_ids:
                label_of[u] = g.label
    except ContractError:
        logger.warning("too few users for Low/Med/High groups; group column left empty")
    users = sorted(label_of) if args.groups else list(range(split.n_users))

    weights = model.extract_first_layer_weights(params, users)
    emb = analysis.tsne_embed(
        analysis.EmbeddingRequest(weights, perplexity=args.perplexity, iterations=args.iterations, seed=seed),
        labels=users, groups=[label_of.get(u, "") for u in users],
    )
    emb.metadata.update(source="first-layer weights", variant=variant)
    analysis.export_embedding(emb, weights_path)

    item_user = args.item_user
    if not 0 <= item_user < split.n_users:
        raise ContractError(f"--item-user {item_user} is not a valid user index")
    items = model.personalized_item_embeddings(params, item_user)
    emb = analysis.tsne_embed(
        analysis.EmbeddingRequest(items, perplexity=args.perplexity, iterations=args.iterations, seed=seed),
    )
    emb.metadata.update(source="personalized item embeddings", user=item_user, variant=variant)
    analysis.export_embedding(emb, items_path)
    print(f"wrote {weights_path} ({len(users)} users) and {items_path} ({params.n_items} items)")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metamf", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="key = value file; explicit flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant_default="metamf"):
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--variant", default=variant_default, help="metamf or nometamf (sweep: comma list)")
        p.add_argument("--seed", dest="seeds", default="0", help="seed (sweep: comma list)")

    def hyper(p):
        d = model.ModelConfig()
        t = TrainConfig()
        for name in ("d_user", "d_collab", "d_hidden_meta", "d_item", "d_rp_hidden", "r_lowrank"):
            p.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(d, name))
        p.add_argument("--lr", type=float, default=t.learning_rate)
        p.add_argument("--batch-size", type=int, default=t.batch_size)
        p.add_argument("--max-epochs", type=int, default=t.max_epochs)
        p.add_argument("--patience", type=int, default=t.patience)
        p.add_argument("--optimizer", choices=("adam", "sgd"), default=t.optimizer)

    p = sub.add_parser("generate", help="write a synthetic rating file")
    p.add_argument("path")
    p.add_argument("--kind", choices=("movielens-like", "rank1"), default="movielens-like")
    p.add_argument("--users", type=int, default=400)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="load ratings, print statistics, write the split manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="rating file")
    p.add_argument("--format", help="tsv | csv | movielens | delimiter=..,columns=user:item:rating,header=N")
    p.add_argument("--rescale", help="LO,HI source range mapped onto [1, 5]")
    p.add_argument("--name", help="dataset name used in reports")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one variant on the full training split")
    common(p)
    hyper(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="privacy-budget sweep with delta MAE")
    common(p, variant_default="metamf,nometamf")
    hyper(p)
    p.add_argument("--betas", default=",".join(str(b) for b in evaluation.DEFAULT_BETAS))
    p.add_argument("--groups", action="store_true", help="add Low/Med/High breakdown rows")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--clip-eval", action="store_true", help="clip predictions to [1, 5] when scoring")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("groups", help="Low/Med/High MAE and one-tailed Welch t-test")
    common(p)
    p.add_argument("--clip-eval", action="store_true")
    p.add_argument("--per-user", action="store_true", help="t-test on per-user mean errors")
    p.set_defaults(func=cmd_groups)

    p = sub.add_parser("embed", help="t-SNE of first-layer weights and item embeddings")
    common(p)
    p.add_argument("--groups", action="store_true", help="only embed Low/Med/High users")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--item-user", type=int, default=0, help="user whose item embeddings are embedded")
    p.set_defaults(func=cmd_embed)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config_file(known.config)
    if "seed" in values:
        values["seeds"] = values.pop("seed")
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            dests = {a.dest: a for a in sub._actions}
            defaults = {}
            for key, raw in values.items():
                if key in dests:
                    a = dests[key]
                    if a.type is not None:
                        defaults[key] = a.type(raw)
                    elif isinstance(a.default, bool):
                        defaults[key] = raw.lower() in ("1", "true", "yes", "on")
                    else:
                        defaults[key] = raw
            sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MetaMFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
