"""Command line: gen-data, train, eval, ablate, analyze.

Runs are driven by an INI file with one section per module::

    [run]     output_dir, name, seed
    [data]    path (TSV; empty = synthetic) and synthetic taxonomy knobs
    [train]   every TrainConfig field except seed
    [eval]    split, batch_size, n_groups, threshold / min_steps overrides
    [ablate]  variants, seeds
    [analyze] trajectory_limit

``--set section.key=value`` and ``--seed`` override the file. Unknown sections
or keys are errors. The single ``seed`` fans out through tagged SeedSequences:
data generation uses (seed, 0xDA7A), parameter init (seed, module tag),
batch order (seed, epoch, 0x5EED), dropout (seed, epoch, batch, op) and
k-means (seed, epoch, k).

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .arh import HaltPolicy
from .data import (DatasetError, InteractionDataset, ParseError, SyntheticTaxonomy, generate_synthetic,
                   leave_one_out_split, load_interactions, write_tsv)
from .evaluation import (MetricsReport, EvalResult, evaluate, export_trajectories, length_groups, spearman,
                         steps_by_length_group, write_exits)
from .model import VARIANT_LABELS, VARIANTS
from .training import TrainConfig, Trainer, load_model

log = logging.getLogger("dtrec")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


def _train_defaults() -> dict:
    return {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}


SCHEMA: dict[str, dict] = {
    "run": {"output_dir": "runs", "name": "", "seed": 0},
    "data": {
        "path": "",
        "core": 5,
        "users": 2000,
        "branching": "4,4,4",
        "items_per_leaf": 10,
        "shift_prob": 0.2,
        "shift_scope": "cross",
        "item_skew": 1.0,
        "shift_mixture": "",  # "fraction:prob, fraction:prob"
        "len_min": 8,
        "len_max": 40,
    },
    "train": _train_defaults(),
    "eval": {"split": "test", "batch_size": 512, "n_groups": 5, "threshold": -1.0, "min_steps": 0},
    "ablate": {"variants": ",".join(VARIANTS), "seeds": "0,1,2,3,4"},
    "analyze": {"trajectory_limit": 0},
}


# --------------------------------------------------------------------------
# configuration


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def load_config(path: str | None, overrides: list[str] = (), seed: int | None = None) -> dict[str, dict]:
    """Defaults, then the file, then ``--set`` overrides, then ``--seed``."""
    cfg = {s: dict(v) for s, v in SCHEMA.items()}
    raw: list[tuple[str, str, str]] = []
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            raw.extend((section, k, v) for k, v in parser.items(section))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        raw.append((section.strip(), key.strip(), value))
    for section, key, value in raw:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        cfg[section][key] = _convert(section, key, value, SCHEMA[section][key])
    if seed is not None:
        cfg["run"]["seed"] = seed
    if cfg["train"]["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg['train']['variant']!r}; choose from {sorted(VARIANTS)}")
    return cfg


def render_config(cfg: dict[str, dict]) -> str:
    lines = []
    for section in SCHEMA:
        lines.append(f"[{section}]")
        for key in SCHEMA[section]:
            value = cfg[section][key]
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        lines.append("")
    return "\n".join(lines)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def taxonomy_from(cfg: dict[str, dict]) -> SyntheticTaxonomy:
    d = cfg["data"]
    mixture = []
    for part in filter(None, (p.strip() for p in d["shift_mixture"].split(","))):
        frac, prob = part.split(":")
        mixture.append((float(frac), float(prob)))
    try:
        return SyntheticTaxonomy(branching=tuple(_int_list(d["branching"])), items_per_leaf=d["items_per_leaf"],
                                 shift_prob=d["shift_prob"], shift_scope=d["shift_scope"],
                                 item_skew=d["item_skew"], shift_mixture=tuple(mixture))
    except ValueError as exc:
        raise ConfigError(f"[data] {exc}") from None


def train_config_from(cfg: dict[str, dict], variant: str | None = None, seed: int | None = None) -> TrainConfig:
    values = dict(cfg["train"])
    if variant is not None:
        values["variant"] = variant
    values["seed"] = cfg["run"]["seed"] if seed is None else seed
    try:
        return TrainConfig.from_dict(values)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[train] {exc}") from None


def policy_from(cfg: dict[str, dict], train_cfg: TrainConfig) -> HaltPolicy:
    e = cfg["eval"]
    threshold = e["threshold"] if e["threshold"] >= 0 else train_cfg.halt_threshold
    min_steps = e["min_steps"] if e["min_steps"] > 0 else train_cfg.halt_min_steps
    return HaltPolicy(threshold, min_steps, max(train_cfg.steps, 1))


def dataset_from(cfg: dict[str, dict], seed: int | None = None) -> InteractionDataset:
    d = cfg["data"]
    if d["path"]:
        return load_interactions(d["path"], core=d["core"])
    seed = cfg["run"]["seed"] if seed is None else seed
    return generate_synthetic(taxonomy_from(cfg), d["users"], (d["len_min"], d["len_max"]), seed=seed)


# --------------------------------------------------------------------------
# run directories


def make_run_dir(cfg: dict[str, dict], default_name: str) -> Path:
    """A fresh directory; an existing name gets a numeric suffix, never reused."""
    base = Path(cfg["run"]["output_dir"]) / (cfg["run"]["name"] or default_name)
    base.parent.mkdir(parents=True, exist_ok=True)
    candidate, n = base, 1
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            candidate = base.with_name(f"{base.name}-{n}")
            n += 1


def _attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _start_run(cfg: dict[str, dict], default_name: str) -> tuple[Path, logging.Handler]:
    run_dir = make_run_dir(cfg, default_name)
    (run_dir / "resolved_config").write_text(render_config(cfg), encoding="utf-8")
    handler = _attach_log(run_dir)
    log.info("dtrec %s run directory %s", __version__, run_dir)
    return run_dir, handler


def _finish_run(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


def _write_metrics(run_dir: Path, report: MetricsReport | dict) -> str:
    text = report.to_json() if isinstance(report, MetricsReport) else json.dumps(report, sort_keys=True, indent=2)
    (run_dir / "metrics.json").write_text(text + "\n", encoding="utf-8")
    return text


def _split_view(ds: InteractionDataset, name: str):
    train, valid, test = leave_one_out_split(ds)
    views = {"train": train, "valid": valid, "test": test}
    if name not in views:
        raise ConfigError(f"[eval] split must be one of {sorted(views)}")
    return views[name]


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict[str, dict], args) -> int:
    ds = dataset_from(cfg)
    out = Path(args.out) if args.out else None
    run_dir, handler = _start_run(cfg, f"data-s{cfg['run']['seed']}")
    try:
        out = out or run_dir / "interactions.tsv"
        write_tsv(ds, out)
        stats = ds.stats()
        stats["path"] = str(out)
        stats["fingerprint"] = ds.fingerprint()
        _write_metrics(run_dir, stats)
        log.info("wrote %d interactions for %d users over %d items to %s", ds.n_interactions, ds.n_users,
                 ds.n_items, out)
        print(json.dumps(stats, sort_keys=True))
    finally:
        _finish_run(handler)
    return EXIT_OK


def _train_one(cfg: dict[str, dict], run_dir: Path, ds: InteractionDataset, tcfg: TrainConfig):
    if not tcfg.diagnostic_dir:
        tcfg.diagnostic_dir = str(run_dir)
    trainer = Trainer(ds, tcfg).fit()
    trainer.save_checkpoint(run_dir / "checkpoint.dtrec")
    history = [asdict(r) for r in trainer.state.history]
    (run_dir / "history.json").write_text(json.dumps(history, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    view = _split_view(ds, cfg["eval"]["split"])
    result = evaluate(trainer.model, view, policy_from(cfg, tcfg), cfg["eval"]["batch_size"], tcfg.max_len,
                      tcfg.seed, cfg["eval"]["n_groups"])
    return trainer, result


def cmd_train(cfg: dict[str, dict], args) -> int:
    tcfg = train_config_from(cfg, args.variant)
    cfg["train"]["variant"] = tcfg.variant
    run_dir, handler = _start_run(cfg, f"train-{tcfg.variant}-s{tcfg.seed}")
    try:
        ds = dataset_from(cfg)
        log.info("dataset %s", ds.stats())
        _, result = _train_one(cfg, run_dir, ds, tcfg)
        print(_write_metrics(run_dir, result.report))
    finally:
        _finish_run(handler)
    return EXIT_OK


def _resolve_checkpoint_config(args) -> str | None:
    if args.config:
        return args.config
    sibling = Path(args.checkpoint).parent / "resolved_config"
    return str(sibling) if sibling.is_file() else None


def _evaluate_checkpoint(cfg: dict[str, dict], checkpoint: str):
    model, index, tcfg, meta = load_model(checkpoint)
    ds = dataset_from(cfg, seed=tcfg.seed)
    if meta.get("dataset") not in (None, ds.fingerprint()):
        raise ConfigError("the [data] section does not reproduce the checkpoint's training data")
    view = _split_view(ds, cfg["eval"]["split"])
    result = evaluate(model, view, policy_from(cfg, tcfg), cfg["eval"]["batch_size"], tcfg.max_len, tcfg.seed,
                      cfg["eval"]["n_groups"])
    return model, index, tcfg, ds, view, result


def cmd_eval(cfg: dict[str, dict], args) -> int:
    run_dir, handler = _start_run(cfg, f"eval-{Path(args.checkpoint).parent.name}")
    try:
        *_, result = _evaluate_checkpoint(cfg, args.checkpoint)
        write_exits(result, run_dir / "exits.csv")
        print(_write_metrics(run_dir, result.report))
    finally:
        _finish_run(handler)
    return EXIT_OK


def write_ablation_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["Model", "seed", "N@10", "Cons."])
        for r in rows:
            w.writerow([VARIANT_LABELS[r["variant"]], r["seed"], f"{r['ndcg10']:.4f}", f"{r['cost_ratio']:.1f}%"])


def write_ablation_summary(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["Model", "seeds", "N@10", "N@10 std", "Cons."])
        for variant in dict.fromkeys(r["variant"] for r in rows):
            sub = [r for r in rows if r["variant"] == variant]
            nd = np.array([r["ndcg10"] for r in sub])
            cons = np.array([r["cost_ratio"] for r in sub])
            w.writerow([VARIANT_LABELS[variant], len(sub), f"{nd.mean():.4f}", f"{nd.std():.4f}",
                        f"{cons.mean():.1f}%"])


def cmd_ablate(cfg: dict[str, dict], args) -> int:
    variants = [v.strip() for v in cfg["ablate"]["variants"].split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise ConfigError(f"[ablate] variants: unknown {unknown}; choose from {sorted(VARIANTS)}")
    try:
        seeds = _int_list(cfg["ablate"]["seeds"])
    except ValueError:
        raise ConfigError("[ablate] seeds must be a comma-separated list of integers") from None
    if args.seed is not None:
        seeds = [args.seed]
    run_dir, handler = _start_run(cfg, "ablate")
    rows = []
    try:
        for seed in seeds:
            ds = dataset_from(cfg, seed=seed)
            for variant in variants:
                tcfg = train_config_from(cfg, variant, seed)
                sub = run_dir / f"{variant}-s{seed}"
                sub.mkdir()
                log.info("ablation run %s seed %d", variant, seed)
                _, result = _train_one(cfg, sub, ds, tcfg)
                _write_metrics(sub, result.report)
                rows.append({"variant": variant, "seed": seed, "ndcg10": result.report.ndcg10,
                             "cost_ratio": result.report.cost_ratio, "report": asdict(result.report)})
        order = {v: i for i, v in enumerate(variants)}
        rows.sort(key=lambda r: (order[r["variant"]], r["seed"]))
        write_ablation_csv(rows, run_dir / "ablation.csv")
        write_ablation_summary(rows, run_dir / "ablation_summary.csv")
        print(_write_metrics(run_dir, {"runs": [r["report"] for r in rows]}))
    finally:
        _finish_run(handler)
    return EXIT_OK


def _group_rows(keys: np.ndarray, exits: np.ndarray, n_groups: int, label: str) -> list[dict]:
    groups = length_groups(keys, n_groups)
    rows = []
    for g in range(n_groups):
        m = groups == g
        rows.append({"group": f"G{g + 1}", "users": int(m.sum()),
                     f"min_{label}": float(keys[m].min()) if m.any() else float("nan"),
                     f"max_{label}": float(keys[m].max()) if m.any() else float("nan"),
                     "mean_exit_step": float(exits[m].mean()) if m.any() else float("nan")})
    return rows


def _write_rows(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def depth_analysis(result: EvalResult, ds: InteractionDataset, n_groups: int = 5) -> dict:
    """Mean exit step per length group and per shift-probability group, with Spearman's ρ."""
    out = {"by_length": steps_by_length_group(result.lengths, result.exit_steps, n_groups)}
    idx = np.arange(1, n_groups + 1)
    out["spearman_length"] = spearman(idx, [r["mean_exit_step"] for r in out["by_length"]])
    if ds.user_shift_prob is not None and np.isfinite(ds.user_shift_prob).all():
        shift = np.asarray(ds.user_shift_prob)[result.users]
        out["by_shift"] = _group_rows(shift, result.exit_steps.astype(np.float64), n_groups, "shift_prob")
        out["spearman_shift"] = spearman(idx, [r["mean_exit_step"] for r in out["by_shift"]])
    return out


def cmd_analyze(cfg: dict[str, dict], args) -> int:
    run_dir, handler = _start_run(cfg, f"analyze-{Path(args.checkpoint).parent.name}")
    try:
        model, index, tcfg, ds, view, result = _evaluate_checkpoint(cfg, args.checkpoint)
        n_groups = cfg["eval"]["n_groups"]
        analysis = depth_analysis(result, ds, n_groups)
        _write_rows(analysis["by_length"], run_dir / "steps_by_length.csv")
        if "by_shift" in analysis:
            _write_rows(analysis["by_shift"], run_dir / "steps_by_shift.csv")
        write_exits(result, run_dir / "exits.csv", ds.user_ids)
        limit = cfg["analyze"]["trajectory_limit"] or None
        n_rows = export_trajectories(model, view, index, run_dir / "trajectories.csv", user_ids=ds.user_ids,
                                     limit=limit)
        log.info("exported %d trajectory rows", n_rows)
        (run_dir / "analysis.json").write_text(json.dumps(analysis, sort_keys=True, indent=2) + "\n",
                                               encoding="utf-8")
        print(_write_metrics(run_dir, result.report))
    finally:
        _finish_run(handler)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dtrec", description="Reasoning-enhanced sequential recommendation.")
    ap.add_argument("--version", action="version", version=f"dtrec {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", "-c", help="INI file with [run] [data] [train] [eval] ... sections")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", default=None, help="overrides [run] output_dir")
        p.add_argument("--quiet", "-q", action="store_true")
        return p

    p = common(sub.add_parser("gen-data", help="generate a synthetic taxonomy dataset"))
    p.add_argument("--out", help="TSV path (default: inside the run directory)")
    p = common(sub.add_parser("train", help="train one variant"))
    p.add_argument("--variant", choices=sorted(VARIANTS))
    for name in ("eval", "analyze"):
        p = common(sub.add_parser(name, help=f"{name} a checkpoint"))
        p.add_argument("checkpoint")
    common(sub.add_parser("ablate", help="train variants x seeds and tabulate N@10 / Cons."))
    return ap


def _threads() -> int | None:
    raw = os.environ.get("DTREC_THREADS", "")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DTREC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("DTREC_THREADS must be positive")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        config_path = args.config
        if args.command in ("eval", "analyze"):
            config_path = _resolve_checkpoint_config(args)
            if not Path(args.checkpoint).is_file():
                raise ConfigError(f"checkpoint not found: {args.checkpoint}")
        cfg = load_config(config_path, args.overrides, args.seed)
        if args.output_dir:
            cfg["run"]["output_dir"] = args.output_dir
        threads = _threads()
        if threads is None:
            return COMMANDS[args.command](cfg, args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"dtrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, DatasetError, FileNotFoundError) as exc:
        print(f"dtrec: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"dtrec: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
