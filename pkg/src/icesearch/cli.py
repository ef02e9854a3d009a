"""Command-line entry point: ``icesearch run | rank | baselines | replay``.

A run is described by one JSON config; command-line flags override its
fields. Outputs land in the config's output directory:

    report.json / report.md   per-seed pools, winners and baselines
    transcript.jsonl          one record per model call
    convergence.csv           per-epoch top-k mean accuracies
    ranktable.csv             exhaustive subset ranks (rank command, or run
                              with ``"oracle": true``)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from . import baselines, oracle
from .evolution import EngineConfig, SearchResult, run
from .lmops import EndpointOperator, LmEndpoint, ReplayOperator, ScriptedOperator, Transcript
from .models import CrossValidator, ModelSpec, holdout_accuracy
from .tabular import (Dataset, impute_median, load_csv, smote_balance, stratified_folds,
                      train_test_split)

log = logging.getLogger("icesearch")

REPORT_JSON = "report.json"
REPORT_MD = "report.md"
TRANSCRIPT = "transcript.jsonl"
CONVERGENCE = "convergence.csv"
RANKTABLE = "ranktable.csv"


class ConfigError(ValueError):
    pass


def pct(x: float) -> float:
    """Fraction -> percentage rounded half-up to 3 decimals."""
    return float((Decimal(repr(float(x))) * 100).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


@dataclass
class RunConfig:
    data: str
    target: str
    task_description: str = ""
    impute: bool = True
    smote: bool = True
    smote_k: int = 5
    engine: EngineConfig = field(default_factory=EngineConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    endpoint: LmEndpoint | None = None
    script: str | None = None
    seeds: tuple[int, ...] = (42, 43, 44, 45, 46)
    test_fraction: float = 0.3
    output_dir: str = "icesearch_out"
    oracle: bool = False
    selection_policy: str = "above_mean"
    top_k: int | None = None
    parallel_seeds: bool = False
    oracle_jobs: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.endpoint is not None and self.script is not None:
            raise ConfigError("give either an LM endpoint or an operator script, not both")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike = ".") -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        if unknown := set(d) - known - {"preprocessing"}:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for k, v in d.pop("preprocessing", {}).items():
            d[k] = v
        try:
            if "engine" in d:
                eng = dict(d["engine"])
                if "roles" in eng:
                    eng["roles"] = tuple(eng["roles"])
                d["engine"] = EngineConfig(**eng)
            if "model" in d:
                d["model"] = ModelSpec(**d["model"])
            if d.get("endpoint") is not None:
                d["endpoint"] = LmEndpoint(**d["endpoint"])
            if "seeds" in d:
                d["seeds"] = tuple(int(s) for s in d["seeds"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("data", "script"):
            if d.get(key) is not None:
                d[key] = str(Path(base_dir, d[key]))
        if "data" not in d or "target" not in d:
            raise ConfigError("config needs 'data' and 'target'")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), Path(path).parent)


# --------------------------------------------------------------------------
# per-seed pipeline


@dataclass
class SeedContext:
    seed: int
    train: Dataset
    test: Dataset
    validator: CrossValidator
    table: oracle.RankTable | None = None


def load_dataset(config: RunConfig) -> Dataset:
    ds = load_csv(config.data, config.target, config.task_description)
    return impute_median(ds) if config.impute else ds


def prepare_seed(dataset: Dataset, config: RunConfig, seed: int, with_oracle: bool) -> SeedContext:
    train, test = train_test_split(dataset, config.test_fraction, seed)
    if config.smote:
        train = smote_balance(train, config.smote_k, seed)
    folds = stratified_folds(train, config.engine.n_folds, seed)
    spec = replace(config.model, seed=seed)
    ctx = SeedContext(seed, train, test, CrossValidator(train, spec, folds))
    if with_oracle:
        ctx.table = oracle.enumerate_and_rank(train, spec, folds, test, validator=ctx.validator,
                                              n_jobs=config.oracle_jobs, seed=seed)
    return ctx


def _row(ctx: SeedContext, subset, **extra) -> dict:
    ev = ctx.validator.evaluate(subset)
    row = {**extra,
           "features": list(ctx.train.names_of(subset)),
           "indices": list(subset),
           "train_accuracy": pct(ev.train_accuracy),
           "val_accuracy": pct(ev.val_accuracy),
           "test_accuracy": pct(holdout_accuracy(ctx.train, ctx.test, subset, ctx.validator.spec))}
    if ctx.table is not None:
        row["test_rank"], row["val_rank"] = ctx.table.rank_of(subset)
    return row


def classical_for(ctx: SeedContext, config: RunConfig) -> dict:
    return baselines.classical_subsets(ctx.train, config.model, ctx.seed,
                                       config.selection_policy, config.top_k)


def baseline_rows(ctx: SeedContext, config: RunConfig, subsets: dict | None = None) -> list[dict]:
    """One row per classical method plus the Ensemble-of-FS row."""
    if subsets is None:
        subsets = classical_for(ctx, config)
    rows = [_row(ctx, s, method=m) for m, s in subsets.items()]
    # ensemble: the method whose subset validates best (same tie order as the search)
    best = min(rows, key=lambda r: (-ctx.validator.evaluate(r["indices"]).val_accuracy,
                                    ctx.validator.evaluate(r["indices"]).train_accuracy,
                                    len(r["indices"]), tuple(r["indices"])))
    rows.append({**best, "method": "ensemble", "source": best["method"]})
    return rows


def _operator_for(config: RunConfig, feature_names, replay: ReplayOperator | None):
    if replay is not None:
        return replay
    if config.script is not None:
        with open(config.script) as fh:
            script = json.load(fh)
        return ScriptedOperator.from_names(script, feature_names)
    if config.endpoint is not None:
        return EndpointOperator(config.endpoint)
    raise ConfigError("run needs an LM endpoint or an operator script")


def run_seed(dataset: Dataset, config: RunConfig, seed: int, operator,
             transcript: Transcript) -> tuple[dict, SearchResult]:
    ctx = prepare_seed(dataset, config, seed, config.oracle)
    engine = replace(config.engine, seed=seed)
    classical = classical_for(ctx, config)
    result = run(ctx.train, engine, operator, ctx.validator.spec, classical=classical,
                 validator=ctx.validator, transcript=transcript)
    pool = [_row(ctx, c.subset, position=i + 1, provenance=c.provenance)
            for i, c in enumerate(result.pool.ranked())]
    section = {
        "seed": seed,
        "n_train": ctx.train.n_samples,
        "n_test": ctx.test.n_samples,
        "train_class_counts": list(ctx.train.class_counts()),
        "selection_mode": engine.selection_mode,
        "winner": _row(ctx, result.winner.subset, provenance=result.winner.provenance),
        "pool": pool,
        "baselines": baseline_rows(ctx, config, classical),
        "convergence": [{"epoch": e.epoch, "mean_train_accuracy": pct(e.mean_train_accuracy),
                         "mean_val_accuracy": pct(e.mean_val_accuracy), "pool_size": e.pool_size}
                        for e in result.trace.entries],
        "transcript": TRANSCRIPT,
    }
    if ctx.table is not None:
        section["_table"] = ctx.table
    return section, result


def aggregate_ranks(sections: list[dict]) -> dict | None:
    """Mean test/val rank per method across seeds (only when every seed has ranks)."""
    done = [s for s in sections if "error" not in s]
    if not done or "val_rank" not in done[0]["winner"]:
        return None
    rows: dict[str, list] = {}
    for s in done:
        for b in s.get("baselines", []):
            rows.setdefault(b["method"], []).append(b)
        if "winner" in s:
            rows.setdefault("ice_search", []).append(s["winner"])
    out = {}
    for method, rs in rows.items():
        out[method] = {"test_rank": sum(r["test_rank"] for r in rs) / len(rs),
                       "val_rank": sum(r["val_rank"] for r in rs) / len(rs),
                       "n_seeds": len(rs)}
    if done[0].get("_table") is not None:
        out["n_subsets"] = len(done[0]["_table"])
    return out


# --------------------------------------------------------------------------
# rendering


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _md_rows(rows, cols) -> list[str]:
    head = "| " + " | ".join(c for c, _ in cols) + " |"
    sep = "|" + "|".join("---" for _ in cols) + "|"
    body = ["| " + " | ".join(fmt(r) for _, fmt in cols) + " |" for r in rows]
    return [head, sep, *body]


def _acc_cols(with_ranks: bool, label: str):
    cols = [(label[0], label[1]),
            ("Features", lambda r: ", ".join(r["features"])),
            ("Train %", lambda r: f"{r['train_accuracy']:.3f}"),
            ("Val %", lambda r: f"{r['val_accuracy']:.3f}"),
            ("Test %", lambda r: f"{r['test_accuracy']:.3f}")]
    if with_ranks:
        cols += [("Test rank", lambda r: str(r["test_rank"])), ("Val rank", lambda r: str(r["val_rank"]))]
    return cols


def render_markdown(report: dict) -> str:
    lines = ["# ICE-SEARCH run report", ""]
    for s in report["seeds"]:
        lines.append(f"## Seed {s['seed']}")
        lines.append("")
        if "error" in s:
            lines += [f"Failed: `{s['error']}`", ""]
            continue
        ranks = "val_rank" in s["winner"]
        if "winner" in s:
            w = s["winner"]
            lines += [f"Winner ({s['selection_mode']}): {', '.join(w['features'])} "
                      f"(val {w['val_accuracy']:.3f}%, test {w['test_accuracy']:.3f}%)", ""]
            lines += ["### Final pool", ""]
            lines += _md_rows(s["pool"], _acc_cols(ranks, ("#", lambda r: str(r["position"]))))
            lines.append("")
        lines += ["### Baselines", ""]
        lines += _md_rows(s["baselines"], _acc_cols(ranks, ("Method", lambda r: r["method"])))
        lines.append("")
        if s.get("convergence"):
            lines += ["### Convergence (top-k means)", ""]
            lines += _md_rows(s["convergence"], [
                ("Epoch", lambda r: str(r["epoch"])),
                ("Train %", lambda r: f"{r['mean_train_accuracy']:.3f}"),
                ("Val %", lambda r: f"{r['mean_val_accuracy']:.3f}")])
            lines.append("")
    agg = report.get("average_ranks")
    if agg:
        n = agg.get("n_subsets", "")
        lines += [f"## Average ranks (out of {n})", ""]
        methods = [k for k in agg if k != "n_subsets"]
        lines += _md_rows(methods, [("Method", str),
                                    ("Test rank", lambda m: f"{agg[m]['test_rank']:.1f}"),
                                    ("Val rank", lambda m: f"{agg[m]['val_rank']:.1f}")])
        lines.append("")
    return "\n".join(lines)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _strip_private(section: dict) -> dict:
    return {k: v for k, v in section.items() if not k.startswith("_")}


def _write_tables(out: Path, sections) -> None:
    tables = [s["_table"] for s in sections if s.get("_table") is not None]
    if tables:
        text = tables[0].to_csv()
        for t in tables[1:]:
            text += t.to_csv().split("\n", 1)[1]
        _write(out / RANKTABLE, text)


# --------------------------------------------------------------------------
# commands


def cmd_run(config: RunConfig, replay: ReplayOperator | None = None) -> dict:
    """Run the full pipeline for every seed and write the report files."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config)
    if config.oracle:
        oracle.check_feature_count(dataset.n_features)
    operator = _operator_for(config, dataset.feature_names, replay)
    transcript = Transcript()

    def one(seed):
        try:
            section, result = run_seed(dataset, config, seed, operator, transcript)
            return section
        except Exception as exc:  # keep the other seeds' results
            log.error("seed %d failed: %s", seed, exc)
            return {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}

    if config.parallel_seeds and len(config.seeds) > 1:
        with ThreadPoolExecutor(len(config.seeds)) as ex:
            sections = list(ex.map(one, config.seeds))
    else:
        sections = [one(s) for s in config.seeds]

    report = {"model": config.model.to_dict(),
              "engine": {k: v for k, v in config.engine.to_dict().items() if k != "seed"},
              "seeds": [_strip_private(s) for s in sections]}
    if agg := aggregate_ranks(sections):
        report["average_ranks"] = agg
    _write(out / REPORT_JSON, _dump(report))
    _write(out / REPORT_MD, render_markdown(report))
    transcript.write(out / TRANSCRIPT)
    conv = ["seed,epoch,mean_train_accuracy,mean_val_accuracy,pool_size"]
    for s in sections:
        for e in s.get("convergence", []):
            conv.append(f"{s['seed']},{e['epoch']},{e['mean_train_accuracy']},"
                        f"{e['mean_val_accuracy']},{e['pool_size']}")
    _write(out / CONVERGENCE, "\n".join(conv) + "\n")
    _write_tables(out, sections)
    return report


def cmd_rank(config: RunConfig) -> list[oracle.RankTable]:
    """Exhaustively rank all subsets for each seed and write ranktable.csv."""
    dataset = load_dataset(config)
    oracle.check_feature_count(dataset.n_features)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sections = []
    for seed in config.seeds:
        ctx = prepare_seed(dataset, config, seed, with_oracle=True)
        sections.append({"_table": ctx.table})
    _write_tables(out, sections)
    return [s["_table"] for s in sections]


def cmd_baselines(config: RunConfig) -> dict:
    """Score the four classical methods and the ensemble strategy per seed."""
    dataset = load_dataset(config)
    if config.oracle:
        oracle.check_feature_count(dataset.n_features)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sections = []
    for seed in config.seeds:
        ctx = prepare_seed(dataset, config, seed, config.oracle)
        sections.append({"seed": seed, "baselines": baseline_rows(ctx, config), "_table": ctx.table})
    report = {"model": config.model.to_dict(), "seeds": [_strip_private(s) for s in sections]}
    if config.oracle:
        rows: dict[str, list] = {}
        for s in sections:
            for b in s["baselines"]:
                rows.setdefault(b["method"], []).append(b)
        report["average_ranks"] = {
            m: {"test_rank": sum(r["test_rank"] for r in rs) / len(rs),
                "val_rank": sum(r["val_rank"] for r in rs) / len(rs), "n_seeds": len(rs)}
            for m, rs in rows.items()}
        report["average_ranks"]["n_subsets"] = 2 ** dataset.n_features - 1
    _write(out / "baselines.json", _dump(report))
    md = ["# Baselines", ""]
    for s in report["seeds"]:
        ranks = "val_rank" in s["baselines"][0]
        md += [f"## Seed {s['seed']}", ""]
        md += _md_rows(s["baselines"], _acc_cols(ranks, ("Method", lambda r: r["method"])))
        md.append("")
    _write(out / "baselines.md", "\n".join(md))
    return report


# --------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icesearch", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("run", "run the evolutionary search"),
                        ("rank", "exhaustively rank every feature subset"),
                        ("baselines", "score the classical feature rankers"),
                        ("replay", "re-run from a recorded transcript")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--data")
        sp.add_argument("--target")
        sp.add_argument("--output-dir")
        sp.add_argument("--seeds", type=lambda s: tuple(int(x) for x in s.split(",")),
                        help="comma-separated, e.g. 42,43,44")
        sp.add_argument("--model", help="downstream model kind")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--selection-mode")
        sp.add_argument("--oracle", action="store_true", default=None,
                        help="also compute the exhaustive rank table")
        sp.add_argument("--parallel-seeds", action="store_true", default=None)
        if name == "run":
            sp.add_argument("--script", help="scripted operator file (JSON list of feature lists)")
        if name == "replay":
            sp.add_argument("--transcript", required=True)
    return p


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    updates = {}
    for attr in ("data", "target", "output_dir", "seeds", "oracle", "parallel_seeds"):
        if getattr(args, attr, None) is not None:
            updates[attr] = getattr(args, attr)
    if getattr(args, "script", None) is not None:
        updates["script"] = args.script
    if args.model:
        updates["model"] = ModelSpec(args.model, seed=config.model.seed)
    engine = {}
    if args.epochs is not None:
        engine["n_epochs"] = args.epochs
    if args.selection_mode is not None:
        engine["selection_mode"] = args.selection_mode
    if engine:
        updates["engine"] = replace(config.engine, **engine)
    return replace(config, **updates)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _apply_overrides(RunConfig.load(args.config), args)
        if args.command == "run":
            report = cmd_run(config)
        elif args.command == "replay":
            report = cmd_run(config, replay=ReplayOperator.from_file(args.transcript))
        elif args.command == "rank":
            tables = cmd_rank(config)
            print(f"ranked {len(tables[0])} subsets for {len(tables)} seed(s) -> "
                  f"{Path(config.output_dir) / RANKTABLE}")
            return 0
        else:
            report = cmd_baselines(config)
            print(f"baselines written to {Path(config.output_dir) / 'baselines.json'}")
            return 0
    except (ConfigError, oracle.FeatureCapError, ValueError, OSError) as exc:
        print(f"icesearch: error: {exc}", file=sys.stderr)
        return 2
    failed = [s["seed"] for s in report["seeds"] if "error" in s]
    print(f"report written to {Path(config.output_dir) / REPORT_JSON}")
    if failed:
        print(f"icesearch: seeds failed: {failed}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
