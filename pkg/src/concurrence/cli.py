"""Command-line front end.

Commands: generate, concurrence, pscs, benchmark, baselines, plot, report.
Settings resolve as built-in defaults, then the ``--config`` file section
for the command (and ``[global]``), then explicit flags.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import dataset_test
from .evaluation import derive_seed, permutation_test, pscs_trace, run_cv
from .model import EncoderConfig, load_model, save_model
from .nn import ModelFormatError, SegmentTooShortError
from .signals import DatasetError, SignalDataset, load_dataset, per_channel_standardize
from .synth import generate_challenge_suite, generate_xi_sweep, write_suite
from .training import TrainConfig

log = logging.getLogger("concurrence")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ALPHA = 0.05
ALL_METHODS = ("pearson", "wcc", "dc", "hsic", "mi", "cmi", "concurrence")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _range(text: str) -> tuple[float, float]:
    vals = _floats(text)
    if len(vals) != 2 or vals[0] > vals[1]:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi' with lo <= hi, got {text!r}")
    return vals[0], vals[1]


def _methods(text: str) -> list[str]:
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in ALL_METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {ALL_METHODS}")
    return names


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("CONCURRENCE_WORKERS", "1")))
    except ValueError:
        return 1


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in cells)


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def pair_fingerprint(pair) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(pair.x.values).tobytes())
    h.update(np.ascontiguousarray(pair.y.values).tobytes())
    return h.hexdigest()


def _encoder_cfg(a) -> EncoderConfig:
    return EncoderConfig(num_blocks=a.blocks, base_channels=a.channels, dropout_rate=a.dropout)


def _train_cfg(a, seed: int) -> TrainConfig:
    return TrainConfig(iterations=a.iterations, segments_per_pair=a.segments_per_pair,
                       learning_rate=a.lr, early_stopping=a.early_stopping,
                       min_misalignment_gap=a.gap, minibatch_size=a.minibatch,
                       standardize=not a.raw, seed=seed)


def _suite_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    if not dirs:
        raise DatasetError(f"no datasets (subdirectories with manifest.json) under {root}")
    return dirs


# ----------------------------------------------------------------- commands


def cmd_generate(a) -> int:
    out = Path(a.out)
    if a.kind == "xi-sweep":
        sets = generate_xi_sweep(a.xis, a.pairs, T=a.T, w_event_scale=a.event_scale,
                                 seed=a.seed, target_snr=a.snr)
        names = [f"xi{xi:.2f}" for xi in a.xis]
        manifest = {"version": 1, "kind": "xi-sweep", "seed": a.seed, "xis": a.xis,
                    "pairs_per_dataset": a.pairs, "T": a.T, "target_snr": a.snr,
                    "datasets": [{"dataset": n, "config": d.metadata.get("synth", {})}
                                 for n, d in zip(names, sets)]}
        path = write_suite(sets, manifest, out, names)
    else:
        sets, manifest = generate_challenge_suite(
            a.datasets, a.pairs, T=a.T, seed=a.seed, impulse_rate=a.rate, lag_max=a.lag_max,
            snr_range=a.snr_range, kernel_scale_range=a.scale_range)
        path = write_suite(sets, manifest, out)
    print(f"wrote {len(sets)} datasets and {path}")
    return EXIT_OK


def _concurrence_on(data: SignalDataset, a, seed: int, permutations: int, workers: int):
    """CV coefficient (and null) of one dataset; returns (report, null or None, cv)."""
    enc, tr = _encoder_cfg(a), _train_cfg(a, seed)
    cv = run_cv(data, a.folds, a.w, enc, tr, by_group=a.by_group, workers=workers)
    null = None
    if permutations:
        null = permutation_test(data, a.w, enc, tr, permutations, seed=seed, k=a.folds,
                                by_group=a.by_group, workers=workers, cv=cv).null
    meta = data.metadata
    cv.report.params["dataset"] = {k: meta[k] for k in ("name", "xi") if k in meta}
    if "synth" in meta:
        cv.report.params["dataset"]["target_snr"] = meta["synth"].get("target_snr")
    return cv.report, null, cv


def cmd_concurrence(a) -> int:
    data = load_dataset(a.data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    report, null, cv = _concurrence_on(data, a, a.seed, a.permutations, a.workers)
    report.params["data"] = str(a.data)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    if null is not None:
        with open(out / "null.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["permutation", "null_coefficient"])
            writer.writerows([i, repr(v)] for i, v in enumerate(null))
    if a.save_models:
        mdir = out / "models"
        mdir.mkdir(exist_ok=True)
        for i, (model, (tr_idx, _)) in enumerate(zip(cv.models, cv.folds)):
            save_model(model, mdir / f"fold{i}.model")
            _write_json(mdir / f"fold{i}.json", {
                "standardize": not a.raw,
                "train_fingerprints": sorted(pair_fingerprint(data.pairs[j]) for j in tr_idx)})
    rows = [[f["fold"], f["n_test_pairs"], f["accuracy"], f["coefficient"], None]
            for f in report.per_fold]
    rows.append(["all", sum(f["n_test_pairs"] for f in report.per_fold), report.accuracy,
                 report.coefficient, report.p_value])
    table = _format_table(["fold", "n_test", "accuracy", "coefficient", "p_value"], rows)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_pscs(a) -> int:
    model = load_model(a.model)
    data = load_dataset(a.data)
    if (data.k_x, data.k_y) != (model.k_x, model.k_y):
        raise ModelFormatError(f"model expects (K_x, K_y) = {(model.k_x, model.k_y)}, "
                               f"dataset has {(data.k_x, data.k_y)}")
    side = Path(a.model).with_suffix(".json")
    standardize = True
    if side.exists():
        info = json.loads(side.read_text(encoding="utf-8"))
        standardize = info.get("standardize", True)
        seen = set(info.get("train_fingerprints", []))
        overlap = [p.pair_id for p in data.pairs if pair_fingerprint(p) in seen]
        if overlap and not a.allow_train_data:
            raise UsageError(f"{len(overlap)} pair(s) (e.g. {overlap[0]!r}) were used to train "
                             "this model; pass --allow-train-data to score them anyway")
    if standardize:
        data = per_channel_standardize(data)
    stride = a.stride or model.w
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(data.pairs):
        pscs_trace(model, pair, model.w, stride).to_csv(out / f"pscs_{i:05d}.csv")
    print(f"wrote {data.N} traces (w={model.w}, stride={stride}) to {out}")
    return EXIT_OK


def _baseline_kwargs(method: str, a) -> dict:
    if method in ("mi", "cmi"):
        return {"bins": a.bins}
    return {}


def cmd_baselines(a) -> int:
    data = load_dataset(a.data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for m_i, method in enumerate(a.methods):
        if method == "concurrence":
            raise UsageError("use the concurrence command for the learned measure")
        res = dataset_test(data, method, a.permutations, seed=derive_seed(a.seed, m_i),
                           **_baseline_kwargs(method, a))
        res.to_json(out / f"{method}.json")
        res.to_csv(out / f"{method}.csv")
        rows.append([method, res.dataset_statistic, res.p_value])
    table = _format_table(["method", "statistic", "p_value"], rows)
    (out / "baselines.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def _benchmark_one(path: Path, index: int, a) -> dict:
    data = load_dataset(path)
    entry = {"dataset": path.name, "methods": {}}
    for method in a.methods:
        seed = derive_seed(a.seed, index, ALL_METHODS.index(method))
        if method == "concurrence":
            report, null, _ = _concurrence_on(data, a, seed, a.permutations, a.workers)
            stat, p = report.unclipped_coefficient, report.p_value
            extra = {"coefficient": report.coefficient, "accuracy": report.accuracy,
                     "null_mean": float(np.mean(null)), "null_std": float(np.std(null))}
        else:
            res = dataset_test(data, method, a.baseline_permutations, seed=seed,
                               **_baseline_kwargs(method, a))
            stat, p, extra = res.dataset_statistic, res.p_value, {}
        entry["methods"][method] = {"statistic": stat, "p_value": p,
                                    "detected": bool(p <= ALPHA), **extra}
        log.info("%s %s stat=%.4f p=%.3f", path.name, method, stat, p)
    return entry


def cmd_benchmark(a) -> int:
    dirs = _suite_dirs(Path(a.suite))
    out = Path(a.out)
    (out / "datasets").mkdir(parents=True, exist_ok=True)
    entries, failures = [], []
    for i, d in enumerate(dirs):
        done = out / "datasets" / f"{d.name}.json"
        if a.resume and done.exists():
            entries.append(json.loads(done.read_text(encoding="utf-8")))
            continue
        try:
            entry = _benchmark_one(d, i, a)
        except (DatasetError, FloatingPointError, OSError) as exc:
            # completed datasets stay on disk; a rerun with --resume retries this one
            failures.append((d.name, exc))
            log.error("%s failed: %s", d.name, exc)
            continue
        _write_json(done, entry)
        entries.append(entry)
    with open(out / "details.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "method", "statistic", "p_value", "detected"])
        for e in entries:
            for m in a.methods:
                r = e["methods"].get(m)
                if r is not None:
                    writer.writerow([e["dataset"], m, repr(r["statistic"]), repr(r["p_value"]),
                                     int(r["detected"])])
    counts = {m: sum(e["methods"][m]["detected"] for e in entries if m in e["methods"])
              for m in a.methods}
    with open(out / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "detections", "n_datasets"])
        writer.writerows([m, counts[m], len(entries)] for m in a.methods)
    table = _format_table(["method", "detections", "n_datasets"],
                          [[m, counts[m], len(entries)] for m in a.methods])
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    if failures:
        name, exc = failures[0]
        raise type(exc)(f"{len(failures)} dataset(s) failed, first {name}: {exc}")
    return EXIT_OK


SUMMARY_FIELDS = ["report", "dataset", "xi", "target_snr", "w", "accuracy", "coefficient",
                  "unclipped_coefficient", "p_value"]


def cmd_report(a) -> int:
    paths = []
    for p in map(Path, a.reports):
        paths.extend(sorted(p.rglob("report.json")) if p.is_dir() else [p])
    if not paths:
        raise DatasetError("no report.json files found")
    rows = []
    for p in paths:
        r = json.loads(p.read_text(encoding="utf-8"))
        ds = r.get("params", {}).get("dataset", {})
        rows.append([str(p), ds.get("name"), ds.get("xi"), ds.get("target_snr"),
                     r.get("params", {}).get("w"), r["accuracy"], r["coefficient"],
                     r["unclipped_coefficient"], r.get("p_value")])
    if a.out:
        with open(a.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_FIELDS)
            writer.writerows([["" if v is None else v for v in row] for row in rows])
    print(_format_table(SUMMARY_FIELDS, rows))
    return EXIT_OK


def _read_rows(path: Path, needed: Sequence[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in needed if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetError(f"{path}: missing column(s) {missing}")
        rows = [r for r in reader if all(r[c] != "" for c in needed)]
    if not rows:
        raise DatasetError(f"{path}: no usable rows")
    return rows


def cmd_plot(a) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if a.kind == "null":
        rows = _read_rows(Path(a.input), ["null_coefficient"])
        vals = [float(r["null_coefficient"]) for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist(vals, bins=min(30, max(5, len(vals) // 4)), color="0.6", edgecolor="0.2")
        if a.observed is not None:
            ax.axvline(a.observed, color="C3", label="observed")
            ax.legend()
        ax.set_xlabel("unclipped coefficient under mismatched pairing")
        ax.set_ylabel("count")
    else:
        xcol = "xi" if a.kind == "xi" else "target_snr"
        rows = _read_rows(Path(a.input), [xcol, "w", "coefficient"])
        by_w: dict[int, list[tuple[float, float]]] = {}
        for r in rows:
            by_w.setdefault(int(float(r["w"])), []).append((float(r[xcol]), float(r["coefficient"])))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for w in sorted(by_w):
            pts = sorted(by_w[w])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"w = {w}")
        if a.kind == "snr":
            ax.set_xscale("log")
            ax.invert_xaxis()
        ax.set_xlabel("degree of dependence" if a.kind == "xi" else "signal-to-noise ratio")
        ax.set_ylabel("concurrence coefficient")
        ax.set_ylim(-0.05, 1.05)
        ax.legend()
    fig.tight_layout()
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training")
    g.add_argument("--w", type=int, default=100, help="segment width")
    g.add_argument("--folds", type=int, default=4)
    g.add_argument("--by-group", action="store_true", help="keep each group in one fold")
    g.add_argument("--blocks", type=int, default=EncoderConfig.num_blocks)
    g.add_argument("--channels", type=int, default=EncoderConfig.base_channels)
    g.add_argument("--dropout", type=float, default=EncoderConfig.dropout_rate)
    g.add_argument("--iterations", type=int, default=TrainConfig.iterations)
    g.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    g.add_argument("--segments-per-pair", type=int, default=TrainConfig.segments_per_pair)
    g.add_argument("--minibatch", type=int, default=None,
                   help="split each iteration's batch into minibatches of this size")
    g.add_argument("--gap", type=int, default=TrainConfig.min_misalignment_gap,
                   help="misaligned crops satisfy |t' - t| > gap")
    g.add_argument("--early-stopping", action="store_true")
    g.add_argument("--raw", action="store_true", help="skip per-channel standardization")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [global] and per-command sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=_default_workers(),
                        help="parallel jobs (default: $CONCURRENCE_WORKERS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="concurrence", description="Learned dependence between time series.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    gen = sub.add_parser("generate", help="synthesize datasets")
    gsub = gen.add_subparsers(dest="kind", parser_class=_Parser, required=True)
    xs = gsub.add_parser("xi-sweep", parents=[common])
    xs.add_argument("--xis", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    xs.add_argument("--pairs", type=int, default=200)
    xs.add_argument("--T", type=int, default=1000)
    xs.add_argument("--snr", type=float, default=None, help="target SNR (default noise-free)")
    xs.add_argument("--event-scale", type=float, default=60.0, help="kernel support in samples")
    xs.add_argument("--out", default="data/xi_sweep")
    ch = gsub.add_parser("challenge", parents=[common])
    ch.add_argument("--datasets", type=int, default=20)
    ch.add_argument("--pairs", type=int, default=100)
    ch.add_argument("--T", type=int, default=1000)
    ch.add_argument("--rate", type=float, default=0.02)
    ch.add_argument("--lag-max", type=int, default=50)
    ch.add_argument("--snr-range", type=_range, default=(0.5, 2.0))
    ch.add_argument("--scale-range", type=_range, default=(6.0, 16.0))
    ch.add_argument("--out", default="data/challenge")

    cc = sub.add_parser("concurrence", parents=[common], help="cross-validated coefficient")
    cc.add_argument("--data", required=True)
    cc.add_argument("--permutations", type=int, default=0)
    cc.add_argument("--save-models", action="store_true")
    cc.add_argument("--out", default="results/concurrence")
    _add_model_args(cc)

    ps = sub.add_parser("pscs", parents=[common], help="per-segment score traces")
    ps.add_argument("--model", required=True)
    ps.add_argument("--data", required=True)
    ps.add_argument("--stride", type=int, default=None, help="default: w")
    ps.add_argument("--allow-train-data", action="store_true")
    ps.add_argument("--out", default="results/pscs")

    bm = sub.add_parser("benchmark", parents=[common], help="detection counts on a suite")
    bm.add_argument("--suite", required=True)
    bm.add_argument("--methods", type=_methods, default=list(ALL_METHODS))
    bm.add_argument("--permutations", type=int, default=99)
    bm.add_argument("--baseline-permutations", type=int, default=99)
    bm.add_argument("--bins", type=int, default=8)
    bm.add_argument("--resume", action="store_true")
    bm.add_argument("--out", default="results/benchmark")
    _add_model_args(bm)

    bl = sub.add_parser("baselines", parents=[common], help="classical dependence tests")
    bl.add_argument("--data", required=True)
    bl.add_argument("--methods", type=_methods, default=list(ALL_METHODS[:-1]))
    bl.add_argument("--permutations", type=int, default=99)
    bl.add_argument("--bins", type=int, default=8)
    bl.add_argument("--out", default="results/baselines")

    pl = sub.add_parser("plot", parents=[common], help="SVG figures from CSV results")
    pl.add_argument("kind", choices=["xi", "snr", "null"])
    pl.add_argument("--input", required=True, help="summary CSV (xi, snr) or null.csv")
    pl.add_argument("--observed", type=float, default=None)
    pl.add_argument("--out", required=True)

    rp = sub.add_parser("report", parents=[common], help="tabulate report.json files")
    rp.add_argument("reports", nargs="+", help="report.json files or directories")
    rp.add_argument("--out", default=None, help="summary CSV path")
    return parser


def _subparser(parser: argparse.ArgumentParser, names: Sequence[str]) -> argparse.ArgumentParser:
    p = parser
    for name in names:
        action = next(a for a in p._actions if isinstance(a, argparse._SubParsersAction))
        p = action.choices[name]
    return p


def _apply_config(parser: argparse.ArgumentParser, path: str, section_names: Sequence[str]) -> None:
    """Turn config file values into parser defaults so explicit flags still win."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise DatasetError(f"cannot read config file {path}")
    values = dict(cp["global"]) if cp.has_section("global") else {}
    for name in section_names:
        if cp.has_section(name):
            values.update(cp[name])
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        act = actions.get(dest)
        if act is None:
            raise UsageError(f"{path}: unknown setting {key!r} for {' '.join(section_names)}")
        if isinstance(act, argparse._StoreTrueAction):
            defaults[dest] = cp.BOOLEAN_STATES.get(raw.lower())
            if defaults[dest] is None:
                raise UsageError(f"{path}: {key} must be a boolean, got {raw!r}")
        elif act.type is not None:
            try:
                defaults[dest] = act.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path}: bad value for {key}: {exc}") from exc
        else:
            defaults[dest] = raw
        act.required = False
    parser.set_defaults(**defaults)


COMMANDS = {"generate": cmd_generate, "concurrence": cmd_concurrence, "pscs": cmd_pscs,
            "benchmark": cmd_benchmark, "baselines": cmd_baselines, "plot": cmd_plot,
            "report": cmd_report}


def _command_path(argv: Sequence[str]) -> list[str]:
    for i, word in enumerate(argv):
        if word in COMMANDS:
            if word == "generate" and i + 1 < len(argv):
                return [word, argv[i + 1]]
            return [word]
    raise UsageError("no command given")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        pre = _Parser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            names = _command_path(argv)
            _apply_config(_subparser(parser, names), known.config, names)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SegmentTooShortError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ModelFormatError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
