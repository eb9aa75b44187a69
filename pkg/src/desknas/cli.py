"""Command-line pipeline: data, pretraining, latency, surrogates, search, report.

Stages talk only through files, so any stage can be replaced by external data
(for example a latency CSV measured on real hardware).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import csv_comment, make_meta, read_meta, write_json
from .data import gen_dataset, load_dataset, save_dataset
from .space import SpaceError, SpaceSpec, default_space, load_space, sample_max, sample_min, \
    sample_random, space_from_dict, space_hash, validate_genes

log = logging.getLogger("desknas")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- config


def load_run_config(path: str | None) -> tuple[SpaceSpec, dict]:
    """A space config, or a run config whose ``space`` key holds one (inline or as a path)."""
    if path is None:
        return default_space(), {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "stages" in doc:
        return space_from_dict(doc), {}
    space = doc.get("space")
    if space is None:
        spec = default_space()
    elif isinstance(space, dict):
        spec = space_from_dict(space)
    else:
        sp = (p.parent / space) if not Path(space).is_absolute() else Path(space)
        if not sp.is_file():
            raise ConfigError(f"{path}: space config not found: {space}")
        spec = load_space(sp.read_text(encoding="utf-8"))
    return spec, doc


def _section(run: dict, key: str) -> dict:
    sec = run.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config key {key!r} must be an object")
    return sec


def _seed(args, run: dict, default: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    return int(run.get("seed", default))


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_genes(spec: SpaceSpec, text: str, rng) -> tuple[int, ...]:
    if text == "min":
        return sample_min(spec)
    if text == "max":
        return sample_max(spec)
    if text == "random":
        return sample_random(spec, rng)
    try:
        genes = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"genes must be min, max, random or comma-separated ints, got {text!r}") from None
    return validate_genes(spec, genes)


def _load_data(args, spec: SpaceSpec, run: dict, seed: int):
    if getattr(args, "data", None):
        ds = load_dataset(_require_file(args.data, "data"))
    else:
        d = _section(run, "data")
        ds = gen_dataset(seed=int(d.get("seed", seed)), n_train=int(d.get("n_train", 4096)),
                         n_val=int(d.get("n_val", 1024)), n_classes=spec.n_classes,
                         max_resolution=spec.max_resolution)
    if ds.n_classes != spec.n_classes:
        raise ConfigError(f"dataset has {ds.n_classes} classes but the space expects {spec.n_classes}")
    if ds.train.inputs.shape[1] < spec.max_resolution:
        raise ConfigError("dataset sequences are shorter than the largest resolution")
    return ds


def _weights_path(p: str) -> Path:
    path = Path(p)
    if path.is_dir():
        path = path / "supernet.json"
    if not path.is_file():
        raise ConfigError(f"weights manifest not found: {p}")
    return path


def _load_weights(args, spec: SpaceSpec):
    from .supernet import SupernetParams
    path = _weights_path(_require_file(args.weights, "weights"))
    try:
        return SupernetParams.load(path, spec, dtype=np.float32)
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, spec, run):
    seed = _seed(args, run)
    d = _section(run, "data")
    ds = gen_dataset(seed=seed, n_train=args.n_train or int(d.get("n_train", 4096)),
                     n_val=args.n_val or int(d.get("n_val", 1024)), n_classes=spec.n_classes,
                     max_resolution=spec.max_resolution)
    out = Path(args.out or "data.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {out} ({len(ds.train)} train / {len(ds.val)} val, seed {seed})")


def _train_config(args, run, seed):
    from .train import TrainConfig
    fields = dict(_section(run, "train"))
    for flag, key in (("epochs", "epochs"), ("lr", "base_lr"), ("batch_size", "batch_size"),
                      ("distill_mode", "distill_mode"), ("distill_loss", "distill_loss"),
                      ("kd_direction", "kd_direction")):
        v = getattr(args, flag, None)
        if v is not None:
            fields[key] = v
    if getattr(args, "distill", None):
        parts = {p.strip() for p in args.distill.split(",")}
        fields["distill_mode"] = "smd" if "smd" in parts else "inplace"
        fields["distill_loss"] = "dkd" if "dkd" in parts else "kd"
    fields["seed"] = seed
    try:
        return TrainConfig(**fields)
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from None


def cmd_pretrain(args, spec, run):
    from .supernet import init_supernet
    from .train import config_dict, train_supernet
    seed = _seed(args, run)
    cfg = _train_config(args, run, seed)
    ds = _load_data(args, spec, run, seed)
    out = _out_dir(args, "pretrain")
    params = init_supernet(spec, seed, dtype=np.dtype(cfg.dtype))
    params, tlog = train_supernet(spec, params, ds, cfg)
    meta = make_meta(spec, seed, "pretrain", train=config_dict(cfg))
    params.save(out / "supernet.json", meta=meta)
    tlog.to_csv(out / "train_log.csv", comment=csv_comment(meta))
    last = tlog.rows[-1] if tlog.rows else {}
    print(f"wrote {out}/supernet.json; final min_acc {last.get('min_acc', float('nan')):.4f} "
          f"max_acc {last.get('max_acc', float('nan')):.4f}")


def cmd_eval_arch(args, spec, run):
    from .latsim import count_flops
    from .supernet import subnet_param_count
    from .train import evaluate
    seed = _seed(args, run)
    params = _load_weights(args, spec)
    ds = _load_data(args, spec, run, seed)
    rng = np.random.default_rng(seed)
    rows = []
    for text in args.genes:
        g = _parse_genes(spec, text, rng)
        rows.append({"genes": list(g), "accuracy": evaluate(spec, params, g, ds.val),
                     "flops": count_flops(spec, g), "params": subnet_param_count(spec, g)})
    doc = {"meta": make_meta(spec, seed, "eval-arch"), "results": rows}
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_finetune(args, spec, run):
    from .surrogate import rank_metrics
    from .train import evaluate, finetune
    seed = _seed(args, run)
    params = _load_weights(args, spec)
    ds = _load_data(args, spec, run, seed)
    rng = np.random.default_rng(seed)
    genomes = [_parse_genes(spec, t, rng) for t in args.genes] if args.genes else []
    while len(genomes) < args.n_archs:
        genomes.append(sample_random(spec, rng))
    out = _out_dir(args, "finetune")
    meta = make_meta(spec, seed, "finetune", steps=args.steps)
    rows = []
    for i, g in enumerate(genomes):
        inh = evaluate(spec, params, g, ds.val)
        ft = finetune(spec, params, g, ds, steps=args.steps, lr=args.lr, seed=seed + i)
        rows.append((g, inh, ft))
        log.info("arch %d inherited %.4f finetuned %.4f", i, inh, ft)
    with open(out / "consistency.csv", "w", newline="") as fh:
        fh.write(f"# {csv_comment(meta)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["genes", "inherited_acc", "finetuned_acc"])
        for g, a, b in rows:
            w.writerow([" ".join(map(str, g)), repr(a), repr(b)])
    inh = np.array([r[1] for r in rows])
    ft = np.array([r[2] for r in rows])
    rmse = float(np.sqrt(np.mean((inh - ft) ** 2)))
    summary = {"n": len(rows), "rmse": rmse}
    if len(rows) >= 2:
        summary["rho"], summary["tau"], _ = rank_metrics(inh, ft)
    write_json(out / "consistency.json", meta, summary=summary)
    print(json.dumps(summary))


def cmd_measure_latency(args, spec, run):
    from .latsim import PROFILES, build_latency_dataset, export_csv, import_csv
    seed = _seed(args, run)
    out = Path(args.out or "latency.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = make_meta(spec, seed, "measure-latency")
    if args.import_csv:
        samples = import_csv(_require_file(args.import_csv, "import"), spec)
        meta["source"] = str(args.import_csv)
    else:
        devices = args.device.split(",") if args.device and args.device != "all" else list(PROFILES)
        for d in devices:
            if d not in PROFILES:
                raise ConfigError(f"unknown device {d!r}; known: {sorted(PROFILES)}")
        samples = build_latency_dataset(spec, args.n, devices, seed)
    export_csv(samples, out, comment=csv_comment(meta))
    print(f"wrote {out} ({len(samples)} rows)")


def cmd_fit_surrogate(args, spec, run):
    from . import surrogate as S
    from .latsim import import_csv
    seed = _seed(args, run)
    lat_path = _require_file(args.latency, "latency")
    samples = import_csv(lat_path, spec)
    devices = sorted({s.device for s in samples})
    if args.device and args.device != "all":
        wanted = args.device.split(",")
        missing = set(wanted) - set(devices)
        if missing:
            raise ConfigError(f"no latency rows for device(s) {sorted(missing)}")
        devices = wanted
    kind = args.kind or _section(run, "surrogate").get("kind", "auto")
    if kind != "auto" and kind not in S.KINDS:
        raise ConfigError(f"unknown surrogate kind {kind!r}; choose auto or one of {S.KINDS}")
    out = _out_dir(args, "surrogate")
    meta = make_meta(spec, seed, "fit-surrogate", latency_csv=str(lat_path))
    report = {}
    for dev in devices:
        X, y = S.device_arrays(spec, samples, dev)
        tr, te = S.split_indices(len(y), seed)
        if kind == "auto":
            chosen, scores = S.select_best(X, y, seed)
        else:
            chosen, scores = kind, {}
        model = S.fit(chosen, X[tr], y[tr], seed=seed, device=dev)
        rho, tau, rmse = S.rank_metrics(model.predict(X[te]), y[te])
        model.meta = {**meta, "device": dev}
        model.save(out / f"surrogate_{dev}.json")
        report[dev] = {"kind": chosen, "rho": rho, "tau": tau, "rmse": rmse,
                       "n_train": len(tr), "n_test": len(te), "candidates": scores}
        print(f"{dev}: {chosen} rho {rho:.4f} tau {tau:.4f} rmse {rmse:.4f} ms")
        if args.sweep:
            sizes = [int(v) for v in args.sweep.split(",")]
            rows = S.sample_efficiency_sweep(X, y, sizes, args.sweep_seeds, split_seed=seed)
            (out / f"sweep_{dev}.csv").write_text(
                f"# {csv_comment({**meta, 'device': dev})}\n" + S.sweep_to_csv(rows), encoding="utf-8")
            report[dev]["sweep"] = S.summarize_sweep(rows)
    write_json(out / "surrogate_report.json", meta, devices=report)


def _scatter_svg(points, front, xlabel, ylabel="val accuracy", w=640, h=420) -> str:
    """Minimal SVG scatter: grey evaluated points, red Pareto front."""
    pad = 50
    xs = [p[1] for p in points] or [0.0, 1.0]
    ys = [p[0] for p in points] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (w - 2 * pad)

    def sy(v):
        return h - pad - (v - y0) / (y1 - y0) * (h - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
             f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
             f'<text x="14" y="{h / 2}" font-size="12" transform="rotate(-90 14 {h / 2})" '
             f'text-anchor="middle">{ylabel}</text>',
             f'<text x="{pad}" y="{h - pad + 15}" font-size="10">{x0:.3g}</text>',
             f'<text x="{w - pad}" y="{h - pad + 15}" font-size="10" text-anchor="end">{x1:.3g}</text>',
             f'<text x="{pad - 4}" y="{h - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
             f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for acc, lat in points:
        parts.append(f'<circle cx="{sx(lat):.1f}" cy="{sy(acc):.1f}" r="2" fill="#999"/>')
    if front:
        path = " ".join(f"{sx(lat):.1f},{sy(acc):.1f}" for acc, lat in front)
        parts.append(f'<polyline points="{path}" fill="none" stroke="#c00"/>')
        for acc, lat in front:
            parts.append(f'<circle cx="{sx(lat):.1f}" cy="{sy(acc):.1f}" r="3" fill="#c00"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_search(args, spec, run):
    from .evolve import SearchConfig, config_dict, front_records, history_csv, run_search, \
        verify_front
    from .surrogate import FittedSurrogate
    seed = _seed(args, run)
    sec = dict(_section(run, "search"))
    for flag, key in (("population", "population"), ("top_k", "top_k"),
                      ("generations", "generations"), ("p_mutation", "p_mutation"),
                      ("objective", "objective"), ("device", "device")):
        v = getattr(args, flag, None)
        if v is not None:
            sec[key] = v
    sec["seed"] = seed
    model = None
    if sec.get("objective", "latency") == "latency":
        mpath = _require_file(args.surrogate, "surrogate")
        try:
            model = FittedSurrogate.load(mpath)
        except (ValueError, KeyError) as e:
            raise ConfigError(f"{mpath}: {e}") from None
        mhash = (model.meta or {}).get("space_hash")
        if mhash and mhash != space_hash(spec):
            raise ConfigError(f"surrogate was fitted for space {mhash}, not {space_hash(spec)}")
        sec.setdefault("device", model.device or "nx")
        sec["surrogate_kind"] = model.kind
    try:
        cfg = SearchConfig(**sec)
    except TypeError as e:
        raise ConfigError(f"bad search config: {e}") from None
    params = _load_weights(args, spec)
    ds = _load_data(args, spec, run, seed)
    res = run_search(spec, params, model, ds.val, cfg)
    res.verification = verify_front(spec, res.front, cfg.device, objective=cfg.objective)
    out = _out_dir(args, "search")
    meta = make_meta(spec, seed, "search", search=config_dict(cfg))
    write_json(out / "pareto.json", meta, front=front_records(spec, res.front, cfg.objective),
               verification=res.verification, ref_point=list(res.ref_point),
               n_evaluated=res.n_evaluated)
    (out / "history.csv").write_text(history_csv(res.history, csv_comment(meta)), encoding="utf-8")
    xlabel = "predicted latency (ms)" if cfg.objective == "latency" else "MFLOPs"
    svg = _scatter_svg([(a, c) for _, a, c in res.evaluated],
                       [(p.accuracy, p.latency) for p in res.front], xlabel)
    (out / "scatter.svg").write_text(svg, encoding="utf-8")
    h = res.history[-1]
    print(f"front {len(res.front)} archs, hypervolume {h['hypervolume']:.4f}, "
          f"{res.n_evaluated} evaluated, {h['elapsed_s']:.1f} s")


def cmd_report(args, spec, run):
    from .report import build_report
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    text = build_report(run_dir)
    out = Path(args.out) if args.out else run_dir / "report.md"
    out.write_text(text, encoding="utf-8")
    print(text)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="space config JSON, or run config JSON with a 'space' key")
    common.add_argument("--seed", type=int, help="global seed (default: config 'seed' or 0)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="desknas", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"desknas {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", parents=[common], help="train the supernet")
    s.add_argument("--data", help="dataset .npz (default: generate from the seed)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--distill", help="comma list, e.g. 'smd,dkd' or 'inplace,kd'")
    s.add_argument("--distill-mode", choices=["smd", "inplace"])
    s.add_argument("--distill-loss", choices=["kd", "dkd"])
    s.add_argument("--kd-direction", choices=["teacher_first", "as_written"])
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval-arch", parents=[common], help="inherited-weight accuracy of subnets")
    s.add_argument("--weights", required=True)
    s.add_argument("--data")
    s.add_argument("--genes", nargs="+", default=["min", "max"],
                   help="min | max | random | comma-separated gene indices")
    s.set_defaults(func=cmd_eval_arch)

    s = sub.add_parser("finetune", parents=[common], help="inherited vs finetuned accuracy")
    s.add_argument("--weights", required=True)
    s.add_argument("--data")
    s.add_argument("--genes", nargs="*")
    s.add_argument("--n-archs", type=int, default=20)
    s.add_argument("--steps", type=int, default=64, help="default: 2 epochs of 128-example batches")
    s.add_argument("--lr", type=float, default=0.02)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("measure-latency", parents=[common], help="simulate or import latencies")
    s.add_argument("--device", default="all", help="comma list of profiles or 'all'")
    s.add_argument("--n", type=int, default=3000, help="distinct architectures per device")
    s.add_argument("--import", dest="import_csv", help="validate and adopt an external latency CSV")
    s.set_defaults(func=cmd_measure_latency)

    s = sub.add_parser("fit-surrogate", parents=[common], help="fit per-device latency predictors")
    s.add_argument("--latency", required=True, help="latency CSV")
    s.add_argument("--device", default="all")
    s.add_argument("--kind", help="mlp | cart | rbf | gp | auto (default auto)")
    s.add_argument("--sweep", help="comma list of training sizes for a sample-efficiency sweep")
    s.add_argument("--sweep-seeds", type=int, default=5)
    s.set_defaults(func=cmd_fit_surrogate)

    s = sub.add_parser("search", parents=[common], help="NSGA-II search")
    s.add_argument("--weights", required=True)
    s.add_argument("--surrogate", help="surrogate JSON (latency objective)")
    s.add_argument("--data")
    s.add_argument("--device")
    s.add_argument("--objective", choices=["latency", "flops"])
    s.add_argument("--population", type=int)
    s.add_argument("--top-k", type=int)
    s.add_argument("--generations", type=int)
    s.add_argument("--p-mutation", type=float)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("report", parents=[common], help="markdown summary of a run directory")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .latsim import LatencyCSVError
    from .surrogate import SurrogateError
    from .train import TrainingDiverged

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            spec, run = load_run_config(args.config)
            args.func(args, spec, run)
    except (ConfigError, SpaceError, LatencyCSVError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, SurrogateError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
