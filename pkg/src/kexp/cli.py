"""Command-line front end: ``kexp {data,train,sample,eval,report}``.

Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 resource guard.
``KEXP_THREADS`` caps the BLAS thread pools; it must be read before numpy is
imported, hence the block at the top of this module.
"""

import os

if os.environ.get("KEXP_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["KEXP_THREADS"]

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import dataclass, field, fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .data import DEFAULT_SIZES, GENERATORS, generate, load_dataset, read_csv, write_csv  # noqa: E402
from .errors import (ContractError, KexpError, NumericError, ResourceError,  # noqa: E402
                     UnsupportedError)

log = logging.getLogger("kexp")

METRIC_HEADER = ["dataset", "method", "metric", "value", "stderr", "seed"]


# -- manifest ------------------------------------------------------------------------

@dataclass
class RunManifest:
    """What a command did. Timings live in ``timing.json`` (opt-in) so that
    every default output stays bitwise reproducible."""

    command: list
    config_hash: str
    seed: int
    version: str = __version__
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def write(self, out_dir: Path, record_timing: bool) -> None:
        missing = [p for p in self.outputs if not (out_dir / p).exists()]
        if missing:
            raise KexpError(f"outputs missing after run: {missing}")
        body = {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
                "version": self.version, "outputs": sorted(self.outputs)}
        if record_timing:
            with open(out_dir / "timing.json", "w") as fh:
                json.dump(self.timings, fh, indent=1, sort_keys=True)
            body["outputs"] = sorted(self.outputs + ["timing.json"])
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(body, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_NOT_SEMANTIC = {"out", "timing", "verbose", "func", "_argv"}


def config_hash(args, inputs=(), extra=None) -> str:
    """Hash of everything that can change the outputs: flags, config and input bytes.

    Output location, logging and timing flags are excluded; keys are sorted so
    the hash is stable under field reordering.
    """
    settings = {k: v for k, v in vars(args).items() if k not in _NOT_SEMANTIC}
    blob = {"settings": settings, "inputs": {str(p): _file_digest(p) for p in inputs if p},
            "extra": extra or {}}
    text = json.dumps(blob, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class _Timer:
    def __init__(self):
        self.phases = {}

    def __call__(self, name):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = time.perf_counter() - self.t0

        return _Phase()


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ContractError(f"cannot create output directory {out}: {exc}") from None
    return out


def _seed(args, name):
    from .trainer import substream_seed
    return substream_seed(args.seed, name)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# -- data ----------------------------------------------------------------------------

def cmd_data(args) -> int:
    out = _out_dir(args)
    timer = _Timer()
    outputs = []
    with timer("generate"):
        if args.action == "gen":
            n = args.n if args.n is not None else DEFAULT_SIZES.get(args.name, (500, 0))[0]
            ds = generate(args.name, n, args.d, _seed(args, "data"))
            name = f"{args.name}.csv"
            write_csv(out / name, ds.samples, _header(ds))
            outputs.append(name)
        else:
            from .plotting import scatter_panel
            n_train, n_test = DEFAULT_SIZES.get(args.name, (500, 5000))
            n_train = args.n if args.n is not None else n_train
            n_test = args.n_test if args.n_test is not None else n_test
            train = generate(args.name, n_train, args.d, _seed(args, "data-train"))
            test = generate(args.name, n_test, args.d, _seed(args, "data-test"))
            for split, ds in (("train", train), ("test", test)):
                name = f"{args.name}_{split}.csv"
                write_csv(out / name, ds.samples, _header(ds))
                outputs.append(name)
            scatter_panel(out / f"{args.name}_train.png", train.samples, f"{args.name} (train)")
            outputs.append(f"{args.name}_train.png")
    RunManifest(_argv(args), config_hash(args), args.seed, outputs=outputs,
                timings=timer.phases).write(out, args.timing)
    return 0


def _header(ds):
    if ds.columns is not None:
        return list(ds.columns)
    return [f"x{i}" for i in range(ds.d)]


# -- train ---------------------------------------------------------------------------

def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_float(text):
    return math.inf if str(text).lower() == "inf" else float(text)


def _add_config_flags(p):
    from .trainer import TrainConfig
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        kind = type(f.default)
        conv = {bool: _parse_bool, float: _parse_float, int: int}.get(kind, str)
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=conv,
                       default=None, metavar=kind.__name__.upper())


def _build_config(args):
    from .trainer import TrainConfig
    d = {}
    if args.config:
        try:
            with open(args.config) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(d, dict):
            raise ContractError("config file must hold a JSON object")
    for k, v in vars(args).items():
        if k.startswith("cfg_") and v is not None:
            d[k[4:]] = v
    d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _cols(text):
    if text is None:
        return None
    return [c.strip() for c in text.split(",") if c.strip()]


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _build_config(args)
    ds = load_dataset(args.data, _cols(args.x_cols), _cols(args.y_cols))
    if (args.x_cols is None) != (args.y_cols is None):
        raise ContractError("--x-cols and --y-cols must be given together")
    timer = _Timer()
    outputs = ["model.json"]
    if args.method == "dde":
        from .trainer import train, train_conditional
        with timer("train"):
            fit = train_conditional if ds.conditional else train
            model = fit(ds, cfg)
        model.save(out / "model.json")
        rows = [[r["iteration"], r["objective"], r["mmd_train"], r["f_terms"], r["nu_terms"]]
                for r in model.history]
        _write_rows(out / "curve.csv", ["iteration", "objective", "mmd_train", "f_terms",
                                        "nu_terms"], rows)
        outputs.append("curve.csv")
    else:
        if ds.conditional:
            raise UnsupportedError("score matching is implemented for unconditional data only")
        from .baselines import fit_score_matching
        from .kernel import KernelSpec, median_bandwidth
        from .trainer import make_reference
        with timer("train"):
            X = ds.samples
            bw = cfg.bandwidth_scale * median_bandwidth(X, seed=_seed(args, "init"))
            sm = fit_score_matching(X, KernelSpec(bw, X.shape[1]), cfg.eta,
                                    make_reference(X, cfg.inflation), lam=cfg.lam)
        sm.save(out / "model.json")
    RunManifest(_argv(args), config_hash(args, [args.data, args.config], cfg.to_dict()),
                args.seed, outputs=outputs, timings=timer.phases).write(out, args.timing)
    return 0


# -- sample --------------------------------------------------------------------------

def load_any_model(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractError(f"cannot read model {path}: {exc}") from None
    fmt = d.get("format", "")
    if fmt.startswith("kexp-model/"):
        from .trainer import TrainedModel
        return TrainedModel.from_dict(d)
    if fmt.startswith("kexp-score-matching/"):
        from .baselines import ScoreMatchingModel
        return ScoreMatchingModel.from_dict(d)
    raise ContractError(f"{path}: unknown model format {fmt!r}")


def _conditions(model, path):
    header, C = read_csv(path)
    nx, ny = len(model.x_cols), len(model.y_cols)
    if C.shape[1] == nx + ny:
        return C[:, list(model.x_cols)]
    if C.shape[1] == nx:
        return C
    raise ContractError(f"{path}: expected {nx} or {nx + ny} columns, got {C.shape[1]}")


def _hmc_draws(model, n, args):
    from .baselines import HmcConfig, hmc_sample
    if not hasattr(model, "log_density_and_grad") or getattr(model, "mode", "") == "conditional":
        raise UnsupportedError("hmc needs an unconditional model with an evaluable f")
    if getattr(model, "base", None) is None:
        raise UnsupportedError("model has no reference measure, cannot evaluate its density")
    init = model.data.mean(axis=0) if hasattr(model, "data") else model.from_model(
        model.base.mean.reshape(1, -1))[0]
    cfg = HmcConfig(step_size=args.hmc_step, leapfrog_steps=args.leapfrog_steps,
                    chain_length=args.burn_in + n, burn_in=args.burn_in,
                    seed=_seed(args, "hmc"))
    res = hmc_sample(model.log_density_and_grad, cfg, init)
    log.info("hmc acceptance %.3f, step %.4g", res.acceptance_rate, res.step_size)
    return res.draws


def cmd_sample(args) -> int:
    out = _out_dir(args)
    if args.n < 0:
        raise ContractError("--n must be >= 0")
    model = load_any_model(args.model)
    conditional = getattr(model, "mode", "") == "conditional"
    if hasattr(model, "sampler"):
        dim = len(model.y_cols) if conditional else model.dim
        model.sampler.rng = np.random.default_rng(_seed(args, "sample"))
    else:
        dim = model.kernel.input_dim
    cond = None
    if conditional:
        if args.cond is None:
            raise ContractError("conditional model needs --cond with conditioning rows")
        cond = _conditions(model, args.cond)
        n = cond.shape[0]
    else:
        n = args.n
    timer = _Timer()
    with timer("sample"):
        if n == 0:
            S = np.empty((0, dim))
        elif args.method == "direct":
            if not hasattr(model, "sampler"):
                raise UnsupportedError("score-matching models have no learned sampler; use hmc")
            S = model.sample(n, cond)
        else:
            S = _hmc_draws(model, n, args)
    print(f"sampled {n} points in {timer.phases['sample']:.4f} s ({args.method})",
          file=sys.stderr)
    write_csv(out / "samples.csv", S, [f"x{i}" for i in range(dim)])
    RunManifest(_argv(args), config_hash(args, [args.model, args.cond]), args.seed,
                outputs=["samples.csv"], timings=timer.phases).write(out, args.timing)
    return 0


# -- eval ----------------------------------------------------------------------------

def cmd_eval(args) -> int:
    out = _out_dir(args)
    timer = _Timer()
    rows = []
    inputs = []
    with timer("eval"):
        if args.metric == "mmd":
            if not args.samples or not args.test:
                raise ContractError("mmd needs --samples and --test")
            from .evaluation import mmd
            _, S = read_csv(args.samples)
            _, T = read_csv(args.test)
            rep = mmd(S, T)
            rows.append([args.dataset, args.method, "mmd_unbiased", rep.mmd_unbiased, math.nan,
                         args.seed])
            rows.append([args.dataset, args.method, "mmd_biased", rep.mmd_biased, math.nan,
                         args.seed])
            inputs = [args.samples, args.test]
        else:
            if not args.model or not args.test:
                raise ContractError("nll needs --model and --test")
            from .evaluation import nll_conditional, nll_unconditional
            model = load_any_model(args.model)
            if not hasattr(model, "sampler"):
                raise UnsupportedError("nll is implemented for models trained with dde")
            if model.mode == "conditional":
                x_cols = _cols(args.x_cols) or list(model.x_cols)
                y_cols = _cols(args.y_cols) or list(model.y_cols)
                test = load_dataset(args.test, x_cols, y_cols)
                rep = nll_conditional(model, test, n_mc=args.n_mc, seed=_seed(args, "eval"),
                                      method=args.nll_method)
            else:
                _, T = read_csv(args.test)
                rep = nll_unconditional(model, T)
            rows.append([args.dataset, args.method, "nll", rep.mean_nll, rep.std_err, args.seed])
            inputs = [args.model, args.test]
    _write_rows(out / "metrics.csv", METRIC_HEADER, rows)
    with open(out / "metrics.json", "w") as fh:
        json.dump([dict(zip(METRIC_HEADER, r)) for r in rows], fh, indent=1, sort_keys=True)
        fh.write("\n")
    for r in rows:
        print(f"{r[2]} = {r[3]:.6g}")
    RunManifest(_argv(args), config_hash(args, inputs), args.seed,
                outputs=["metrics.csv", "metrics.json"], timings=timer.phases
                ).write(out, args.timing)
    return 0


# -- report --------------------------------------------------------------------------

def _metric_files(paths):
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.rglob("metrics.csv")))
        elif p.exists():
            files.append(p)
        else:
            raise ContractError(f"no such metrics file or directory: {p}")
    return files


def aggregate(rows):
    """Group rows by (dataset, method, metric): sample mean and sample std (ddof=1)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["method"], r["metric"]), []).append(float(r["value"]))
    out = []
    for key in sorted(groups):
        v = np.array(groups[key])
        std = float(v.std(ddof=1)) if v.size > 1 else math.nan
        out.append((*key, float(v.mean()), std, int(v.size)))
    return out


def markdown_table(agg) -> str:
    methods = sorted({a[1] for a in agg})
    lines = ["| dataset | metric | " + " | ".join(methods) + " |",
             "|---|---|" + "---|" * len(methods)]
    cells = {(a[0], a[2], a[1]): a for a in agg}
    for dataset, metric in sorted({(a[0], a[2]) for a in agg}):
        row = []
        for m in methods:
            a = cells.get((dataset, metric, m))
            if a is None:
                row.append("")
            elif math.isnan(a[4]):
                row.append(f"{a[3]:.4g} (n={a[5]})")
            else:
                row.append(f"{a[3]:.4g} ± {a[4]:.2g} (n={a[5]})")
        lines.append(f"| {dataset} | {metric} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _labelled(items, flag):
    out = []
    for item in items or []:
        label, sep, path = item.partition("=")
        if not sep or not label or not path:
            raise ContractError(f"{flag} expects LABEL=PATH, got {item!r}")
        out.append((label, path))
    return out


def cmd_report(args) -> int:
    from .plotting import bar_panel, curve_panel, scatter_panel
    out = _out_dir(args)
    files = _metric_files(args.metrics or [])
    rows = []
    for f in files:
        with open(f, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    samples = _labelled(args.samples, "--samples")
    curves = _labelled(args.curves, "--curves")
    if not rows and not samples and not curves:
        raise ContractError("report needs at least one metrics row, sample file or curve")
    outputs = []
    timer = _Timer()
    with timer("report"):
        if rows:
            agg = aggregate(rows)
            _write_rows(out / "table.csv", ["dataset", "method", "metric", "mean", "std",
                                            "n_seeds"], agg)
            (out / "table.md").write_text(markdown_table(agg))
            outputs += ["table.csv", "table.md"]
            for metric in sorted({a[2] for a in agg}):
                sub = [a for a in agg if a[2] == metric]
                name = f"panel_{_slug(metric)}"
                labels = [f"{a[0]}/{a[1]}" for a in sub]
                _write_rows(out / f"{name}.csv", ["label", "mean", "std"],
                            [(lab, a[3], a[4]) for lab, a in zip(labels, sub)])
                bar_panel(out / f"{name}.png", labels, [a[3] for a in sub],
                          [0.0 if math.isnan(a[4]) else a[4] for a in sub], metric)
                outputs += [f"{name}.csv", f"{name}.png"]
        ref = read_csv(args.reference)[1] if args.reference else None
        for label, path in samples:
            _, S = read_csv(path)
            name = f"samples_{_slug(label)}"
            _write_rows(out / f"{name}.csv", [f"x{i}" for i in range(S.shape[1])],
                        [list(map(float, r)) for r in S])
            scatter_panel(out / f"{name}.png", S, label, reference=ref)
            outputs += [f"{name}.csv", f"{name}.png"]
        for label, path in curves:
            header, C = read_csv(path)
            it = C[:, header.index("iteration")]
            for col in ("objective", "mmd_train"):
                if col not in header:
                    continue
                name = f"curve_{_slug(label)}_{col}"
                _write_rows(out / f"{name}.csv", ["iteration", col],
                            [(float(a), float(b)) for a, b in zip(it, C[:, header.index(col)])])
                curve_panel(out / f"{name}.png", it, C[:, header.index(col)], col, label,
                            logy=col == "mmd_train")
                outputs += [f"{name}.csv", f"{name}.png"]
    inputs = list(files) + [p for _, p in samples + curves] + ([args.reference] if args.reference
                                                             else [])
    RunManifest(_argv(args), config_hash(args, inputs), args.seed, outputs=outputs,
                timings=timer.phases).write(out, args.timing)
    return 0


def _slug(text):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in str(text))


# -- entry point -----------------------------------------------------------------------

def _argv(args):
    return list(args._argv)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--timing", action="store_true",
                        help="also write wall-clock timings to timing.json")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kexp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"kexp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", help="generate or export synthetic datasets")
    dsub = d.add_subparsers(dest="action", required=True)
    for action, text in (("gen", "write one dataset CSV"),
                         ("export", "write train/test CSVs and a scatter plot")):
        a = dsub.add_parser(action, parents=[common], help=text)
        a.add_argument("--name", required=True, choices=sorted(GENERATORS))
        a.add_argument("--n", type=int, default=None, help="rows (train rows for export)")
        a.add_argument("--d", type=int, default=2, help="dimension for ring and grid")
        if action == "export":
            a.add_argument("--n-test", type=int, default=None)
        a.set_defaults(func=cmd_data)

    t = sub.add_parser("train", parents=[common], help="fit a model to a CSV dataset")
    t.add_argument("--method", choices=["dde", "score_matching"], default="dde")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="JSON object of TrainConfig fields")
    t.add_argument("--x-cols", default=None, help="conditioning columns (names or indices)")
    t.add_argument("--y-cols", default=None, help="response columns (names or indices)")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="draw samples from a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--method", choices=["direct", "hmc"], default="direct")
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--cond", default=None, help="CSV of conditioning rows (conditional models)")
    s.add_argument("--hmc-step", type=float, default=0.1)
    s.add_argument("--leapfrog-steps", type=int, default=10)
    s.add_argument("--burn-in", type=int, default=500)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", parents=[common], help="compute MMD or NLL")
    e.add_argument("--metric", choices=["mmd", "nll"], required=True)
    e.add_argument("--samples", default=None)
    e.add_argument("--test", default=None)
    e.add_argument("--model", default=None)
    e.add_argument("--x-cols", default=None)
    e.add_argument("--y-cols", default=None)
    e.add_argument("--n-mc", type=int, default=10_000)
    e.add_argument("--nll-method", choices=["auto", "quadrature", "importance"], default="auto")
    e.add_argument("--dataset", default="data", help="label for the metrics row")
    e.add_argument("--method", default="dde", help="label for the metrics row")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", parents=[common], help="aggregate metrics, render figures")
    r.add_argument("--metrics", nargs="*", help="metrics.csv files or directories")
    r.add_argument("--samples", action="append", help="LABEL=samples.csv (repeatable)")
    r.add_argument("--curves", action="append", help="LABEL=curve.csv (repeatable)")
    r.add_argument("--reference", default=None, help="data CSV drawn behind sample scatters")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, UnsupportedError, FileNotFoundError) as exc:
        print(f"kexp: error: {exc}", file=sys.stderr)
        return 2
    except ResourceError as exc:
        print(f"kexp: resource guard: {exc}", file=sys.stderr)
        return 4
    except (NumericError, FloatingPointError, KexpError) as exc:
        code = getattr(exc, "exit_code", 3)
        print(f"kexp: numeric failure: {exc}", file=sys.stderr)
        return code if code in (2, 3, 4) else 3


if __name__ == "__main__":
    sys.exit(main())
