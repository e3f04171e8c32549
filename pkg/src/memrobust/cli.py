"""Command-line entry point.

    memrobust <ingest|campaign|train|sweep|certify|crossbar-demo> [flags]

Every run writes its results and a ``manifest.json`` into ``--out``
(default ``./runs/<timestamp>``).  Exit codes: 0 success, 1 certificate
counterexample, 2 bad input, 3 domain error, 4 numerical failure.
"""

import argparse
import contextlib
import datetime as _dt
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, _accel
from . import bayesopt, certify, ivdata, memsim, neural, nonideality
from .errors import InputError, MemrobustError
from .fileio import atomic_write_text, read_json, write_json

SEED_ENV = "MEMROBUST_SEED"


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _resolve_seed(args):
    if args.seed is not None:
        return args.seed
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _out_dir(args):
    if args.out:
        out = Path(args.out)
    else:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / stamp
        k = 1
        while out.exists():
            out = Path("runs") / f"{stamp}-{k}"
            k += 1
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, args, seed, extra=None):
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "tool": "memrobust",
        "version": __version__,
        "backend": _accel.backend(),
        "command": args.command + (f" {args.action}" if getattr(args, "action", None) else ""),
        "config": config,
        "seed": seed,
        "created": _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat(),
    }
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)


def _floats(text, name):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--{name} expects comma-separated numbers, got {text!r}") from None


def _layers(text):
    if text in (None, "", "all"):
        return None
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"--layers expects 'all' or comma-separated indices, got {text!r}") from None


def _load_model(path):
    try:
        return neural.DenseNetwork.load(path)
    except FileNotFoundError:
        raise InputError(f"model file not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, MemrobustError):
            raise
        raise InputError(f"{path}: not a valid model file ({exc})") from None


def _dataset(args, seed):
    if args.data == "moons":
        return neural.make_moons(args.n, args.noise, seed=args.data_seed)
    try:
        return neural.load_csv_dataset(args.data, seed=args.data_seed)
    except FileNotFoundError:
        raise InputError(f"dataset file not found: {args.data}") from None
    except ValueError as exc:
        if isinstance(exc, MemrobustError):
            raise
        raise InputError(f"{args.data}: {exc}") from None


def _add_data_flags(p):
    p.add_argument("--data", default="moons", help="'moons' or a CSV file (last column = label)")
    p.add_argument("--n", type=int, default=300, help="moons sample count")
    p.add_argument("--noise", type=float, default=0.1, help="moons jitter std")
    p.add_argument("--data-seed", type=int, default=0, help="seed for data generation / split")


def _csv(header, rows):
    return memsim.format_csv(header, rows)


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    seed = _resolve_seed(args)
    try:
        trace = ivdata.parse_iv_file(args.iv_file)
    except FileNotFoundError:
        raise InputError(f"file not found: {args.iv_file}") from None
    cond = ivdata.extract_conductance(trace, args.window)
    profile = nonideality.compute_profile(cond, args.required_len, args.sigma)
    out = _out_dir(args)
    write_json(out / "profile.json", profile.to_dict())
    _write_manifest(out, args, seed)
    print(f"device      {trace.device_id}")
    print(f"cycles      {trace.n_cycles}")
    print(f"lcis        [{profile.lcis_start}, {profile.lcis_end}) length {profile.lcis_len}"
          f" of {profile.required_len}")
    print(f"sigma_mle   {profile.sigma_mle:.6f}")
    print(f"sigma_95    {profile.sigma_95:.6f}")
    print(f"usability   {profile.usability:.3f}")
    print(f"written     {out / 'profile.json'}")
    return 0


# ---------------------------------------------------------------------------
# campaign
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def _locked(state_path):
    import fcntl

    lock = Path(str(state_path) + ".lock")
    lock.parent.mkdir(parents=True, exist_ok=True)
    with open(lock, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _load_state(path):
    try:
        return bayesopt.CampaignState.load(path)
    except FileNotFoundError:
        raise InputError(f"campaign state not found: {path} (run 'campaign init' first)") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a valid campaign file ({exc})") from None


def _parse_config(text, space):
    text = text.strip()
    if text.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"--config is not valid JSON: {exc}") from None
    config = {}
    for part in text.split(","):
        if "=" not in part:
            raise InputError(f"--config entries must be name=value, got {part!r}")
        k, v = part.split("=", 1)
        config[k.strip()] = v.strip()
    return space.canonical(config)


def _fmt_config(config, space=None):
    names = space.names if space is not None else list(config)
    return ", ".join(f"{k}={config[k]}" for k in names)


def cmd_campaign(args):
    seed = _resolve_seed(args)
    state_path = Path(args.state)
    with _locked(state_path):
        if args.action == "init":
            if state_path.exists() and not args.force:
                raise InputError(f"{state_path} exists; pass --force to overwrite")
            if args.space:
                try:
                    space = bayesopt.SearchSpace.from_dict(read_json(args.space))
                except FileNotFoundError:
                    raise InputError(f"space config not found: {args.space}") from None
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise InputError(f"{args.space}: invalid space config ({exc})") from None
            else:
                space = bayesopt.SearchSpace.fabrication()
            state = bayesopt.CampaignState(space=space, seed=seed, n_init=args.n_init)
            state.save(state_path)
            result = {"grid_size": space.size, "dimensions": space.names}
            print(f"initialised {state_path}: {space.size} grid points over {', '.join(space.names)}")
        else:
            state = _load_state(state_path)
            if args.action == "suggest":
                config = bayesopt.suggest(state)
                state.save(state_path)
                result = {"suggestion": config}
                print(_fmt_config(config))
            elif args.action == "tell":
                if args.pending:
                    if state.pending is None:
                        raise InputError("no pending suggestion to tell")
                    config = state.pending
                elif args.config:
                    config = _parse_config(args.config, state.space)
                else:
                    raise InputError("tell needs --config or --pending")
                n_warn = len(state.warnings)
                bayesopt.tell(state, config, args.value, timestamp=args.timestamp, note=args.note)
                state.save(state_path)
                for w in state.warnings[n_warn:]:
                    print(f"warning: {w}", file=sys.stderr)
                result = {"told": state.history[-1]}
                print(f"recorded {args.value} for {_fmt_config(state.history[-1]['config'])}")
            else:
                best = state.best()
                result = {"n_observations": len(state.history), "best": best,
                          "pending": state.pending, "hyper": state.hyper,
                          "grid_size": state.space.size}
                print(f"observations {len(state.history)} of {state.space.size} grid points")
                if best is not None:
                    print(f"best         {best['value']:.6g} at {_fmt_config(best['config'], state.space)}")
                if state.pending:
                    print(f"pending      {_fmt_config(state.pending, state.space)}")
                if state.history:
                    print("#   value      configuration")
                    for i, h in enumerate(state.history, 1):
                        print(f"{i:<3} {h['value']:<10.6g} {_fmt_config(h['config'], state.space)}")
    out = _out_dir(args)
    write_json(out / f"{args.action}.json", result)
    _write_manifest(out, args, seed)
    return 0


# ---------------------------------------------------------------------------
# train / sweep
# ---------------------------------------------------------------------------

def cmd_train(args):
    seed = _resolve_seed(args)
    data = _dataset(args, seed)
    sizes = [data.inputs.shape[1]] + [int(h) for h in _floats(args.hidden, "hidden")] \
        + [max(data.n_classes, 2)]
    init = neural.DenseNetwork.init(sizes, seed=seed)
    spec = (args.p1, args.p2) if args.method == "bayesmulti" else None
    net, history = neural.train(init, data, args.method, spec=spec, lr=args.lr,
                                epochs=args.epochs, batch=args.batch, seed=seed)
    out = _out_dir(args)
    net.save(out / "model.json")
    atomic_write_text(out / "history.csv",
                      _csv(("epoch", "train_loss", "val_accuracy"), history.rows()))
    Xt, yt = data.part("test")
    metrics = {"method": args.method, "test_accuracy": neural.accuracy(net, Xt, yt) if len(yt) else None,
               "final_train_loss": history.train_loss[-1]}
    write_json(out / "metrics.json", metrics)
    _write_manifest(out, args, seed)
    print(f"trained {args.method} {'-'.join(map(str, sizes))} for {args.epochs} epochs")
    if metrics["test_accuracy"] is not None:
        print(f"test accuracy {metrics['test_accuracy']:.4f}")
    print(f"written {out / 'model.json'}")
    return 0


def cmd_sweep(args):
    seed = _resolve_seed(args)
    models = {}
    for spec in args.model:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        if name in models:
            raise InputError(f"duplicate model name {name!r}")
        models[name] = _load_model(path)
    data = _dataset(args, seed)
    grid = _floats(args.usability, "usability")
    rows = memsim.run_sweep(models, data, grid, args.trials, seed, args.mono_fraction,
                            layers=_layers(args.layers))
    out = _out_dir(args)
    memsim.write_sweep_csvs(rows, out / "sweep_trials.csv", out / "sweep_aggregate.csv")
    _write_manifest(out, args, seed)
    print("usability  method          mean    std")
    for u, m, mean, std in memsim.aggregate_sweep(rows):
        print(f"{u:<10.3g} {m:<14} {mean:.4f}  {std:.4f}")
    return 0


# ---------------------------------------------------------------------------
# certify
# ---------------------------------------------------------------------------

def _fixture():
    text = resources.files("memrobust").joinpath("data/certify_fixture.json").read_text("utf-8")
    return json.loads(text)


def cmd_certify(args):
    seed = _resolve_seed(args)
    fixture = None if args.model else _fixture()
    net = _load_model(args.model) if args.model else neural.DenseNetwork.from_dict(fixture["model"])
    if args.input:
        x = _floats(args.input, "input")
    elif fixture is not None:
        x = fixture["input"]
    else:
        raise InputError("--input is required with --model")
    site = next((l.noise for l in net.layers if l.noise is not None), None)
    p1 = args.p1 if args.p1 is not None else (fixture["p1"] if fixture else getattr(site, "p1", None))
    p2 = args.p2 if args.p2 is not None else (fixture["p2"] if fixture else getattr(site, "p2", 0.0))
    if p1 is None:
        raise InputError("--p1 is required when the model has no noise site")
    theta = certify.certified_coordinates(net).size
    if theta <= certify.VERIFY_CAP and not args.no_verify:
        grid = _floats(args.value_grid, "value-grid") if args.value_grid else certify.DEFAULT_VALUE_GRID
        report = certify.verify_certificate(net, x, p1, p2, grid, seed=seed)
        result = report.to_dict()
        status = 0 if report.ok else 1
    else:
        cert = certify.certify_network(net, x, p1, p2, n_samples=args.samples, seed=seed)
        result = cert.to_dict()
        result.update({"tested_patterns": 0, "min_margin": None})
        status = 0
    out = _out_dir(args)
    write_json(out / "certificate.json", result)
    _write_manifest(out, args, seed)
    print(f"f_pi0       {result['f_pi0']:.6f}")
    print(f"theta_count {result['theta_count']}")
    print(f"radius      {result['radius']:.6f}")
    print(f"certified   {str(result['certified']).lower()}")
    if result.get("tested_patterns"):
        print(f"tested      {result['tested_patterns']} perturbations, min margin {result['min_margin']:.6f}")
    if status:
        print(f"COUNTEREXAMPLE: {result['n_violations']} perturbation(s) inside the certified set "
              "flip the prediction", file=sys.stderr)
    return status


# ---------------------------------------------------------------------------
# crossbar demo
# ---------------------------------------------------------------------------

def crossbar_demo(data, profile, reps=1, trials=10, seed=0, hidden=10, spec=(0.1, 0.3),
                  epochs=1500, lr=0.1, batch=32, layers=(0,), rows=10, cols=10):
    """Software vs simulated-crossbar accuracy for ERM and BayesMulti.

    Repetition ``r`` trains both methods from the same initialisation with
    seed ``seed + r`` and programs the crossbar ``trials`` times.
    Returns rows ``(rep, method, software, hardware, gap)``.
    """
    model = memsim.CrossbarModel(rows=rows, cols=cols, profile=profile)
    Xt, yt = data.part("test")
    if len(yt) == 0:
        raise InputError("test split is empty")
    sizes = [data.inputs.shape[1], hidden, max(data.n_classes, 2)]
    out = []
    for r in range(reps):
        s = seed + r
        init = neural.DenseNetwork.init(sizes, seed=s)
        for method in ("erm", "bayesmulti"):
            net, _ = neural.train(init, data, method, spec=spec if method == "bayesmulti" else None,
                                  lr=lr, epochs=epochs, batch=batch, seed=s)
            sw = neural.accuracy(net, Xt, yt)
            hw = float(np.mean([memsim.crossbar_accuracy(net, model, Xt, yt, seed=[s, t], layers=layers)
                                for t in range(trials)]))
            out.append((r, method, sw, hw, sw - hw))
    return out


def cmd_crossbar_demo(args):
    seed = _resolve_seed(args)
    data = _dataset(args, seed)
    profile = nonideality.synthesize_profile(args.usability, max(args.mono_fraction, args.usability))
    rows = crossbar_demo(data, profile, reps=args.reps, trials=args.trials, seed=seed,
                         hidden=args.hidden, spec=(args.p1, args.p2), epochs=args.epochs,
                         lr=args.lr, batch=args.batch, layers=_layers(args.layers) or (0,),
                         rows=args.rows, cols=args.cols)
    out = _out_dir(args)
    atomic_write_text(out / "crossbar_demo.csv",
                      _csv(("rep", "method", "software_accuracy", "hardware_accuracy", "gap"), rows))
    gaps = {m: [g for _, mm, _, _, g in rows if mm == m] for m in ("erm", "bayesmulti")}
    wins = int(sum(b < e for e, b in zip(gaps["erm"], gaps["bayesmulti"])))
    summary = {"usability": args.usability, "reps": args.reps,
               "mean_gap": {m: float(np.mean(v)) for m, v in gaps.items()},
               "bayesmulti_smaller_gap": wins}
    write_json(out / "crossbar_summary.json", summary)
    _write_manifest(out, args, seed)
    print(f"profile usability {args.usability}  (sigma {profile.sigma:.4f})")
    print("rep  method       software  hardware  gap")
    for r, m, sw, hw, g in rows:
        print(f"{r:<4} {m:<12} {sw:.4f}    {hw:.4f}    {g:+.4f}")
    print(f"BayesMulti gap smaller in {wins} of {args.reps} repetition(s)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default ./runs/<timestamp>)")
    common.add_argument("--seed", type=int, default=None,
                        help=f"global seed (default ${SEED_ENV} or 0)")

    parser = argparse.ArgumentParser(prog="memrobust", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"memrobust {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="profile a multi-cycle I-V sweep file")
    p.add_argument("iv_file")
    p.add_argument("--required-len", type=int, default=nonideality.REQUIRED_LEN)
    p.add_argument("--sigma", choices=nonideality.SIGMA_VARIANTS, default="upper95")
    p.add_argument("--window", type=int, default=5)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("campaign", help="ask/tell fabrication campaign")
    csub = p.add_subparsers(dest="action", required=True)
    for name in ("init", "suggest", "tell", "status"):
        c = csub.add_parser(name, parents=[common])
        c.add_argument("--state", default="campaign.json", help="campaign state file")
        c.set_defaults(func=cmd_campaign)
        if name == "init":
            c.add_argument("--space", help="JSON search-space override")
            c.add_argument("--n-init", type=int, default=1)
            c.add_argument("--force", action="store_true")
        elif name == "tell":
            c.add_argument("--config", help="name=value,... or a JSON object")
            c.add_argument("--pending", action="store_true", help="tell the pending suggestion")
            c.add_argument("--value", type=float, required=True)
            c.add_argument("--timestamp", help="ISO timestamp to record (default now)")
            c.add_argument("--note", default="")

    p = sub.add_parser("train", parents=[common], help="train a dense network")
    _add_data_flags(p)
    p.add_argument("--method", choices=("erm", "bayesmulti"), default="erm")
    p.add_argument("--p1", type=float, default=0.1)
    p.add_argument("--p2", type=float, default=0.3)
    p.add_argument("--hidden", default="10", help="comma-separated hidden widths")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch", type=int, default=32)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="accuracy over a usability grid")
    _add_data_flags(p)
    p.add_argument("--model", action="append", required=True, metavar="[NAME=]PATH")
    p.add_argument("--usability", default=",".join(map(str, memsim.DEFAULT_USABILITIES)))
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--mono-fraction", type=float, default=1.0)
    p.add_argument("--layers", default="all", help="'all' or comma-separated layer indices")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("certify", parents=[common], help="certified radius and brute-force check")
    p.add_argument("--model", help="model JSON (default: bundled 6-weight fixture)")
    p.add_argument("--input", help="comma-separated input vector")
    p.add_argument("--p1", type=float)
    p.add_argument("--p2", type=float)
    p.add_argument("--value-grid", help="comma-separated arbitrary values")
    p.add_argument("--samples", type=int, default=10000, help="Monte-Carlo samples for large nets")
    p.add_argument("--no-verify", action="store_true")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("crossbar-demo", parents=[common], help="software vs crossbar accuracy gap")
    _add_data_flags(p)
    p.add_argument("--usability", type=float, default=0.7)
    p.add_argument("--mono-fraction", type=float, default=1.0)
    p.add_argument("--p1", type=float, default=0.1)
    p.add_argument("--p2", type=float, default=0.3)
    p.add_argument("--hidden", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=1500)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--cols", type=int, default=10)
    p.add_argument("--layers", default="0", help="layers run on the crossbar")
    p.set_defaults(func=cmd_crossbar_demo)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MemrobustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
