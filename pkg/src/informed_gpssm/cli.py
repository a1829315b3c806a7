"""Command-line entry point: ``informed-gpssm <verb> [options]``.

Every verb reads an optional plain-text ``key = value`` config file
(``--config``); explicit flags override file values. Numeric outputs are CSV
files; each run also writes ``manifest_<verb>.txt`` (parameters, seed and
package versions, no timestamps) and, where timing is measured, ``timing.txt``.
"""

from __future__ import annotations

import argparse
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .data import DatasetError, TrajectoryDataset, load_dataset, save_dataset, split_fractions, wrap_angle
from .gpssm import Gpssm, condition, informed_prior, load_posterior, save_posterior, stationary_prior
from .monitor import MonitorConfig, flag_reports, normalize, pooled_normalize, run_monitor, save_reports
from .sim import (
    UnicycleWorld,
    collect_run,
    elbow_dataset,
    elbow_eval,
    poke,
    random_waypoints,
    rocky_terrain,
    rope_pull,
    save_mask,
)
from .spectral import (
    AutoencoderConfig,
    load_features,
    matern_spectrum_baseline,
    save_features,
    save_loss_trace,
    train,
)

STATE_DIM, CONTROL_DIM = 3, 2
HEADING = (2,)


class CliError(Exception):
    pass


# name -> (type, default, help); shared by several verbs
_COMMON = {
    "seed": (int, 0, "base random seed"),
    "out": (str, None, "output directory"),
}
_FEATURES = {
    "M": (int, 300, "features per state component"),
    "epochs": (int, 1500, "autoencoder epochs"),
    "learning_rate": (float, 0.01, "initial Adam step size"),
    "lambda_w": (float, 0.1, "frequency penalty"),
    "freq_init": (float, 3.0, "frequencies start uniform in [-f, f]"),
    "mode": (str, "direct", "direct or encoder"),
    "precision": (str, "single", "single or double"),
    "lengthscale": (float, 1.0, "baseline kernel lengthscale"),
}
_PRIOR = {
    "xi": (float, 1.0, "prior variance scale v = xi * S"),
    "sigma_d": (float, 0.01, "process noise std"),
    "sigma_n": (float, 0.005, "observation noise std"),
}
_MONITOR = {
    "H": (int, 30, "rollout horizon"),
    "R": (int, 20, "rollouts per tick"),
    "threshold": (float, 0.5, "flag threshold on the normalised loss"),
    "normalization": (str, "offline-minmax", "offline-minmax or fixed-bounds"),
    "bounds": (str, "", "fixed-bounds min,max"),
    "rollout_precision": (str, "single", "cosine precision in rollouts: single or double"),
}

VERBS = {
    "gen-data": {
        **_COMMON,
        "world": (str, "circle", "circle or random waypoints"),
        "waypoints": (int, 200, "number of random waypoints"),
        "duration": (float, 600.0, "seconds"),
        "rate": (float, 10.0, "Hz"),
        "perturbations": (str, "", "comma list of rope, rocky, poke"),
    },
    "train-features": {
        **_COMMON,
        **_FEATURES,
        "data": (str, None, "dataset CSV"),
        "kind": (str, "informed", "informed, matern or se"),
    },
    "fit-gpssm": {
        **_COMMON,
        **_PRIOR,
        "data": (str, None, "dataset CSV to condition on"),
        "features": (str, None, "directory written by train-features"),
    },
    "elbow-study": {
        **_COMMON,
        "T": (int, 50, "dataset size"),
        "epochs": (int, 10000, "autoencoder epochs"),
        "learning_rate": (float, 0.01, "initial Adam step size"),
        "lambda_w": (float, 0.1, "frequency penalty"),
        "freq_init": (float, 3.0, "frequency init range"),
        "lengthscale": (float, 1.0, "baseline Matern lengthscale"),
        "grid": (int, 1001, "evaluation points on [-10, 10]"),
    },
    "ood-study": {
        **_COMMON,
        **_FEATURES,
        **_PRIOR,
        **_MONITOR,
        "train_duration": (float, 600.0, "seconds of nominal walking for training"),
        "env_duration": (float, 120.0, "seconds per test environment"),
        "features": (str, "", "reuse informed features from this directory"),
    },
    "data-efficiency": {
        **_COMMON,
        **_FEATURES,
        **_PRIOR,
        "xi": (float, 100.0, "prior variance scale v = xi * S"),
        "seeds": (int, 5, "number of dataset seeds"),
        "fractions": (str, "0.25,0.5,0.75,1.0", "training fractions"),
        "holdout": (float, 0.2, "held-out share"),
        "duration": (float, 600.0, "seconds per dataset"),
        "waypoints": (int, 200, "random waypoints per dataset"),
    },
    "monitor-stream": {
        **_COMMON,
        **_MONITOR,
        "data": (str, None, "recorded run (dataset CSV)"),
        "model": (str, None, "directory with features (train-features) and posteriors (fit-gpssm)"),
        "sigma_n": (float, 0.005, "observation noise std in the loss"),
        "rollout_noise": (int, 1, "1 adds transition noise to rollouts"),
    },
}


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}: line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(verb: str, flags: dict, config: dict) -> dict:
    options = VERBS[verb]
    unknown = set(config) - set(options)
    if unknown:
        raise CliError(f"unknown config keys for {verb}: {', '.join(sorted(unknown))}")
    params = {}
    for name, (typ, default, _) in options.items():
        raw = flags.get(name)
        if raw is None:
            raw = config.get(name, default)
        try:
            params[name] = None if raw is None else typ(raw)
        except ValueError as exc:
            raise CliError(f"{name}: cannot read {raw!r} as {typ.__name__}") from exc
    if params.get("out") is None:
        params["out"] = f"runs/{verb}"
    return params


def _require(params, *names, hint=""):
    for n in names:
        if not params.get(n):
            raise CliError(f"missing --{n.replace('_', '-')}{hint}")


def _write_manifest(out: Path, verb: str, params: dict, extra=()) -> None:
    lines = [
        f"command: {verb}",
        f"informed_gpssm: {__version__}",
        f"python: {platform.python_version()}",
        f"numpy: {np.__version__}",
        f"scipy: {scipy.__version__}",
    ]
    lines += [f"{k}: {params[k]}" for k in sorted(params)]
    lines += list(extra)
    (out / manifest_name(verb)).write_text("\n".join(lines) + "\n")


def manifest_name(verb: str) -> str:
    # One manifest per verb, so commands sharing a directory keep theirs.
    return f"manifest_{verb.replace('-', '_')}.txt"


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def _autoencoder(params, M=None, seed=0) -> AutoencoderConfig:
    return AutoencoderConfig(
        M=params["M"] if M is None else M,
        lambda_w=params["lambda_w"],
        epochs=params["epochs"],
        learning_rate=params["learning_rate"],
        freq_init=params["freq_init"],
        mode=params.get("mode", "direct"),
        precision=params.get("precision", "double"),
        seed=seed,
    )


def _fit_one(data, d, kind, params, cfg):
    if kind == "informed":
        return train(data, d, cfg)
    if kind == "matern":
        return matern_spectrum_baseline(data, d, cfg, params["lengthscale"], nu=1.5), None
    if kind == "se":
        return matern_spectrum_baseline(data, d, cfg, params["lengthscale"], kind="se"), None
    raise CliError(f"unknown feature kind {kind!r} (informed, matern or se)")


def _fit_features(data, kind, params, seed):
    return [_fit_one(data, d, kind, params, _autoencoder(params, seed=seed + d))[0] for d in range(data.state_dim)]


def _priors(kind, feats, data, params):
    if kind == "informed":
        return [informed_prior(f, params["xi"], params["sigma_d"], params["sigma_n"]) for f in feats]
    return [
        stationary_prior(f, float(np.var(data.targets[:, d])), params["sigma_d"], params["sigma_n"])
        for d, f in enumerate(feats)
    ]


def _world(kind: str, n_waypoints: int, seed: int) -> UnicycleWorld:
    if kind == "circle":
        return UnicycleWorld()
    if kind == "random":
        return UnicycleWorld(waypoints=random_waypoints(n_waypoints, seed=seed), start=(0.0, 0.0, 0.0))
    raise CliError(f"unknown world {kind!r} (circle or random)")


_PERTURBATIONS = {"rope": rope_pull, "rocky": rocky_terrain, "poke": poke}


# ---------------------------------------------------------------- verbs


def cmd_gen_data(p):
    out = Path(p["out"])
    names = [s.strip() for s in p["perturbations"].split(",") if s.strip()]
    bad = [n for n in names if n not in _PERTURBATIONS]
    if bad:
        raise CliError(f"unknown perturbations {bad}; choose from rope, rocky, poke")
    run = collect_run(
        _world(p["world"], p["waypoints"], p["seed"]),
        [_PERTURBATIONS[n]() for n in names],
        duration=p["duration"],
        rate=p["rate"],
        seed=p["seed"],
        source=f"sim:{p['world']}",
    )
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(run.dataset, out / "data.csv")
    save_mask(run, out / "mask.csv")
    _write_manifest(out, "gen-data", p, [f"T: {run.dataset.T}"])
    return out


def cmd_train_features(p):
    _require(p, "data", hint=" (run `informed-gpssm gen-data` to create a dataset)")
    data = _load(p["data"])
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for d in range(data.state_dim):
        feats, trace = _fit_one(data, d, p["kind"], p, _autoencoder(p, seed=p["seed"] + d))
        if trace is not None:
            save_loss_trace(trace, out / f"trace_d{d + 1}.csv")
        save_features(feats, out / f"features_d{d + 1}.csv")
    (out / "timing.txt").write_text(f"train_seconds: {time.perf_counter() - t0:.3f}\n")
    _write_manifest(out, "train-features", p, [f"state_dim: {data.state_dim}", f"control_dim: {data.control_dim}"])
    return out


def _load(path) -> TrajectoryDataset:
    path = Path(path)
    if not path.exists():
        raise CliError(f"{path} not found (run `informed-gpssm gen-data` first)")
    head = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")][:1]
    cols = head[0].split(",") if head else []
    D = sum(c.strip().startswith("y") for c in cols)
    Du = sum(c.strip().startswith("u") for c in cols)
    if not D:
        raise CliError(f"{path}: cannot find state columns in the header")
    return load_dataset(path, (D, Du))


def _manifest_value(path: Path, key: str) -> str | None:
    if not path.exists():
        return None
    for line in path.read_text().splitlines():
        if line.startswith(key + ": "):
            return line.split(": ", 1)[1]
    return None


def _load_feature_dir(path, state_dim=None):
    path = Path(path)
    files = sorted(path.glob("features_d*.csv"), key=lambda f: int(f.stem.split("_d")[1]))
    if not files:
        raise CliError(f"no features in {path} (run `informed-gpssm train-features` first)")
    if state_dim is not None and len(files) != state_dim:
        raise CliError(f"{path} holds {len(files)} feature sets, expected {state_dim}")
    kind = _manifest_value(path / manifest_name("train-features"), "kind") or "informed"
    return [load_features(f) for f in files], kind


def cmd_fit_gpssm(p):
    _require(p, "data", hint=" (dataset CSV from `informed-gpssm gen-data`)")
    _require(p, "features", hint=" (directory from `informed-gpssm train-features`)")
    data = _load(p["data"])
    feats, kind = _load_feature_dir(p["features"], data.state_dim)
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    for d, (f, prior) in enumerate(zip(feats, _priors(kind, feats, data, p))):
        save_posterior(condition(prior, f, data, d), out / f"posterior_d{d + 1}.csv")
    _write_manifest(out, "fit-gpssm", p, [f"kind: {kind}"])
    return out


def cmd_elbow_study(p):
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = elbow_dataset(p["T"], seed=p["seed"])
    grid = np.linspace(-10.0, 10.0, p["grid"])
    truth = elbow_eval(grid)
    base = {**p, "mode": "direct", "precision": "double"}
    models = {
        "M5": train(data, 0, _autoencoder(base, M=5, seed=p["seed"]))[0],
        "M20": train(data, 0, _autoencoder(base, M=20, seed=p["seed"]))[0],
        "matern": matern_spectrum_baseline(data, 0, _autoencoder(base, M=20, seed=p["seed"]), p["lengthscale"], nu=1.5),
    }
    rows = []
    for name, f in models.items():
        pred = f(grid[:, None])
        _write_rows(out / f"recon_{name}.csv", ["z", "true", "reconstruction"], zip(grid, truth, pred))
        save_features(f, out / f"features_{name}.csv")
        rmse = math.sqrt(float(np.mean((pred - truth) ** 2)))
        train_rmse = math.sqrt(float(np.mean((f(data.inputs) - data.targets[:, 0]) ** 2)))
        rows.append((name, str(f.M), rmse, train_rmse))
    _write_rows(out / "summary.csv", ["model", "M", "grid_rmse", "train_rmse"], rows)
    _write_rows(out / "elbow_data.csv", ["z", "f"], zip(data.inputs[:, 0], data.targets[:, 0]))
    _write_manifest(out, "elbow-study", p)
    return out


def _monitor_config(p, seed=None) -> MonitorConfig:
    bounds = None
    if p["normalization"] == "fixed-bounds":
        try:
            lo, hi = (float(v) for v in p["bounds"].split(","))
        except ValueError as exc:
            raise CliError("fixed-bounds normalization needs --bounds min,max") from exc
        bounds = (lo, hi)
    return MonitorConfig(
        H=p["H"],
        R=p["R"],
        sigma_n=p["sigma_n"],
        threshold=p["threshold"],
        normalization=p["normalization"],
        bounds=bounds,
        rollout_noise=bool(p.get("rollout_noise", 1)),
        rollout_precision=p["rollout_precision"],
        seed=p["seed"] if seed is None else seed,
    )


OOD_ENVIRONMENTS = ("walking", "rope", "rocky", "poke")


def cmd_ood_study(p):
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = p["seed"]
    world = UnicycleWorld()
    nominal = collect_run(world, [], duration=p["train_duration"], seed=seed + 1).dataset
    save_dataset(nominal, out / "train_data.csv")
    t0 = time.perf_counter()
    if p["features"]:
        informed, _ = _load_feature_dir(p["features"], STATE_DIM)
    else:
        informed = _fit_features(nominal, "informed", p, seed)
    baseline = _fit_features(nominal, "matern", p, seed + 100)
    train_s = time.perf_counter() - t0
    models = {
        "informed": Gpssm.fit(informed, nominal, _priors("informed", informed, nominal, p), HEADING),
        "matern": Gpssm.fit(baseline, nominal, _priors("matern", baseline, nominal, p), HEADING),
    }
    perts = {"walking": [], "rope": [rope_pull()], "rocky": [rocky_terrain()], "poke": [poke()]}
    runs = {
        env: collect_run(world, perts[env], duration=p["env_duration"], seed=seed + 10 + i)
        for i, env in enumerate(OOD_ENVIRONMENTS)
    }
    for env, run in runs.items():
        save_dataset(run.dataset, out / f"env_{env}.csv")
        save_mask(run, out / f"mask_{env}.csv")
    cfg = _monitor_config(p)
    rows, timing = [], [f"train_seconds: {train_s:.3f}"]
    for name, model in models.items():
        t1 = time.perf_counter()
        raws = {env: run_monitor(model, r.states, r.controls, cfg)[1].raw for env, r in runs.items()}
        timing.append(f"monitor_seconds_{name}: {time.perf_counter() - t1:.3f}")
        if cfg.normalization == "fixed-bounds":
            norms = [normalize(raws[e], "fixed-bounds", cfg.bounds) for e in OOD_ENVIRONMENTS]
        else:
            norms = pooled_normalize([raws[e] for e in OOD_ENVIRONMENTS])
        for env, norm in zip(OOD_ENVIRONMENTS, norms):
            run, raw = runs[env], raws[env]
            flags = np.array([r.flag for r in flag_reports(range(raw.size), raw, norm, cfg.threshold)])
            complete = np.isfinite(raw)
            scored = complete if env == "walking" else complete & run.mask
            pct = 100.0 * float(flags[scored].mean()) if scored.any() else float("nan")
            rows.append((name, env, str(int(scored.sum())), pct))
            _write_rows(
                out / f"trace_{name}_{env}.csv",
                ["t", "raw_loss", "normalized_loss", "flag", "perturbed"],
                [
                    (str(t), "" if not c else _fmt(r), "" if not c else _fmt(n), str(int(f)), str(int(m)))
                    for t, (r, n, f, c, m) in enumerate(zip(raw, norm, flags, complete, run.mask))
                ],
            )
    _write_rows(out / "summary.csv", ["model", "environment", "scored_steps", "flagged_pct"], rows)
    (out / "timing.txt").write_text("\n".join(timing) + "\n")
    _write_manifest(out, "ood-study", p)
    return out


def _fractions(text: str) -> list[float]:
    try:
        fr = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"cannot read fractions {text!r}") from exc
    if not fr or any(not 0.0 < f <= 1.0 for f in fr):
        raise CliError("fractions must lie in (0, 1]")
    return fr


def cmd_data_efficiency(p):
    fractions = _fractions(p["fractions"])
    if p["seeds"] < 1:
        raise CliError("need at least one seed")
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    base = p["seed"]
    # Domain knowledge: one separate nominal recording shared by every seed.
    nominal = collect_run(
        _world("random", p["waypoints"], base + 999), [], duration=p["duration"], seed=base + 999
    ).dataset
    t0 = time.perf_counter()
    feats = {
        "informed": _fit_features(nominal, "informed", p, base),
        "matern": _fit_features(nominal, "matern", p, base + 100),
        "se": _fit_features(nominal, "se", p, base + 200),
    }
    timing = [f"train_seconds: {time.perf_counter() - t0:.3f}"]
    rows, per = [], {}
    for s in range(base, base + p["seeds"]):
        data = collect_run(_world("random", p["waypoints"], s), [], duration=p["duration"], seed=s).dataset
        slices, test = split_fractions(data, fractions, holdout=p["holdout"], seed=s)
        for frac, part in zip(fractions, slices):
            for name, f in feats.items():
                model = Gpssm.fit(f, part, _priors(name, f, part, p), HEADING)
                err = model.predict_mean(test.inputs) - test.targets
                rmse = math.sqrt(float(np.mean(err**2)))
                rows.append((name, frac, str(s), str(len(part)), rmse, math.log(rmse)))
                per.setdefault((name, frac), []).append(rmse)
    _write_rows(out / "runs.csv", ["model", "fraction", "seed", "train_size", "rmse", "log_rmse"], rows)
    agg = []
    for (name, frac), vals in per.items():
        v = np.array(vals)
        agg.append((name, frac, float(v.mean()), float(v.std()), float(np.log(v).mean()), float(np.log(v).std())))
    _write_rows(out / "summary.csv", ["model", "fraction", "rmse_mean", "rmse_std", "log_rmse_mean", "log_rmse_std"], agg)
    (out / "timing.txt").write_text("\n".join(timing) + "\n")
    _write_manifest(out, "data-efficiency", p)
    return out


def _streams(data: TrajectoryDataset):
    """Observed state stream ``(T + 1, D)`` and controls ``(T, D_u)`` of a recorded run."""
    D = data.state_dim
    last = data.targets[-1].copy()
    states = np.vstack([data.inputs[:, :D], last])
    for d in HEADING if D == STATE_DIM else ():
        states[-1, d] = float(wrap_angle(states[-1, d]))
    return states, np.array(data.inputs[:, D:])


def load_model(path, control_dim: int) -> Gpssm:
    path = Path(path)
    feats, _ = _load_feature_dir(path)
    posts = []
    for d in range(len(feats)):
        f = path / f"posterior_d{d + 1}.csv"
        if not f.exists():
            raise CliError(f"{f} not found (run `informed-gpssm fit-gpssm --out {path}` first)")
        posts.append(load_posterior(f))
    wrap = HEADING if len(feats) == STATE_DIM else ()
    return Gpssm(feats, posts, control_dim, wrap)


def cmd_monitor_stream(p):
    _require(p, "data", hint=" (recorded run from `informed-gpssm gen-data`)")
    _require(p, "model", hint=" (directory from `informed-gpssm train-features` and `fit-gpssm`)")
    data = _load(p["data"])
    model = load_model(p["model"], data.control_dim)
    cfg = _monitor_config(p)
    states, controls = _streams(data)
    if controls.shape[0] < cfg.H:
        raise CliError(f"run has {controls.shape[0]} steps, fewer than the horizon H={cfg.H}")
    reports, trace = run_monitor(model, states, controls, cfg)
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_reports(reports, out / "reports.csv")
    ticks = trace.tick_seconds[np.isfinite(trace.tick_seconds)] * 1e3
    done = [r for r in reports if r.complete]
    lines = [
        f"ticks: {ticks.size}",
        f"median_tick_ms: {np.median(ticks):.3f}",
        f"p95_tick_ms: {np.percentile(ticks, 95):.3f}",
        f"max_tick_ms: {ticks.max():.3f}",
        f"flagged_fraction: {np.mean([r.flag for r in done]):.6f}",
    ]
    (out / "timing.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    _write_manifest(out, "monitor-stream", p, [f"M: {','.join(str(f.M) for f in model.features)}"])
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-features": cmd_train_features,
    "fit-gpssm": cmd_fit_gpssm,
    "elbow-study": cmd_elbow_study,
    "ood-study": cmd_ood_study,
    "data-efficiency": cmd_data_efficiency,
    "monitor-stream": cmd_monitor_stream,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="informed-gpssm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, options in VERBS.items():
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="key = value file; flags override it")
        for name, (typ, default, help_) in options.items():
            flag = "--" + name.replace("_", "-")
            dest_help = f"{help_} (default {default})" if default not in (None, "") else help_
            sp.add_argument(flag, dest=name, default=None, metavar=typ.__name__.upper(), help=dest_help)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("verb", "config")}
    try:
        config = read_config(args.config) if args.config else {}
        params = resolve(args.verb, flags, config)
        out = COMMANDS[args.verb](params)
    except (CliError, DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"informed-gpssm {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
