"""Command-line entry point: train, sample, nll, validate, report.

A single JSON config describes the whole experiment (target, training,
sampling, likelihood, diagnostics, io); ``_notes`` keys are ignored
everywhere.  Every artifact embeds the config digest, seed and tool
version, and artifacts are byte-reproducible for identical inputs;
wall-clock metadata goes to a separate ``run_info.json`` sidecar.

Exit codes: 0 success / all checks passed, 1 usage or config error,
2 runtime error, 3 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from binflow import __version__
from binflow.targets import (
    FAMILIES,
    ParameterError,
    TruncationError,
    export_pmf_csv,
    make_target,
    moments,
    sample_target,
)
from binflow.poisson import OracleDenoiser, relative_density
from binflow.losses import NoiseSchedule
from binflow.network import CheckpointError, MlpDenoiser, load_model, save_model
from binflow.training import TrainConfig, TrainingError, train
from binflow.sampler import SamplerConfig, sample_chain
from binflow.likelihood import DenoiserRate, OracleRate, mean_nll
from binflow.diagnostics import DiagnosticsConfig, run_suite

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VALIDATION = 3


class ConfigError(ValueError):
    """Configuration problem; the message names the offending field path."""


def _strip_notes(obj):
    if isinstance(obj, dict):
        return {k: _strip_notes(v) for k, v in obj.items() if k != "_notes"}
    if isinstance(obj, list):
        return [_strip_notes(v) for v in obj]
    return obj


def config_digest(cfg: dict) -> str:
    canonical = json.dumps(_strip_notes(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    return _strip_notes(raw)


def _get(cfg, path, default=None, required=False, kind=None):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(f"{path}: missing required field")
            return default
        node = node[part]
    if kind is not None and not isinstance(node, kind):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {type(node).__name__}")
    return node


def build_target(cfg):
    family = _get(cfg, "target.family", required=True, kind=str)
    if family.lower().replace("-", "_") not in FAMILIES:
        raise ConfigError(f"target.family: unknown family {family!r}; choose from {FAMILIES}")
    params = _get(cfg, "target.params", default={}, kind=dict)
    cap = _get(cfg, "target.support_cap")
    try:
        return make_target(family, params, cap)
    except (ParameterError, TruncationError) as exc:
        raise ConfigError(f"target: {exc}") from None


def build_train_config(cfg, seed):
    noise_mode = _get(cfg, "train.noise.mode", default="uniform_time", kind=str)
    noise = NoiseSchedule(
        mode=noise_mode,
        mu_sigma=float(_get(cfg, "train.noise.mu_sigma", default=2.0)),
        gamma_sigma=float(_get(cfg, "train.noise.gamma_sigma", default=1.0)),
    )
    try:
        return TrainConfig(
            epochs=int(_get(cfg, "train.epochs", default=300)),
            batch_size=int(_get(cfg, "train.batch_size", default=128)),
            learning_rate=float(_get(cfg, "train.learning_rate", default=1e-3)),
            weight_decay=float(_get(cfg, "train.weight_decay", default=1e-5)),
            grad_clip_norm=float(_get(cfg, "train.grad_clip_norm", default=1.0)),
            ema_decay=float(_get(cfg, "train.ema_decay", default=0.999)),
            loss=_get(cfg, "train.loss", default="quadratic", kind=str),
            weight_fn=_get(cfg, "train.weight_fn", default="inv_sqrt", kind=str),
            noise=noise,
            final_time=float(_get(cfg, "train.T", default=1.0)),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def build_sampler_config(cfg, seed):
    try:
        return SamplerConfig(
            T=float(_get(cfg, "sampler.T", default=1.0)),
            n_steps=int(_get(cfg, "sampler.n_steps", default=1000)),
            scheme=_get(cfg, "sampler.scheme", default="tau-leap", kind=str),
            time_grid=_get(cfg, "sampler.time_grid", default="uniform-t", kind=str),
            rate_clamp_min=float(_get(cfg, "sampler.rate_clamp_min", default=0.0)),
            t_end_guard=float(_get(cfg, "sampler.t_end_guard", default=1e-6)),
            n_chains=int(_get(cfg, "sampler.n_chains", default=10_000)),
            seed=seed,
            record_trajectory=bool(_get(cfg, "sampler.record_trajectory", default=False)),
        )
    except ValueError as exc:
        raise ConfigError(f"sampler: {exc}") from None


def _run_dir(cfg, args, digest, seed):
    if args.out:
        out = Path(args.out)
    else:
        base = Path(_get(cfg, "io.output_dir", default="runs"))
        out = base / f"{digest[:12]}-seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _artifact_meta(digest, seed):
    return {"config_digest": digest, "seed": seed, "tool_version": __version__}


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_sidecar(out_dir, command, started):
    _write_json(out_dir / "run_info.json", {
        "command": command,
        "started_unix": started,
        "finished_unix": time.time(),
    })


def _seed_of(cfg, args):
    if args.seed is not None:
        return int(args.seed)
    return int(_get(cfg, "seed", default=0))


def _denoiser_from_args(cfg, args, pmf, T):
    """Either the exact table denoiser (--oracle) or a loaded checkpoint."""
    if args.oracle:
        return OracleDenoiser(relative_density(pmf, T)), "oracle"
    if not args.checkpoint:
        raise ConfigError("either --oracle or --checkpoint is required")
    model = load_model(args.checkpoint, expected_input_dim=1)
    return model, "model"


# -- commands ---------------------------------------------------------------


def cmd_train(cfg, args):
    started = time.time()
    seed = _seed_of(cfg, args)
    digest = config_digest(cfg)
    out = _run_dir(cfg, args, digest, seed)
    pmf = build_target(cfg)
    tcfg = build_train_config(cfg, seed)
    n_train = int(_get(cfg, "train.n_samples", default=50_000))
    data = sample_target(pmf, n_train, np.random.default_rng(seed))
    mean, var = moments(pmf)
    precond = bool(_get(cfg, "train.preconditioning", default=False))
    model = MlpDenoiser(
        input_dim=1,
        width=int(_get(cfg, "train.width", default=256)),
        depth=int(_get(cfg, "train.depth", default=3)),
        time_dim=int(_get(cfg, "train.time_dim", default=128)),
        standardize=None if precond else (mean, np.sqrt(var)),
        precond={"mu_data": mean, "sigma2_data": var} if precond else None,
        seed=seed,
    )
    try:
        result = train(model, data, tcfg)
    except TrainingError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    save_model(result.model, out / "checkpoint.bnfw", config_digest=digest)
    with open(out / "loss_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "floor_events"])
        for epoch, loss, floors in result.history_rows():
            writer.writerow([epoch, repr(loss), floors])
    export_pmf_csv(pmf, out / "target_pmf.csv")
    _write_json(out / "train_summary.json", {
        **_artifact_meta(digest, seed),
        "target": pmf.family,
        "epochs": tcfg.epochs,
        "n_train": n_train,
        "final_loss": result.history[-1][0] if result.history else None,
    })
    _write_sidecar(out, "train", started)
    print(f"checkpoint written to {out / 'checkpoint.bnfw'}")
    return EXIT_OK


def cmd_sample(cfg, args):
    started = time.time()
    seed = _seed_of(cfg, args)
    digest = config_digest(cfg)
    out = _run_dir(cfg, args, digest, seed)
    pmf = build_target(cfg)
    scfg = build_sampler_config(cfg, seed)
    denoiser, kind = _denoiser_from_args(cfg, args, pmf, scfg.T)
    result = sample_chain(denoiser, scfg)
    with open(out / "samples.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain_id", "x_final"])
        for i, row in enumerate(result.final[:, 0]):
            writer.writerow([i, int(row)])
    if result.trajectory is not None:
        with open(out / "trajectory.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain_id", "step", "t", "x"])
            for k, t in enumerate(result.times):
                for i in range(scfg.n_chains):
                    writer.writerow([i, k, repr(float(t)), int(result.trajectory[k, i, 0])])
    finals = result.final[:, 0]
    hist = np.bincount(finals, minlength=pmf.support_cap + 1) if finals.size else np.zeros(
        pmf.support_cap + 1, dtype=int)
    _write_json(out / "sample_summary.json", {
        **_artifact_meta(digest, seed),
        "target": pmf.family,
        "denoiser": kind,
        "scheme": result.scheme,
        "n_chains": scfg.n_chains,
        "n_steps": scfg.n_steps,
        "mean": float(finals.mean()) if finals.size else None,
        "variance": float(finals.var()) if finals.size else None,
        "clamp_events": result.clamp_events,
        "histogram": hist.tolist(),
    })
    _write_sidecar(out, "sample", started)
    print(f"{scfg.n_chains} samples written to {out / 'samples.csv'}")
    return EXIT_OK


def _load_eval_set(path):
    values = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or (lineno == 1 and not row[0].lstrip("-").isdigit()):
                continue  # header or blank
            try:
                values.append(int(row[0]))
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: not an integer count: {row[0]!r}") from None
    if not values:
        raise ConfigError(f"{path}: empty evaluation set")
    return np.asarray(values, dtype=np.int64)


def cmd_nll(cfg, args):
    started = time.time()
    seed = _seed_of(cfg, args)
    digest = config_digest(cfg)
    out = _run_dir(cfg, args, digest, seed)
    pmf = build_target(cfg)
    T = float(_get(cfg, "likelihood.T", default=1.0))
    mode = _get(cfg, "likelihood.mode", default=None)
    n_nodes = int(_get(cfg, "likelihood.n_nodes", default=128))
    n_draws = int(_get(cfg, "likelihood.n_draws", default=1000))
    n_eval = int(_get(cfg, "likelihood.n_eval", default=10_000))
    denoiser, kind = _denoiser_from_args(cfg, args, pmf, T)
    if mode is None:
        mode = "quadrature" if kind == "oracle" else "monte_carlo"
    if mode not in ("quadrature", "monte_carlo"):
        raise ConfigError(f"likelihood.mode: unknown mode {mode!r}")
    if mode == "quadrature" and kind != "oracle":
        raise ConfigError("likelihood.mode: quadrature needs the oracle rate (--oracle)")
    if args.eval_set:
        eval_set = _load_eval_set(args.eval_set)
    else:
        eval_set = sample_target(pmf, n_eval, np.random.default_rng(seed + 1))
    tables = relative_density(pmf, T)
    if mode == "quadrature":
        mean, se, values = mean_nll(eval_set, tables=tables, mode="quadrature", n_nodes=n_nodes)
        errors = np.zeros(eval_set.size)
    else:
        from binflow.likelihood import nll_monte_carlo

        rate = OracleRate(tables) if kind == "oracle" else DenoiserRate(denoiser, T)
        rng = np.random.default_rng(seed + 2)
        values = np.empty(eval_set.size)
        errors = np.empty(eval_set.size)
        for i, x in enumerate(eval_set):
            est = nll_monte_carlo(rate, int(x), n_time=n_draws, rng=rng, T=T)
            values[i] = est.value
            errors[i] = est.std_error
        mean = float(values.mean())
        se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    with open(out / "nll.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "nll", "std_error", "mode"])
        for x, v, e in zip(eval_set, values, errors):
            writer.writerow([int(x), repr(float(v)), repr(float(e)), mode])
    _write_json(out / "nll_summary.json", {
        **_artifact_meta(digest, seed),
        "target": pmf.family,
        "denoiser": kind,
        "mode": mode,
        "n_eval": int(eval_set.size),
        "mean_nll": mean,
        "std_error": se,
    })
    _write_sidecar(out, "nll", started)
    print(f"mean NLL {mean:.4f} +/- {se:.4f} ({mode}, {kind}) -> {out / 'nll_summary.json'}")
    return EXIT_OK


def cmd_validate(cfg, args):
    started = time.time()
    seed = _seed_of(cfg, args)
    digest = config_digest(cfg)
    out = _run_dir(cfg, args, digest, seed)
    pmf = build_target(cfg)
    dblock = _get(cfg, "diagnostics", default={}, kind=dict)
    try:
        dcfg = DiagnosticsConfig(
            T=float(dblock.get("T", 1.0)),
            checks=tuple(dblock.get("checks", DiagnosticsConfig.checks)),
            tweedie_threshold=float(dblock.get("tweedie_threshold", 1e-8)),
            tweedie_mass_floor=float(dblock.get("tweedie_mass_floor", 1e-12)),
            marginal_threshold=float(dblock.get("marginal_threshold", 1e-10)),
            kl_threshold=float(dblock.get("kl_threshold", 1e-3)),
            reversal_threshold=float(dblock.get("reversal_threshold", 1e-9)),
            reversal_mass_floor=float(dblock.get("reversal_mass_floor", 1e-12)),
            kolmogorov_order=float(dblock.get("kolmogorov_order", 1.9)),
            sample_metrics=bool(dblock.get("sample_metrics", True)),
            n_chains=int(dblock.get("n_chains", 10_000)),
            n_steps=int(dblock.get("n_steps", 1000)),
            scheme=dblock.get("scheme", "tau-leap"),
            nll_metrics=bool(dblock.get("nll_metrics", True)),
            n_nll_eval=int(dblock.get("n_nll_eval", 10_000)),
            nll_draws=int(dblock.get("nll_draws", 1000)),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"diagnostics: {exc}") from None
    denoiser = None
    if not args.oracle:
        denoiser, _ = _denoiser_from_args(cfg, args, pmf, dcfg.T)
    report = run_suite(pmf, denoiser, dcfg, config_digest=digest)
    payload = report.to_dict()
    payload.update(_artifact_meta(digest, seed))
    _write_json(out / "report.json", payload)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "metric", "value"])
        for key, value in sorted(report.metrics.items()):
            writer.writerow([pmf.family, key, repr(value)])
    _write_sidecar(out, "validate", started)
    for check in report.checks:
        status = "pass" if check.passed else "FAIL"
        print(f"[{status}] {check.name}: residual {check.max_residual:.3e} "
              f"(threshold {check.threshold:.3e})")
    for key, value in report.metrics.items():
        print(f"metric {key}: {value}")
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_report(args):
    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        print(f"error: {run_dir} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    nll_rows = []
    w1_rows = []
    missing = []
    for sub in sorted(run_dir.glob("**/nll_summary.json")):
        with open(sub) as fh:
            payload = json.load(fh)
        nll_rows.append((payload["target"], payload["mean_nll"], payload.get("seed")))
    for sub in sorted(run_dir.glob("**/report.json")):
        with open(sub) as fh:
            payload = json.load(fh)
        w1 = payload.get("metrics", {}).get("w1")
        if w1 is not None:
            w1_rows.append((payload["target"], w1, payload.get("seed")))
    for sub in sorted(p.parent for p in run_dir.glob("**/run_info.json")):
        if not (sub / "nll_summary.json").exists() and not (sub / "report.json").exists() \
                and not (sub / "checkpoint.bnfw").exists() \
                and not (sub / "sample_summary.json").exists():
            missing.append(str(sub))

    def _aggregate(rows):
        table = {}
        for target, value, _seed in rows:
            table.setdefault(target, []).append(value)
        out = {}
        for target, values in sorted(table.items()):
            arr = np.asarray(values, dtype=float)
            se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
            out[target] = (float(arr.mean()), se, arr.size)
        return out

    nll_table = _aggregate(nll_rows)
    w1_table = _aggregate(w1_rows)
    lines = ["# Run report", ""]
    if nll_table:
        lines += ["## NLL (mean +/- standard error over runs)", "",
                  "| target | nll | runs |", "|---|---|---|"]
        lines += [f"| {t} | {m:.4f} +/- {s:.4f} | {n} |" for t, (m, s, n) in nll_table.items()]
        lines.append("")
    if w1_table:
        lines += ["## W1 (mean +/- standard error over runs)", "",
                  "| target | w1 | runs |", "|---|---|---|"]
        lines += [f"| {t} | {m:.4f} +/- {s:.4f} | {n} |" for t, (m, s, n) in w1_table.items()]
        lines.append("")
    if not nll_table and not w1_table:
        lines += ["No runs found.", ""]
    if missing:
        lines += ["## Directories without recognizable artifacts", ""]
        lines += [f"- {m}" for m in missing]
        lines.append("")
    (run_dir / "report.md").write_text("\n".join(lines))
    for name, table in (("nll_table.csv", nll_table), ("w1_table.csv", w1_table)):
        with open(run_dir / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target", "mean", "std_error", "runs"])
            for target, (m, s, n) in table.items():
                writer.writerow([target, repr(m), repr(s), n])
    print(f"report written to {run_dir / 'report.md'}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="binflow",
        description="Train, sample, score and validate binomial-thinning count flows.",
    )
    parser.add_argument("--version", action="version", version=f"binflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_model in (
        ("train", False), ("sample", True), ("nll", True), ("validate", True),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory override")
        if needs_model:
            p.add_argument("--checkpoint", default=None, help="BNFW checkpoint path")
            p.add_argument("--oracle", action="store_true",
                           help="use the exact table denoiser instead of a checkpoint")
        if name == "nll":
            p.add_argument("--eval-set", default=None,
                           help="CSV of evaluation counts (default: sample from the target)")
    rep = sub.add_parser("report")
    rep.add_argument("run_dir", help="directory containing prior command outputs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the documented contract is 1
        code = exc.code if isinstance(exc.code, int) else 1
        return EXIT_OK if code == 0 else EXIT_CONFIG
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "sample":
            return cmd_sample(cfg, args)
        if args.command == "nll":
            return cmd_nll(cfg, args)
        if args.command == "validate":
            return cmd_validate(cfg, args)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, ParameterError, TruncationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures keep a distinct exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
