"""Command-line front end.

Subcommands: synth, train, predict, evaluate, inspect, worker.

Environment:
    DFAB_DATA_DIR     default directory for relative data/output paths
    DFAB_WORKER_PORT  coordinator port for socket transport and ``worker``

Exit codes: 0 success, 2 usage error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, Standardization, SyntheticSpec, apply_standardization, fit_standardization
from .data import load_csv, split_train_test, synth_generate, write_csv
from .model import ModelParams, ModelParseError, TaskKind, deserialize_model, path_log_probs, predict_batch, serialize_model
from .runtime import ClusterConfig, ConfigError, RestoreError, TrainConfig, TrainingAborted, run_training
from .runtime.transport import WorkerFailure, run_socket_worker

log = logging.getLogger("dfab")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3


class UsageError(Exception):
    pass


def data_path(p) -> Path:
    """Relative paths resolve against DFAB_DATA_DIR when it is set."""
    p = Path(p)
    base = os.environ.get("DFAB_DATA_DIR")
    return p if p.is_absolute() or not base else Path(base) / p


def git_blob_hash(path) -> str:
    body = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _env_port(default: int = 0) -> int:
    raw = os.environ.get("DFAB_WORKER_PORT")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DFAB_WORKER_PORT={raw!r} is not a port number") from None


# -- synth --------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec(
            depth=args.depth,
            n_experts=args.experts,
            n_features=args.d,
            n_samples=args.n,
            nonzero_range=(args.nonzero_min, args.nonzero_max),
            noise=args.noise,
            noise_is_std=args.noise_std,
            seed=args.seed,
        )
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    data, truth = synth_generate(spec)
    out = data_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, out, target=args.target)
    truth.meta["feature_names"] = list(data.feature_names)
    truth_path = out.with_name(out.stem + "_truth.json")
    truth_path.write_text(serialize_model(truth))
    print(f"wrote {out} ({data.n} rows) and {truth_path}")
    return EXIT_OK


# -- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    src = data_path(args.data)
    task = TaskKind(args.task)
    data = _load(src, args.target, task)
    out = data_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    written = []
    if args.holdout:
        if not 0 < args.holdout < 1:
            raise UsageError("--holdout must lie in (0, 1)")
        train, test = split_train_test(data, 1.0 - args.holdout, seed=args.seed, standardize_features=False)
        test_path = out / "holdout.csv"
        write_csv(test, test_path, target=args.target)
        written.append(test_path)
    else:
        train = data
    st = fit_standardization(train)
    train = apply_standardization(train, st)

    try:
        cfg = TrainConfig(
            depth=args.depth,
            t_max=args.tmax,
            eps_shrink=args.eps_shrink,
            delta_term=args.delta_term,
            max_iters=args.max_iters,
            task=task,
            seed=args.seed,
            foba_max_features=args.max_features,
        )
        cluster = ClusterConfig(
            n_workers=args.workers,
            transport=args.transport,
            seed=args.seed,
            checkpoint_every=args.checkpoint_every,
            checkpoint_dir=str(data_path(args.checkpoint_dir)) if args.checkpoint_dir else None,
            port=_env_port(0) if args.transport == "socket" else 0,
            spawn=args.spawn,
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if cluster.checkpoint_every and cluster.checkpoint_dir is None:
        cluster = ClusterConfig(**{**asdict(cluster), "checkpoint_dir": str(out / "checkpoints")})

    resume = data_path(args.resume) if args.resume else None
    model, report = run_training(train, cfg, cluster, resume_from=resume)
    model.meta["standardization"] = st.to_dict()
    model.meta["feature_names"] = list(data.feature_names)

    model_path = out / "model.json"
    report_path = out / "report.csv"
    model_path.write_text(serialize_model(model))
    report_path.write_text(report.to_csv())
    written += [model_path, report_path]
    manifest = {
        "command": "train",
        "train_config": cfg.to_dict(),
        "cluster_config": asdict(cluster),
        "inputs": {str(src): git_blob_hash(src)},
        "resume_from": str(resume) if resume else None,
        "holdout": args.holdout,
        "outputs": [str(p) for p in written],
        "converged": report.converged,
        "iterations": len(report.records),
    }
    manifest["content_hash"] = hashlib.sha1(
        json.dumps({k: manifest[k] for k in ("train_config", "cluster_config", "inputs", "holdout")}, sort_keys=True).encode()
    ).hexdigest()
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    final = report.records[-1] if report.records else None
    if final is not None:
        print(
            f"{len(report.records)} iterations, converged={report.converged}, "
            f"FIC={final.fic:.6g}, active experts={final.n_active}"
        )
    else:
        print("max-iters 0: wrote the initialised model")
    print(f"wrote {model_path}, {report_path}, {manifest_path}")
    return EXIT_OK


# -- predict / evaluate -------------------------------------------------------


def _load(path, target, task) -> Dataset:
    try:
        return load_csv(path, target, task)
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read {path}") from exc
    except DataError as exc:
        raise UsageError(str(exc)) from exc


def _load_model(path) -> ModelParams:
    path = data_path(path)
    try:
        return deserialize_model(path.read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read {path}") from exc
    except ModelParseError as exc:
        raise UsageError(f"{path}: {exc.location}: {exc}") from exc


def read_features(path, target: str | None, n_features: int) -> np.ndarray:
    """Feature matrix from a CSV, dropping the target column if present.

    The target values are never parsed, so predictions cannot see labels.
    """
    path = data_path(path)
    try:
        fh = path.open(newline="")
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read {path}") from exc
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        keep = [c for c, h in enumerate(header) if h != target]
        if len(keep) != n_features:
            raise UsageError(f"{path}: {len(keep)} feature columns but the model expects {n_features}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise UsageError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[c]) for c in keep])
            except ValueError:
                raise UsageError(f"{path}:{lineno}: non-numeric feature value") from None
    if not rows:
        raise UsageError(f"{path}: no rows")
    X = np.array(rows)
    if not np.isfinite(X).all():
        raise UsageError(f"{path}: non-finite feature values")
    return X


def model_outputs(model: ModelParams, X_raw: np.ndarray):
    """(prediction in original units, routed expert) for raw feature rows."""
    st = model.meta.get("standardization")
    st = Standardization.from_dict(st) if st else None
    X = st.transform_X(X_raw) if st else X_raw
    out = predict_batch(X, model)
    if model.task is TaskKind.REGRESSION and st is not None:
        out = st.inverse_y(out)
    experts = np.argmax(path_log_probs(X, model), axis=1)
    return out, experts


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    X = read_features(args.data, args.target, model.n_features)
    pred, _ = model_outputs(model, X)
    out = data_path(args.out)
    with out.open("w") as fh:
        fh.write("prediction\n" if model.task is TaskKind.REGRESSION else "probability,label\n")
        for p in pred:
            if model.task is TaskKind.REGRESSION:
                fh.write(f"{float(p)!r}\n")
            else:
                fh.write(f"{float(p)!r},{1 if p >= 0.5 else -1}\n")
    print(f"wrote {len(pred)} predictions to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    data = _load(data_path(args.data), args.target, model.task)
    if data.d != model.n_features:
        raise UsageError(f"dataset has {data.d} features but the model expects {model.n_features}")
    pred, experts = model_outputs(model, data.X)
    if model.task is TaskKind.REGRESSION:
        metric = {"rmse": float(np.sqrt(np.mean((pred - data.y) ** 2)))}
    else:
        labels = np.where(pred >= 0.5, 1.0, -1.0)
        metric = {"zero_one_error": float(np.mean(labels != data.y))}
    counts = np.bincount(experts, minlength=model.n_experts)
    result = {**metric, "n": data.n, "assignments": {str(j): int(counts[j]) for j in np.flatnonzero(model.active)}}
    if args.json:
        print(json.dumps(result, sort_keys=True))
    else:
        for k, v in metric.items():
            print(f"{k}: {v:.6g}")
        for j, c in result["assignments"].items():
            print(f"expert {j}: {c} rows")
    return EXIT_OK


# -- inspect ------------------------------------------------------------------


def render_model(model: ModelParams, names=None) -> str:
    names = names or model.meta.get("feature_names") or [f"x{d}" for d in range(model.n_features)]
    topo = model.topology
    G = model.n_gates
    lines = []

    def has_active(node):
        if node >= G:
            return bool(model.active[node - G])
        return bool(model.active[topo.side[node] != 0].any())

    def formula(j):
        w = model.weights[j]
        terms = [f"{w[d]:+.4g}*{names[d]}" for d in np.flatnonzero(w)]
        rhs = " ".join([f"{model.intercept[j]:.4g}"] + terms)
        return f"expert {j} (cardinality {int(np.count_nonzero(w))}): y = {rhs}"

    def walk(node, indent):
        pad = "  " * indent
        if node >= G:
            lines.append(pad + formula(node - G))
            return
        if topo.passthrough[node]:
            child = 2 * node + 1 if has_active(2 * node + 1) else 2 * node + 2
            lines.append(pad + f"gate {node}: collapsed")
            walk(child, indent + 1)
            return
        name = names[model.gamma[node]]
        t = model.threshold[node]
        lines.append(pad + f"if {name} < {t:.6g}:  (gate {node}, g={model.g[node]:.3f})")
        walk(2 * node + 1, indent + 1)
        lines.append(pad + "else:")
        walk(2 * node + 2, indent + 1)

    walk(0, 0)
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    model = _load_model(args.model)
    print(f"task: {model.task.value}, depth {model.depth}, {int(model.active.sum())} active experts, D={model.n_features}")
    if model.meta.get("standardization"):
        print("(thresholds and weights are in standardised units)")
    print(render_model(model))
    return EXIT_OK


# -- worker -------------------------------------------------------------------


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        host, port = addr, ""
    if not port:
        port = _env_port(-1)
        if port < 0:
            raise UsageError("worker address needs a port (host:port or DFAB_WORKER_PORT)")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise UsageError(f"bad port in {addr!r}") from None


def cmd_worker(args) -> int:
    from .runtime.coordinator import csv_loader

    host, port = parse_address(args.address)
    loader = csv_loader(str(data_path(args.data)), args.target) if args.data else None
    run_socket_worker(host, port, loader, args.checkpoint_dir)
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfab", description="Distributed FAB training of piecewise sparse linear models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset and its ground-truth model")
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--d", type=int, default=100)
    s.add_argument("--experts", type=int, default=5)
    s.add_argument("--depth", type=int, default=3)
    s.add_argument("--noise", type=float, default=0.1, help="noise variance")
    s.add_argument("--noise-std", action="store_true", help="read --noise as a standard deviation")
    s.add_argument("--nonzero-min", type=int, default=10)
    s.add_argument("--nonzero-max", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--target", default="y")
    s.add_argument("--out", default="synth.csv")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--target", default="y")
    t.add_argument("--task", choices=[k.value for k in TaskKind], default="regression")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--tmax", type=int, default=32)
    t.add_argument("--eps-shrink", type=float, default=None, help="absolute shrinkage threshold (default 0.01 N)")
    t.add_argument("--delta-term", type=float, default=5e-9)
    t.add_argument("--max-iters", type=int, default=200)
    t.add_argument("--max-features", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--transport", choices=["inprocess", "socket"], default="inprocess")
    t.add_argument("--spawn", choices=["thread", "process", "none"], default="process")
    t.add_argument("--checkpoint-every", type=int, default=20)
    t.add_argument("--checkpoint-dir", default=None)
    t.add_argument("--resume", default=None, help="checkpoint snapshot to resume from")
    t.add_argument("--holdout", type=float, default=0.0, help="fraction held out and written to holdout.csv")
    t.add_argument("--out-dir", default="run")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict for every row of a CSV")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--target", default="y", help="column to ignore if present")
    pr.add_argument("--out", default="predictions.csv")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="RMSE or 0-1 error plus per-expert assignment counts")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--target", default="y")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect", help="print the gate rules and expert formulas")
    i.add_argument("--model", required=True)
    i.set_defaults(func=cmd_inspect)

    w = sub.add_parser("worker", help="serve as a socket worker")
    w.add_argument("address", help="coordinator host:port")
    w.add_argument("--data", default=None, help="load this worker's rows from a shared CSV")
    w.add_argument("--target", default="y")
    w.add_argument("--checkpoint-dir", default=None)
    w.set_defaults(func=cmd_worker)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dfab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, WorkerFailure, RestoreError) as exc:
        print(f"dfab {args.command}: {exc}", file=sys.stderr)
        ckpt = getattr(exc, "checkpoint", None)
        if ckpt:
            print(f"last checkpoint: {ckpt}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
