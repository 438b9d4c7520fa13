"""Command-line front end.

    lgssm-bench simulate   --config data.toml --out data.csv
    lgssm-bench experiment task-difficulty-q --out results/ [--n-mc 10 --classifiers true,em]
    lgssm-bench fit-em     --data train.csv --out models/
    lgssm-bench train-lstm --data train.csv --out net.npz
    lgssm-bench classify   --data test.csv --models m1.json m2.json --out pred.csv

Exit status: 0 on success, 1 when trials were excluded (unless
--allow-partial), 2 for bad input, 130 when interrupted.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, em, io, lstm
from .classifiers import LrtClassifier, evaluate, lrt_scores
from .experiments import ExperimentConfig, default_workers, run_sweep
from .ssm import ModelError, ModelParams, generate_dataset, make_rng

log = logging.getLogger("lgssm_bench")

SWEEP_NAMES = {
    "task-difficulty-q": "q_ratio",
    "task-difficulty-r": "r_ratio",
    "seq-length": "sequence_length",
    "train-size": "train_size",
}
SIM_KEYS = {"T", "n_per_class", "seed", "model1", "model2"}
MODEL_KEYS = {"F", "H", "Q", "R", "mu0", "Sigma0"}

EXIT_PARTIAL = 1
EXIT_USAGE = 2
EXIT_INTERRUPT = 130


class UsageError(Exception):
    pass


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _model_from_table(table: dict, name: str) -> ModelParams:
    unknown = set(table) - MODEL_KEYS
    if unknown:
        raise UsageError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    defaults = {"F": 1.0, "H": 1.0, "mu0": 0.0, "Sigma0": 1e-4}
    missing = {"Q", "R"} - set(table)
    if missing:
        raise UsageError(f"[{name}] is missing required key(s): {', '.join(sorted(missing))}")
    try:
        return ModelParams(**{**defaults, **table})
    except ValueError as exc:
        raise UsageError(f"[{name}]: {exc}") from None


def _write_manifest(path: Path, command: str, **fields) -> None:
    doc = {
        "tool": "lgssm_bench",
        "version": __version__,
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(),
        **fields,
    }
    io.write_text(path, io.dumps(doc))


def cmd_simulate(args) -> int:
    cfg = load_toml(args.config)
    unknown = set(cfg) - SIM_KEYS
    if unknown:
        raise UsageError(f"{args.config}: unknown key(s): {', '.join(sorted(unknown))}")
    for key in ("T", "n_per_class", "model1", "model2"):
        if key not in cfg:
            raise UsageError(f"{args.config}: missing required key {key!r}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    p1 = _model_from_table(cfg["model1"], "model1")
    p2 = _model_from_table(cfg["model2"], "model2")
    if not isinstance(cfg["T"], int) or cfg["T"] < 1:
        raise UsageError(f"{args.config}: T must be a positive integer")
    if not isinstance(cfg["n_per_class"], int) or cfg["n_per_class"] < 1:
        raise UsageError(f"{args.config}: n_per_class must be a positive integer")
    out = Path(args.out)
    _write_manifest(out.with_suffix(".manifest.json"), "simulate",
                    seed=seed, T=cfg["T"], n_per_class=cfg["n_per_class"],
                    model1=io.params_to_dict(p1), model2=io.params_to_dict(p2))
    data = generate_dataset(p1, p2, cfg["n_per_class"], cfg["T"], make_rng(seed))
    io.write_dataset(out, data)
    print(f"wrote {len(data)} sequences (T={data.T}, counts {data.class_counts()}) to {out}")
    return 0


def _experiment_config(args) -> ExperimentConfig:
    sweep = SWEEP_NAMES[args.sweep]
    if args.manifest:
        doc = json.loads(Path(args.manifest).read_text())
        raw = dict(doc["config"])
        if raw.get("sweep") != sweep:
            raise UsageError(f"manifest is for sweep {raw.get('sweep')!r}, not {sweep!r}")
    elif args.config:
        raw = load_toml(args.config)
        if raw.setdefault("sweep", sweep) != sweep:
            raise UsageError(f"config names sweep {raw['sweep']!r} but {args.sweep!r} was requested")
    else:
        raw = {"sweep": sweep}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.n_mc is not None:
        raw["n_mc"] = args.n_mc
    if args.classifiers:
        raw["classifiers"] = [c.strip() for c in args.classifiers.split(",") if c.strip()]
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment config: {exc}") from None


def cmd_experiment(args) -> int:
    config = _experiment_config(args)
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        raise UsageError("--workers must be >= 1")
    table = run_sweep(config, args.out, workers=workers)
    print(table.format())
    if table.n_failed:
        print(f"{table.n_failed} classifier run(s) failed and were excluded; see {args.out}/manifest.json",
              file=sys.stderr)
        return 0 if args.allow_partial else EXIT_PARTIAL
    return 0


def _em_config(args) -> em.EmConfig:
    if not args.config:
        return em.EmConfig()
    raw = load_toml(args.config)
    raw = raw.get("em", raw)
    try:
        return em.EmConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    except TypeError as exc:
        raise UsageError(f"invalid [em] config: {exc}") from None


def cmd_fit_em(args) -> int:
    data = io.read_dataset(args.data)
    config = _em_config(args)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    for c in (1, 2):
        res = em.fit(data.of_class(c), config, make_rng(seed, c))
        path = io.write_params(out / f"model{c}.json", res.params, res, provenance="em-estimated",
                               seed=seed, label=c)
        print(f"class {c}: train log-likelihood {res.train_log_likelihood:.6f} "
              f"(restart {res.restart_index}) -> {path}")
    return 0


def cmd_train_lstm(args) -> int:
    data = io.read_dataset(args.data)
    raw = load_toml(args.config).get("lstm", {}) if args.config else {}
    try:
        config = lstm.TrainConfig(**raw)
    except TypeError as exc:
        raise UsageError(f"invalid [lstm] config: {exc}") from None
    if args.seed is not None:
        config.seed = args.seed
    res = lstm.train(data, config)
    io.save_network(args.out, res.params, res.normalizer, config)
    last = res.history[-1]
    print(f"trained {config.max_epochs} epochs: loss {last.mean_loss:.4f}, "
          f"training accuracy {last.train_accuracy:.4f} -> {args.out}")
    return 0


def cmd_classify(args) -> int:
    data = io.read_dataset(args.data)
    ids = data.metadata.get("seq_ids")
    ll1 = ll2 = None
    if args.models:
        p1, meta1 = io.read_params(args.models[0])
        p2, _ = io.read_params(args.models[1])
        clf = LrtClassifier(p1, p2, meta1.get("provenance", "true"))
        try:
            pred, ll1, ll2 = lrt_scores(clf, data)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        params, norm, _ = io.load_network(args.network)
        if data.m_z != params.m_z:
            raise UsageError(f"dataset m_z={data.m_z} does not match network m_z={params.m_z}")
        pred = lstm.predict_batch(params, norm, data)
    counts, acc = evaluate(pred, data.labels)
    io.write_predictions(args.out, pred, data.labels, ll1, ll2, seq_ids=ids)
    print(f"accuracy {acc:.4f} (tp={counts.tp} tn={counts.tn} fp={counts.fp} fn={counts.fn})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgssm-bench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a labelled dataset CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run a Monte Carlo sweep")
    p.add_argument("sweep", choices=sorted(SWEEP_NAMES))
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--manifest", help="re-run the configuration recorded in a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-mc", type=int)
    p.add_argument("--workers", type=int, help="parallel trials (default: $LGSSM_WORKERS or CPU count)")
    p.add_argument("--classifiers", help="comma-separated subset of true,em,lstm")
    p.add_argument("--allow-partial", action="store_true", help="exit 0 even if some runs failed")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("fit-em", help="fit one model per class with multi-restart EM")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for model1.json and model2.json")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fit_em)

    p = sub.add_parser("train-lstm", help="train the LSTM classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_lstm)

    p = sub.add_parser("classify", help="classify a dataset and write per-sequence predictions")
    p.add_argument("--data", required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--models", nargs=2, metavar=("MODEL1", "MODEL2"))
    which.add_argument("--network")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted; completed grid points were kept", file=sys.stderr)
        return EXIT_INTERRUPT
    except (UsageError, io.FormatError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
