"""Command-line entry point: ``lstmlab <command> [options]``.

Commands: gradcheck, gen-data, train, search, analyze, fanova.

Every command resolves its settings as defaults < ``--config`` JSON file <
explicit flags, and echoes the resolved settings into each artifact it writes.
Exit status is 0 on success, 1 on runtime or numeric failure and 2 on usage
errors.

Weights are saved as JSON::

    {"schema_version": 1, "kind": "lstmlab-weights", "config": {...},
     "blocks": {"fw.W_z": {"shape": [N, M], "values": [...row-major...]}, ...}}
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import data, fanova, gradcheck, lstm, network, search, stats, training
from .numerics import ConfigurationError, make_rng

log = logging.getLogger("lstmlab")

SCHEMA_VERSION = 1
VARIANTS = tuple(lstm.PRESETS)
GENERATORS = ("reber", "continual-reber", "pianoroll", "frames")


class UsageError(Exception):
    pass


# ------------------------------------------------------------- defaults

DEFAULTS = {
    "gradcheck": {
        "variant": "all", "task": "nextstep_prediction", "n_blocks": 4, "n_inputs": 3,
        "n_outputs": 2, "seq_len": 5, "seed": 0, "tolerance": 1e-5, "eps": 1e-6,
        "weight_std": 0.5, "out": None,
    },
    "gen-data": {
        "generator": "continual-reber", "n_sequences": 60, "seed": 0, "episodes": 8,
        "n_pitches": 24, "out": None,
    },
    "train": {
        "data": None, "generator": None, "n_sequences": 60, "data_seed": 0, "episodes": 8,
        "variant": "V", "n_blocks": 20, "learning_rate": 1e-3, "momentum": 0.9,
        "input_noise_std": 0.0, "clip_gradients": False, "nesterov": True, "max_epochs": 150,
        "patience": 15, "seed": 0, "standardize": False, "out": None, "save_weights": None,
    },
    "search": {
        "data": None, "generator": None, "n_sequences": 60, "data_seed": 0, "episodes": 8,
        "variant": "V", "n_trials": 200, "parallelism": 1, "log": None, "seed": 0,
        "max_epochs": 150, "patience": 15, "timit_booleans": False, "standardize": False,
        "n_blocks_range": [20, 200], "learning_rate_range": [1e-6, 1e-2],
        "momentum_complement_range": [0.01, 1.0], "input_noise_range": [0.0, 1.0],
    },
    "analyze": {
        "logs": [], "baseline": "V", "top_fraction": 0.10, "n_tests": None, "alpha": 0.05,
        "dataset": None, "n_inputs": None, "n_outputs": None, "task": None,
        "out_json": None, "out_csv": None,
    },
    "fanova": {
        "log": None, "variant": None, "dataset": None, "n_trees": 100, "min_leaf": 3,
        "bootstrap": True, "max_features": None, "seed": 0, "top_fraction": None,
        "drop_diverged": False, "grid_points": 50, "out_dir": None,
        "n_blocks_range": [20, 200], "learning_rate_range": [1e-6, 1e-2],
        "momentum_complement_range": [0.01, 1.0], "input_noise_range": [0.0, 1.0],
    },
}


# -------------------------------------------------------------- parsing

def _add_common(p):
    p.add_argument("--config", help="JSON file of settings (overridden by flags)")
    p.add_argument("-v", "--verbose", action="count")


def _add_data_source(p):
    p.add_argument("--data", help="dataset file (piano-roll or sequence container)")
    p.add_argument("--generator", choices=GENERATORS, help="generate a dataset instead")
    p.add_argument("--n-sequences", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--standardize", action="store_true")


def _add_space(p):
    p.add_argument("--n-blocks-range", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--learning-rate-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--momentum-complement-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--input-noise-range", type=float, nargs=2, metavar=("LO", "HI"))


def build_parser():
    parser = argparse.ArgumentParser(prog="lstmlab", argument_default=argparse.SUPPRESS,
                                     description="LSTM variant experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", argument_default=argparse.SUPPRESS,
                       help="finite-difference gradient check")
    _add_common(p)
    p.add_argument("--variant", choices=VARIANTS + ("all",))
    p.add_argument("--task", choices=network.TASKS + ("all",))
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--n-inputs", type=int)
    p.add_argument("--n-outputs", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--weight-std", type=float)
    p.add_argument("--out", help="write the reports as JSON")

    p = sub.add_parser("gen-data", argument_default=argparse.SUPPRESS, help="generate a dataset")
    _add_common(p)
    p.add_argument("--generator", choices=GENERATORS)
    p.add_argument("--n-sequences", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--n-pitches", type=int)
    p.add_argument("--out")

    p = sub.add_parser("train", argument_default=argparse.SUPPRESS, help="train one network")
    _add_common(p)
    _add_data_source(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--input-noise-std", type=float)
    p.add_argument("--clip-gradients", action="store_true")
    p.add_argument("--classic-momentum", dest="nesterov", action="store_false")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the result record as JSON")
    p.add_argument("--save-weights")

    p = sub.add_parser("search", argument_default=argparse.SUPPRESS, help="random search")
    _add_common(p)
    _add_data_source(p)
    _add_space(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--n-trials", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--log")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--timit-booleans", action="store_true")

    p = sub.add_parser("analyze", argument_default=argparse.SUPPRESS,
                       help="compare variants against a baseline")
    _add_common(p)
    p.add_argument("logs", nargs="*")
    p.add_argument("--baseline", choices=VARIANTS)
    p.add_argument("--top-fraction", type=float)
    p.add_argument("--n-tests", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--dataset", help="only records of this dataset name")
    p.add_argument("--n-inputs", type=int, help="input width, for parameter counts")
    p.add_argument("--n-outputs", type=int)
    p.add_argument("--task", choices=network.TASKS)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")

    p = sub.add_parser("fanova", argument_default=argparse.SUPPRESS,
                       help="hyperparameter importance from a trial log")
    _add_common(p)
    _add_space(p)
    p.add_argument("log")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--dataset")
    p.add_argument("--n-trees", type=int)
    p.add_argument("--min-leaf", type=int)
    p.add_argument("--no-bootstrap", dest="bootstrap", action="store_false")
    p.add_argument("--max-features", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--top-fraction", type=float)
    p.add_argument("--drop-diverged", action="store_true")
    p.add_argument("--grid-points", type=int)
    p.add_argument("--out-dir")
    return parser


def resolve_config(command, args):
    """Defaults, then the ``--config`` file, then explicitly given flags."""
    cfg = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
        # accept either a bare settings dict or an artifact with a "config" entry
        doc = doc.get("config", doc) if isinstance(doc, dict) else doc
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: expected a JSON object")
        unknown = set(doc) - set(cfg)
        if unknown:
            raise UsageError(f"{path}: unknown settings {sorted(unknown)}")
        cfg.update(doc)
    cfg.update(flags)
    return cfg


# -------------------------------------------------------------- helpers

def _write_json(path, doc):
    if path is None:
        print(json.dumps(doc, indent=2))
        return
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _artifact(command, cfg, **body):
    return {"schema_version": SCHEMA_VERSION, "command": command, "config": cfg, **body}


def _space(cfg):
    return search.SearchSpace(
        n_blocks=tuple(cfg["n_blocks_range"]), learning_rate=tuple(cfg["learning_rate_range"]),
        momentum_complement=tuple(cfg["momentum_complement_range"]),
        input_noise_std=tuple(cfg["input_noise_range"]))


def generate_dataset(generator, n_sequences, seed, episodes=8, n_pitches=24):
    rng = make_rng(seed)
    if generator == "reber":
        return data.generate_embedded_reber(rng, n_sequences, continual=False)
    if generator == "continual-reber":
        return data.generate_embedded_reber(rng, n_sequences, continual=True, episodes=episodes)
    if generator == "pianoroll":
        return data.generate_pianoroll(rng, n_sequences, n_pitches=n_pitches)
    if generator == "frames":
        return data.generate_frame_classification(rng, n_sequences)
    raise UsageError(f"unknown generator {generator!r}")


def _dataset(cfg):
    if bool(cfg["data"]) == bool(cfg["generator"]):
        raise UsageError("give exactly one of --data or --generator")
    if cfg["data"]:
        if not os.path.exists(cfg["data"]):
            raise FileNotFoundError(f"dataset file not found: {cfg['data']}")
        ds = data.load_dataset(cfg["data"])
    else:
        ds = generate_dataset(cfg["generator"], cfg["n_sequences"], cfg["data_seed"],
                              cfg["episodes"])
    if cfg["standardize"]:
        ds, _ = data.standardize(ds)
    return ds


def weights_to_doc(weights, config):
    blocks = {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
              for k, v in weights.params().items()}
    return {"schema_version": SCHEMA_VERSION, "kind": "lstmlab-weights",
            "config": {"task": config.task, "hidden_size": config.hidden_size,
                       "n_inputs": config.n_inputs, "n_outputs": config.n_outputs,
                       "variant": _variant_name(config.variant)},
            "blocks": blocks}


def weights_from_doc(doc):
    """Inverse of :func:`weights_to_doc`; returns ``(weights, config)``."""
    if doc.get("kind") != "lstmlab-weights" or doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("not a weights document of a supported version")
    c = doc["config"]
    config = network.NetworkConfig(c["task"], c["hidden_size"], c["n_inputs"], c["n_outputs"],
                                   c["variant"])
    weights = network.init_network(config, make_rng(0))
    params = weights.params()
    if set(params) != set(doc["blocks"]):
        raise ValueError("weight blocks do not match the network configuration")
    for k, arr in params.items():
        blk = doc["blocks"][k]
        if list(arr.shape) != blk["shape"]:
            raise ValueError(f"{k}: shape {blk['shape']} != expected {list(arr.shape)}")
        arr[...] = np.asarray(blk["values"], dtype=np.float64).reshape(arr.shape)
    return weights, config


def _variant_name(spec):
    for name, preset in lstm.PRESETS.items():
        if preset == spec:
            return name
    raise ValueError("variant is not a named preset")


# ------------------------------------------------------------- commands

def cmd_gradcheck(cfg):
    variants = VARIANTS if cfg["variant"] == "all" else (cfg["variant"],)
    tasks = ("nextstep_prediction", "framewise_classification") if cfg["task"] == "all" \
        else (cfg["task"],)
    reports = []
    for task in tasks:
        for v in variants:
            rep = gradcheck.check_variant(
                v, n_blocks=cfg["n_blocks"], n_inputs=cfg["n_inputs"], seq_len=cfg["seq_len"],
                n_outputs=cfg["n_outputs"], task=task, seed=cfg["seed"],
                tolerance=cfg["tolerance"], eps=cfg["eps"], weight_std=cfg["weight_std"])
            reports.append(rep)
            status = "PASS" if rep.passed else "FAIL"
            worst = max(rep.block_errors, key=rep.block_errors.get)
            print(f"{status} {v:5s} {task:25s} max rel err {rep.global_max:.3e} ({worst})")
    ok = all(r.passed for r in reports)
    if cfg["out"]:
        _write_json(cfg["out"], _artifact("gradcheck", cfg, passed=ok,
                                          reports=[r.to_dict() for r in reports]))
    return 0 if ok else 1


def cmd_gen_data(cfg):
    if not cfg["out"]:
        raise UsageError("--out is required")
    ds = generate_dataset(cfg["generator"], cfg["n_sequences"], cfg["seed"], cfg["episodes"],
                          cfg["n_pitches"])
    data.save_dataset(ds, cfg["out"])
    with open(cfg["out"] + ".config.json", "w") as fh:
        json.dump(_artifact("gen-data", cfg), fh, indent=2)
    print(f"wrote {cfg['out']}: {len(ds.train)}/{len(ds.val)}/{len(ds.test)} sequences")
    return 0


def cmd_train(cfg):
    ds = _dataset(cfg)
    net_cfg = network.NetworkConfig(ds.task, cfg["n_blocks"], ds.n_inputs, ds.n_outputs,
                                    cfg["variant"])
    tcfg = training.TrainConfig(
        learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
        input_noise_std=cfg["input_noise_std"], clip_gradients=cfg["clip_gradients"],
        max_epochs=cfg["max_epochs"], patience=cfg["patience"], seed=cfg["seed"],
        nesterov=cfg["nesterov"])
    log.info("applied learning rate %g (learning rate %g, momentum %g)",
             tcfg.effective_learning_rate, tcfg.learning_rate, tcfg.momentum)
    res = training.train(ds, net_cfg, tcfg)
    record = search.TrialRecord(
        schema_version=search.SCHEMA_VERSION, dataset=ds.name, variant=cfg["variant"],
        trial_index=0, seed=cfg["seed"], n_blocks=cfg["n_blocks"],
        learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
        input_noise_std=cfg["input_noise_std"], clip_gradients=cfg["clip_gradients"],
        val_metric=float(res.best_val_metric), test_metric=float(res.test_metric),
        wall_time_s=float(res.wall_time_seconds), epochs_run=res.epochs_run,
        diverged=res.diverged)
    doc = _artifact("train", cfg, record=json.loads(record.to_json()), curves=res.curves(),
                    applied_learning_rate=res.applied_learning_rate,
                    initial_val_loss=float(res.initial_val_loss),
                    initial_val_metric=float(res.initial_val_metric),
                    best_val_epoch=res.best_val_epoch, test_loss=float(res.test_loss),
                    n_params=network.network_num_params(net_cfg))
    _write_json(cfg["out"], doc)
    if cfg["save_weights"]:
        _write_json(cfg["save_weights"], weights_to_doc(res.best_weights, net_cfg))
    if res.diverged:
        log.error("training diverged")
        return 1
    return 0


def cmd_search(cfg):
    if not cfg["log"]:
        raise UsageError("--log is required")
    ds = _dataset(cfg)
    space = _space(cfg)
    with open(cfg["log"] + ".config.json", "w") as fh:
        json.dump(_artifact("search", cfg, dataset=ds.name), fh, indent=2)
    recs = search.run_search(ds, cfg["variant"], cfg["n_trials"], cfg["log"],
                             base_seed=cfg["seed"], parallelism=cfg["parallelism"], space=space,
                             include_timit_booleans=cfg["timit_booleans"],
                             max_epochs=cfg["max_epochs"], patience=cfg["patience"])
    best = min(recs, key=lambda r: (r.val_metric, r.trial_index))
    print(f"{len(recs)} trials of {cfg['variant']} on {ds.name}; best val {best.val_metric:.5g} "
          f"(trial {best.trial_index})")
    return 0


def _load_logs(paths, dataset=None):
    by_variant = {}
    for path in paths:
        if not os.path.exists(path):
            raise FileNotFoundError(f"trial log not found: {path}")
        for r in search.read_log(path):
            if dataset is None or r.dataset == dataset:
                by_variant.setdefault(r.variant, []).append(r)
    return by_variant


def cmd_analyze(cfg):
    if not cfg["logs"]:
        raise UsageError("give at least one trial log")
    logs = _load_logs(cfg["logs"], cfg["dataset"])
    if len({r.dataset for recs in logs.values() for r in recs}) > 1:
        raise UsageError("logs mix several datasets; select one with --dataset")
    param_count = None
    if cfg["n_inputs"] and cfg["n_outputs"] and cfg["task"]:
        def param_count(r):
            nc = network.NetworkConfig(cfg["task"], r.n_blocks, cfg["n_inputs"],
                                       cfg["n_outputs"], r.variant)
            return network.network_num_params(nc)
    try:
        table = stats.compare_variants(logs, baseline=cfg["baseline"],
                                       top_fraction=cfg["top_fraction"], n_tests=cfg["n_tests"],
                                       alpha=cfg["alpha"], param_count=param_count,
                                       expected=VARIANTS)
    except ValueError as e:
        raise UsageError(str(e)) from e
    print(f"{'variant':8s} {'n':>4s} {'top':>4s} {'mean':>10s} {'median':>10s} "
          f"{'p':>10s} {'p_adj':>10s} sig")
    for r in table.rows:
        p = "-" if r.p_value is None else f"{r.p_value:.3e}"
        pa = "-" if r.p_adjusted is None else f"{r.p_adjusted:.3e}"
        print(f"{r.variant:8s} {r.n_trials:4d} {r.n_top:4d} {r.box['mean']:10.5g} "
              f"{r.box['median']:10.5g} {p:>10s} {pa:>10s} {'*' if r.significant else ''}")
    if table.absent:
        print("absent: " + " ".join(table.absent))
    if cfg["out_json"]:
        _write_json(cfg["out_json"], _artifact("analyze", cfg, table=table.to_dict()))
    if cfg["out_csv"]:
        with open(cfg["out_csv"], "w", newline="") as fh:
            csv.writer(fh).writerows(table.to_csv_rows())
    return 0


def cmd_fanova(cfg):
    logs = _load_logs([cfg["log"]], cfg["dataset"])
    recs = [r for v, rs in logs.items() if cfg["variant"] in (None, v) for r in rs]
    if len(recs) < 2:
        raise UsageError("need at least two trials")
    fcfg = fanova.ForestConfig(n_trees=cfg["n_trees"], min_leaf=cfg["min_leaf"],
                               bootstrap=cfg["bootstrap"], max_features=cfg["max_features"],
                               seed=cfg["seed"])
    forest = fanova.fit_trials(recs, fcfg, drop_diverged=cfg["drop_diverged"],
                               top_fraction=cfg["top_fraction"], space=_space(cfg))
    dec = fanova.decompose_variance(forest)
    for name, frac in dec.ranked():
        print(f"{name:16s} {frac:7.3f}")
    for (a, b), frac in sorted(dec.pairs.items(), key=lambda kv: -kv[1]):
        print(f"{a + ' x ' + b:34s} {frac:7.3f}")
    print(f"{'higher order':16s} {dec.higher_order:7.3f}")

    out = cfg["out_dir"]
    if out:
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "variance.json"),
                    _artifact("fanova", cfg, n_trials=len(recs), transforms=forest.transforms,
                              box=forest.bounds.tolist(), decomposition=dec.to_dict()))
        with open(os.path.join(out, "marginals.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["hyperparameter", "coordinate", "mean", "std"])
            for d, name in enumerate(forest.names):
                curve = fanova.marginal(forest, (d,), fanova.default_grid(forest, d,
                                                                          cfg["grid_points"]))
                for x, m, s in zip(curve.grid[:, 0], curve.mean, curve.std):
                    w.writerow([name, repr(float(x)), repr(float(m)), repr(float(s))])
        with open(os.path.join(out, "interactions.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "b", "coord_a", "coord_b", "marginal", "interaction", "std"])
            n = max(2, cfg["grid_points"] // 2)
            for a in range(forest.n_dims):
                for b in range(a + 1, forest.n_dims):
                    imap = fanova.interaction_component(
                        forest, (a, b), fanova.default_grid(forest, a, n),
                        fanova.default_grid(forest, b, n))
                    for i, xa in enumerate(imap.grid_a):
                        for j, xb in enumerate(imap.grid_b):
                            w.writerow([forest.names[a], forest.names[b], repr(float(xa)),
                                        repr(float(xb)), repr(float(imap.marginal[i, j])),
                                        repr(float(imap.residual[i, j])),
                                        repr(float(imap.residual_std[i, j]))])
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "search": cmd_search,
    "analyze": cmd_analyze,
    "fanova": cmd_fanova,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(2, getattr(args, "verbose", None) or 1)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigurationError) as e:
        print(f"lstmlab {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError) as e:
        print(f"lstmlab {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
