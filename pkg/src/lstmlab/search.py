"""Random hyperparameter search with a line-delimited, append-only trial log."""

import json
import logging
import math
import os
import threading
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import lstm, network, training
from .numerics import derive_seed, make_rng

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SearchSpace:
    """Sampling ranges; the defaults are the full study ranges."""

    n_blocks: tuple = (20, 200)
    learning_rate: tuple = (1e-6, 1e-2)
    # momentum = 1 - u with u log-uniform on this range
    momentum_complement: tuple = (0.01, 1.0)
    input_noise_std: tuple = (0.0, 1.0)


STUDY_SPACE = SearchSpace()


@dataclass(frozen=True)
class HyperSample:
    n_blocks: int
    learning_rate: float
    momentum: float
    input_noise_std: float
    sample_seed: int = 0
    nesterov_momentum: bool = True
    clip_gradients: bool = False


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_hyperparameters(rng, include_timit_booleans=False, space=STUDY_SPACE, sample_seed=0):
    lo, hi = space.n_blocks
    n_blocks = int(round(_log_uniform(rng, lo, hi)))
    n_blocks = min(max(n_blocks, lo), hi)
    lr = _log_uniform(rng, *space.learning_rate)
    momentum = 1.0 - _log_uniform(rng, *space.momentum_complement)
    noise = float(rng.uniform(*space.input_noise_std))
    nesterov, clip = True, False
    if include_timit_booleans:
        nesterov = bool(rng.random() < 0.5)
        clip = bool(rng.random() < 0.5)
    return HyperSample(n_blocks, lr, momentum, noise, sample_seed, nesterov, clip)


def trial_seed(base_seed, trial_index):
    return derive_seed(base_seed, trial_index)


def trial_hyperparameters(base_seed, trial_index, include_timit_booleans=False, space=STUDY_SPACE):
    """The sample for one trial index; independent of the variant, so variants get matched draws."""
    seed = trial_seed(base_seed, trial_index)
    return sample_hyperparameters(make_rng(derive_seed(seed, 0)), include_timit_booleans, space,
                                  sample_seed=seed)


@dataclass(frozen=True)
class TrialRecord:
    schema_version: int
    dataset: str
    variant: str
    trial_index: int
    seed: int
    n_blocks: int
    learning_rate: float
    momentum: float
    input_noise_std: float
    clip_gradients: bool
    val_metric: float
    test_metric: float
    wall_time_s: float
    epochs_run: int
    diverged: bool

    @property
    def key(self):
        return (self.dataset, self.variant, self.trial_index)

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line):
        doc = json.loads(line)
        names = [f.name for f in fields(cls)]
        if set(doc) != set(names):
            raise ValueError(f"trial record fields {sorted(doc)} != {sorted(names)}")
        if doc["schema_version"] != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {doc['schema_version']}")
        return cls(**{n: doc[n] for n in names})


def read_log(path):
    """Parse a trial log. A truncated final line (interrupted write) is skipped."""
    if not os.path.exists(path):
        return []
    records = []
    with open(path) as fh:
        lines = fh.read().split("\n")
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(TrialRecord.from_json(line))
        except (json.JSONDecodeError, ValueError) as e:
            if n == len(lines):
                log.warning("%s: ignoring incomplete final line", path)
                continue
            raise ValueError(f"{path}:{n}: {e}") from e
    return records


def _drop_torn_tail(path):
    """Cut a partial last record (no trailing newline) so appends start on a fresh line."""
    if not os.path.exists(path):
        return
    with open(path, "rb+") as fh:
        data = fh.read()
        if not data or data.endswith(b"\n"):
            return
        keep = data.rfind(b"\n") + 1
        log.warning("%s: dropping incomplete final record", path)
        fh.truncate(keep)


class TrialLog:
    """Append-only JSONL writer; appends are serialised through one lock."""

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()

    def append(self, record):
        with self._lock:
            with open(self.path, "a") as fh:
                fh.write(record.to_json() + "\n")
                fh.flush()
                os.fsync(fh.fileno())


def run_trial(dataset, variant, trial_index, base_seed, space=STUDY_SPACE,
              include_timit_booleans=False, max_epochs=150, patience=15):
    hs = trial_hyperparameters(base_seed, trial_index, include_timit_booleans, space)
    net_cfg = network.NetworkConfig(dataset.task, hs.n_blocks, dataset.n_inputs,
                                    dataset.n_outputs, lstm.get_preset(variant))
    cfg = training.TrainConfig(
        learning_rate=hs.learning_rate, momentum=hs.momentum,
        input_noise_std=hs.input_noise_std, clip_gradients=hs.clip_gradients,
        max_epochs=max_epochs, patience=patience, seed=hs.sample_seed,
        nesterov=hs.nesterov_momentum)
    res = training.train(dataset, net_cfg, cfg)
    return TrialRecord(
        schema_version=SCHEMA_VERSION, dataset=dataset.name, variant=variant,
        trial_index=trial_index, seed=hs.sample_seed, n_blocks=hs.n_blocks,
        learning_rate=hs.learning_rate, momentum=hs.momentum,
        input_noise_std=hs.input_noise_std, clip_gradients=hs.clip_gradients,
        val_metric=float(res.best_val_metric), test_metric=float(res.test_metric),
        wall_time_s=float(res.wall_time_seconds), epochs_run=int(res.epochs_run),
        diverged=bool(res.diverged))


def _run_trial_job(args):
    return run_trial(*args)


def run_search(dataset, variant, n_trials, log_path, base_seed=0, parallelism=1,
               space=STUDY_SPACE, include_timit_booleans=False, max_epochs=150, patience=15):
    """Run (or resume) ``n_trials`` random-search trials, appending each to ``log_path``.

    Trials already present in the log for this dataset and variant are skipped.
    Returns every record for this dataset/variant after the run, ordered by index.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    lstm.get_preset(variant)
    _drop_torn_tail(log_path)
    done = {r.trial_index for r in read_log(log_path)
            if r.dataset == dataset.name and r.variant == variant}
    todo = [k for k in range(n_trials) if k not in done]
    writer = TrialLog(log_path)
    jobs = [(dataset, variant, k, base_seed, space, include_timit_booleans, max_epochs, patience)
            for k in todo]
    if parallelism <= 1:
        for job in jobs:
            rec = _run_trial_job(job)
            writer.append(rec)
            log.info("trial %d/%d %s: val %.5g", rec.trial_index + 1, n_trials, variant,
                     rec.val_metric)
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_run_trial_job, job) for job in jobs]
            for fut in as_completed(futures):
                writer.append(fut.result())
    recs = [r for r in read_log(log_path) if r.dataset == dataset.name and r.variant == variant
            and r.trial_index < n_trials]
    return sorted(recs, key=lambda r: r.trial_index)


def select_top_fraction(trials, fraction=0.10, key="val_metric"):
    """The ``ceil(fraction * n)`` best trials (lowest ``key``), ties to the lower index."""
    trials = list(trials)
    if not trials:
        raise ValueError("no trials to select from")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    # guard against 0.1 * 30 = 3.0000000000000004
    k = max(1, math.ceil(round(fraction * len(trials), 9)))
    ranked = sorted(trials, key=lambda r: (getattr(r, key), r.trial_index))
    return ranked[:k]
