import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstmlab import data, search
from lstmlab.numerics import make_rng
from lstmlab.search import (SearchSpace, TrialRecord, read_log, run_search,
                            sample_hyperparameters, select_top_fraction, trial_hyperparameters)


def _record(i, val, variant="V", **kw):
    base = dict(schema_version=1, dataset="toy", variant=variant, trial_index=i, seed=i,
                n_blocks=20, learning_rate=1e-3, momentum=0.9, input_noise_std=0.1,
                clip_gradients=False, val_metric=val, test_metric=val + 1, wall_time_s=0.5,
                epochs_run=10, diverged=False)
    base.update(kw)
    return TrialRecord(**base)


def test_sampler_ranges_and_medians():
    r = make_rng(0)
    draws = [sample_hyperparameters(r) for _ in range(20_000)]
    nb = np.array([d.n_blocks for d in draws])
    lr = np.array([d.learning_rate for d in draws])
    m = np.array([d.momentum for d in draws])
    nz = np.array([d.input_noise_std for d in draws])
    assert nb.min() >= 20 and nb.max() <= 200
    assert lr.min() >= 1e-6 and lr.max() <= 1e-2
    assert m.min() >= 0.0 and m.max() <= 0.99 + 1e-12
    assert nz.min() >= 0.0 and nz.max() <= 1.0
    assert abs(np.median(m) - 0.9) < 0.01
    assert all(d.nesterov_momentum and not d.clip_gradients for d in draws[:100])


def test_timit_booleans_behind_flag():
    r = make_rng(1)
    draws = [sample_hyperparameters(r, include_timit_booleans=True) for _ in range(400)]
    assert 0.35 < np.mean([d.clip_gradients for d in draws]) < 0.65
    assert 0.35 < np.mean([d.nesterov_momentum for d in draws]) < 0.65


def test_matched_hyperparameters_and_distinct_seeds():
    a = [trial_hyperparameters(7, k) for k in range(20)]
    b = [trial_hyperparameters(7, k) for k in range(20)]
    assert a == b
    assert len({h.sample_seed for h in a}) == 20
    assert trial_hyperparameters(8, 0) != a[0]


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 10), st.booleans()), min_size=1, max_size=40),
       st.floats(0.01, 1.0), st.randoms())
def test_top_fraction_properties(vals, fraction, rnd):
    recs = [_record(i, v, diverged=d) for i, (v, d) in enumerate(vals)]
    top = select_top_fraction(recs, fraction)
    assert len(top) == max(1, math.ceil(round(fraction * len(recs), 9)))
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert select_top_fraction(shuffled, fraction) == top
    cut = max(r.val_metric for r in top)
    assert all(r.val_metric >= cut for r in recs if r not in top)


def test_top_fraction_examples():
    recs = [_record(i, v) for i, v in enumerate(range(200))]
    assert len(select_top_fraction(recs, 0.10)) == 20
    assert select_top_fraction(recs, 1.0) == sorted(recs, key=lambda r: r.val_metric)
    ten = [_record(i, v) for i, v in enumerate([5, 3, 9, 1, 7, 3, 8, 2, 6, 4])]
    assert {r.trial_index for r in select_top_fraction(ten, 0.2)} == {3, 7}
    ties = [_record(i, 1.0) for i in range(5)]
    assert [r.trial_index for r in select_top_fraction(ties, 0.4)] == [0, 1]
    with pytest.raises(ValueError):
        select_top_fraction([], 0.1)
    with pytest.raises(ValueError):
        select_top_fraction(ten, 0.0)


def test_record_roundtrip_and_schema(tmp_path):
    rec = _record(3, 0.25, diverged=True)
    assert TrialRecord.from_json(rec.to_json()) == rec
    assert list(json.loads(rec.to_json())) == [
        "schema_version", "dataset", "variant", "trial_index", "seed", "n_blocks",
        "learning_rate", "momentum", "input_noise_std", "clip_gradients", "val_metric",
        "test_metric", "wall_time_s", "epochs_run", "diverged"]
    doc = json.loads(rec.to_json())
    doc["extra"] = 1
    with pytest.raises(ValueError):
        TrialRecord.from_json(json.dumps(doc))
    doc = json.loads(rec.to_json())
    doc["schema_version"] = 99
    with pytest.raises(ValueError):
        TrialRecord.from_json(json.dumps(doc))


def test_truncated_final_line_is_skipped(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text(_record(0, 1.0).to_json() + "\n" + _record(1, 2.0).to_json()[:40])
    assert [r.trial_index for r in read_log(path)] == [0]
    path.write_text("garbage\n" + _record(0, 1.0).to_json() + "\n")
    with pytest.raises(ValueError):
        read_log(path)


@pytest.fixture(scope="module")
def toy_reber():
    return data.generate_embedded_reber(make_rng(0), 9)


SMALL = SearchSpace(n_blocks=(2, 4))


def test_run_search_resumes(tmp_path, toy_reber):
    log = tmp_path / "trials.jsonl"
    first = run_search(toy_reber, "V", 2, str(log), base_seed=3, space=SMALL, max_epochs=2)
    assert [r.trial_index for r in first] == [0, 1]
    assert len({r.seed for r in first}) == 2
    # simulate a crash that tore the last line
    text = log.read_text()
    log.write_text(text[: len(text) - 20])
    recs = run_search(toy_reber, "V", 3, str(log), base_seed=3, space=SMALL, max_epochs=2)
    assert [r.trial_index for r in recs] == [0, 1, 2]
    assert recs[0] == first[0]
    again = run_search(toy_reber, "V", 3, str(log), base_seed=3, space=SMALL, max_epochs=2)
    assert [(r.n_blocks, r.learning_rate) for r in again] == \
        [(r.n_blocks, r.learning_rate) for r in recs]


def test_variants_share_hyperparameters(tmp_path, toy_reber):
    log = str(tmp_path / "t.jsonl")
    v = run_search(toy_reber, "V", 3, log, base_seed=1, space=SMALL, max_epochs=1)
    n = run_search(toy_reber, "NFG", 3, log, base_seed=1, space=SMALL, max_epochs=1)
    for a, b in zip(v, n):
        assert (a.n_blocks, a.learning_rate, a.momentum, a.input_noise_std, a.seed) == \
            (b.n_blocks, b.learning_rate, b.momentum, b.input_noise_std, b.seed)
    assert len(read_log(log)) == 6


def test_parallel_search_matches_serial(tmp_path, toy_reber):
    serial = run_search(toy_reber, "NP", 3, str(tmp_path / "a.jsonl"), space=SMALL, max_epochs=2)
    par = run_search(toy_reber, "NP", 3, str(tmp_path / "b.jsonl"), space=SMALL, max_epochs=2,
                     parallelism=2)
    strip = lambda r: (r.trial_index, r.val_metric, r.test_metric, r.epochs_run)
    assert [strip(r) for r in serial] == [strip(r) for r in par]


def test_run_search_validation(tmp_path, toy_reber):
    with pytest.raises(ValueError):
        run_search(toy_reber, "V", 0, str(tmp_path / "x"))
    with pytest.raises(ValueError):
        run_search(toy_reber, "XYZ", 1, str(tmp_path / "x"))
