import json
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smallaug.augment import Operation, PlacementConfig, Policy, augment_dataset
from smallaug.data_model import write_manifest
from smallaug.errors import EvaluatorFailure, EvaluatorProtocolError, NotEnoughTrials, SchemaError, TooFewImages
from smallaug.search import (LossEvaluator, OracleSpec, SearchConfig, SearchIncomplete, SubprocessEvaluator,
                             kfold_split, loss_weighted_mean_m, paste_statistics, run_search, search_fold,
                             select_top_n, synthetic_oracle)
from smallaug.synthetic import make_dataset
from smallaug.tpe import Trial


@pytest.fixture(scope="module")
def ds20():
    return make_dataset(20, seed=3)


def _trials(losses):
    return [Trial({"op": "single", "p": i / 10, "m": 1}, v, i) for i, v in enumerate(losses)]


# -- config -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(num_search=3, top_n=4)
    with pytest.raises(ValueError):
        SearchConfig(num_search=5, k_folds=1)
    with pytest.raises(TypeError):
        SearchConfig()


# -- folds --------------------------------------------------------------------

def test_kfold_even():
    folds = kfold_split(make_dataset(10), 5, seed=0)
    assert [(len(f.d_a), len(f.d_m)) for f in folds] == [(2, 8)] * 5


def test_kfold_remainder_first():
    folds = kfold_split(make_dataset(7), 3, seed=0)
    assert [len(f.d_a) for f in folds] == [3, 2, 2]


def test_kfold_too_few():
    with pytest.raises(TooFewImages):
        kfold_split(make_dataset(3), 5, seed=0)


def test_kfold_seeded():
    d = make_dataset(12)
    ids = lambda fs: [[i.id for i in f.d_a.images] for f in fs]
    assert ids(kfold_split(d, 3, 1)) == ids(kfold_split(d, 3, 1))
    assert ids(kfold_split(d, 3, 1)) != ids(kfold_split(d, 3, 2))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.integers(2, 8), st.integers(0, 10**6))
def test_kfold_partition(n, k, seed):
    if n < k:
        return
    d = make_dataset(n, seed=0, n_small=(0, 1), width=16, height=16)
    folds = kfold_split(d, k, seed)
    all_ids = {i.id for i in d.images}
    held = []
    for f in folds:
        a = {i.id for i in f.d_a.images}
        m = {i.id for i in f.d_m.images}
        assert a and not a & m and a | m == all_ids
        held.extend(a)
    assert sorted(held) == sorted(all_ids)
    sizes = [len(f.d_a) for f in folds]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


# -- top-N --------------------------------------------------------------------

def test_top_n_example():
    sel = select_top_n(_trials([0.5, 0.1, 0.3]), 2)
    assert [s.loss for s in sel] == [0.1, 0.3] and [s.trial for s in sel] == [1, 2]


def test_top_n_all_ordered():
    assert [s.loss for s in select_top_n(_trials([0.5, 0.1, 0.3]), 3)] == [0.1, 0.3, 0.5]


def test_top_n_tie_at_cut():
    sel = select_top_n(_trials([0.1, 0.2, 0.2, 0.2]), 2)
    assert [s.trial for s in sel] == [0, 1]


def test_top_n_keeps_duplicates():
    hist = [Trial({"op": "all", "p": 0.5, "m": 2}, 0.1, i) for i in range(3)]
    assert len(select_top_n(hist, 3)) == 3


def test_top_n_too_many():
    with pytest.raises(NotEnoughTrials):
        select_top_n(_trials([1.0]), 2)


def test_weighted_mean_m():
    sel = select_top_n([Trial({"op": "all", "p": 0.5, "m": m}, 0.0, i) for i, m in enumerate([1, 3])], 2)
    assert loss_weighted_mean_m(sel) == 2.0
    skewed = select_top_n([Trial({"op": "all", "p": 0.5, "m": 3}, -0.1, 0),
                           Trial({"op": "all", "p": 0.5, "m": 1}, 5.0, 1)], 2)
    assert 2.9 < loss_weighted_mean_m(skewed) <= 3.0


# -- synthetic oracle ---------------------------------------------------------

def _rich_dataset(n, seed=0):
    # every image has at least 3 small objects so operator votes are unambiguous
    return make_dataset(n, seed=seed, n_small=(4, 6))


def test_oracle_zero_at_target():
    d = _rich_dataset(10)
    target = Policy(Operation.MULTIPLE, 0.6, 2)
    ev = synthetic_oracle(OracleSpec(Operation.MULTIPLE, 0.6, 2))
    model = ev.train(d, 0)
    aug = augment_dataset(d, target, PlacementConfig(), 1, gate="stratified")
    assert ev.loss(model, aug.dataset) == 0.0


def test_oracle_op_only_difference():
    d = _rich_dataset(10)
    ev = synthetic_oracle(OracleSpec(Operation.ALL, 0.6, 2, w_op=0.7))
    aug = augment_dataset(d, Policy(Operation.SINGLE, 0.6, 2), PlacementConfig(), 1, gate="stratified")
    assert ev.loss(ev.train(d, 0), aug.dataset) == pytest.approx(0.7, abs=1e-12)


def test_paste_statistics_reads_data():
    d = _rich_dataset(20, seed=5)
    aug = augment_dataset(d, Policy(Operation.ALL, 0.25, 3), PlacementConfig(), 2, gate="stratified")
    st_ = paste_statistics(aug.dataset)
    assert st_.dominant_op is Operation.ALL
    assert st_.applied_fraction == 0.25
    assert st_.mean_pastes == 3.0


def test_oracle_spec_schema():
    spec = OracleSpec.from_dict({"op": "multiple", "p": 0.6, "m": 2, "sigma": 0.02})
    assert spec.sigma == 0.02 and spec.op is Operation.MULTIPLE
    with pytest.raises(SchemaError):
        OracleSpec.from_dict({"op": "multiple", "p": 0.6, "m": 2, "sigma": -1})


# -- fold search --------------------------------------------------------------

def test_search_fold_contract(ds20):
    fold = kfold_split(ds20, 2, 0)[0]
    hist = search_fold(fold, synthetic_oracle(OracleSpec(Operation.SINGLE, 0.3, 1)), SearchConfig(num_search=30))
    assert len(hist) == 30 and all(np.isfinite(t.loss) for t in hist)


def test_single_trial_search(ds20):
    fold = kfold_split(ds20, 2, 0)[0]
    hist = search_fold(fold, synthetic_oracle(OracleSpec(Operation.SINGLE, 0.3, 1)),
                       SearchConfig(num_search=1, top_n=1))
    assert len(hist) == 1


def test_planted_fold_search():
    d = _rich_dataset(40, seed=11)
    spec = OracleSpec(Operation.MULTIPLE, 0.6, 2, w_op=0.5, w_m=0.0)
    hits = 0
    for seed in range(20):
        cfg = SearchConfig(num_search=60, k_folds=2, seed=seed)
        fold = kfold_split(d, 2, seed)[0]
        best = min(search_fold(fold, synthetic_oracle(spec), cfg), key=lambda t: t.loss)
        hits += best.params["op"] == "multiple" and abs(best.params["p"] - 0.6) < 0.15
    assert hits >= 18


# -- full search --------------------------------------------------------------

def test_run_search_size_and_provenance(tmp_path, ds20):
    cfg = SearchConfig(num_search=12, k_folds=2, top_n=3, seed=4)
    res = run_search(ds20, synthetic_oracle(OracleSpec(Operation.ALL, 0.5, 1)), cfg, tmp_path)
    assert len(res) == 6 and res.complete
    saved = json.loads((tmp_path / "policies.json").read_text())
    assert len(saved) == 6
    for entry in saved:
        prov = entry["provenance"]
        lines = (tmp_path / f"trials_fold{prov['fold']}.jsonl").read_text().splitlines()
        rec = json.loads(lines[prov["trial"]])
        assert rec["loss"] == prov["loss"]
        assert (rec["op"], rec["p"], rec["m"]) == (entry["op"], entry["p"], entry["m"])
    report = json.loads((tmp_path / "search_report.json").read_text())
    assert report["n_policies"] == 6 and "wall_clock_s" not in report


class ConstantEvaluator(LossEvaluator):
    def train(self, d_m, fold):
        return None

    def loss(self, model, d):
        return 1.0


def test_constant_loss_picks_first_trials(ds20):
    res = run_search(ds20, ConstantEvaluator(), SearchConfig(num_search=8, k_folds=2, top_n=3))
    assert [(e.fold, e.trial) for e in res.entries] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]


def test_run_search_deterministic_and_worker_independent(tmp_path, ds20):
    spec = OracleSpec(Operation.MULTIPLE, 0.6, 2, sigma=0.02)
    cfg = SearchConfig(num_search=12, k_folds=2, top_n=2, seed=9)
    run_search(ds20, synthetic_oracle(spec), cfg, tmp_path / "a")
    run_search(ds20, synthetic_oracle(spec), SearchConfig(num_search=12, k_folds=2, top_n=2, seed=9, workers=2),
               tmp_path / "b")
    for name in ("policies.json", "search_report.json", "trials_fold0.jsonl", "trials_fold1.jsonl"):
        a, b = (tmp_path / "a" / name).read_text(), (tmp_path / "b" / name).read_text()
        if name == "search_report.json":
            a, b = json.loads(a), json.loads(b)
            a["config"].pop("workers", None), b["config"].pop("workers", None)
        assert a == b, name


class FailingFold(ConstantEvaluator):
    def loss(self, model, d):
        if self.calls_for(d) > 3 and self.fold_of(d) == 1:
            raise RuntimeError("worker died")
        return 0.5

    def __init__(self, fold_ids):
        self.fold_ids = fold_ids
        self.counts = {}

    def fold_of(self, d):
        return 1 if {i.id for i in d.images} <= self.fold_ids else 0

    def calls_for(self, d):
        f = self.fold_of(d)
        self.counts[f] = self.counts.get(f, 0) + 1
        return self.counts[f]


def test_partial_failure_keeps_other_folds(tmp_path, ds20):
    cfg = SearchConfig(num_search=6, k_folds=2, top_n=2)
    held1 = {i.id for i in kfold_split(ds20, 2, cfg.seed)[1].d_a.images}
    with pytest.raises(SearchIncomplete) as err:
        run_search(ds20, FailingFold(held1), cfg, tmp_path)
    ps = err.value.policy_set
    assert [e.fold for e in ps.entries] == [0, 0]
    assert isinstance(err.value.first_error, EvaluatorFailure)
    assert err.value.first_error.trial == 3
    report = json.loads((tmp_path / "search_report.json").read_text())
    assert [f["status"] for f in report["folds"]] == ["ok", "failed"]
    assert len((tmp_path / "trials_fold1.jsonl").read_text().splitlines()) == 3


def test_inputs_not_mutated(tmp_path):
    d = make_dataset(10, seed=1)
    src = write_manifest(d, tmp_path / "in")
    before = {p: p.read_bytes() for p in (tmp_path / "in").rglob("*") if p.is_file()}
    from smallaug.data_model import load_manifest
    run_search(load_manifest(src), synthetic_oracle(OracleSpec(Operation.ALL, 0.5, 1)),
               SearchConfig(num_search=4, k_folds=2, top_n=1), tmp_path / "out")
    after = {p: p.read_bytes() for p in (tmp_path / "in").rglob("*") if p.is_file()}
    assert before == after


# -- subprocess evaluator -----------------------------------------------------

def _script(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body))
    return f"{sys.executable} {path}"


@pytest.fixture
def train_cmd(tmp_path):
    return _script(tmp_path, "train.py", """
        import os, pathlib
        assert pathlib.Path(os.environ["SMALLAUG_MANIFEST"]).is_file()
        out = pathlib.Path(os.environ["SMALLAUG_OUT"]) / "model.bin"
        out.write_text(os.environ["SMALLAUG_FOLD"])
        print("training done")
        print(out)
    """)


def test_subprocess_loss(tmp_path, train_cmd, ds20):
    loss = _script(tmp_path, "loss.py", """
        import json, os, pathlib
        assert pathlib.Path(os.environ["SMALLAUG_MODEL"]).read_text() == "0"
        m = json.loads(pathlib.Path(os.environ["SMALLAUG_MANIFEST"]).read_text())
        print(json.dumps({"loss": 0.5}))
    """)
    ev = SubprocessEvaluator(train_cmd, loss, tmp_path / "work")
    model = ev.train(ds20, 0)
    assert model.path.endswith("model.bin")
    assert ev.loss(model, ds20) == 0.5


def test_subprocess_exit_code(tmp_path, train_cmd, ds20):
    loss = _script(tmp_path, "loss.py", """
        import sys
        sys.stderr.write("cuda out of memory\\n")
        sys.exit(1)
    """)
    ev = SubprocessEvaluator(train_cmd, loss, tmp_path / "work")
    with pytest.raises(EvaluatorProtocolError) as err:
        ev.loss(ev.train(ds20, 0), ds20)
    assert "cuda out of memory" in err.value.stderr


@pytest.mark.parametrize("line", ['{"loss": "NaN"}', '{"loss": Infinity}', "loss=3", '{"value": 1}', '{"loss": "x"}'])
def test_subprocess_bad_output(tmp_path, train_cmd, ds20, line):
    loss = _script(tmp_path, "loss.py", f"print({line!r})\n")
    ev = SubprocessEvaluator(train_cmd, loss, tmp_path / "work")
    with pytest.raises(EvaluatorProtocolError):
        ev.loss(ev.train(ds20, 0), ds20)


def test_subprocess_in_search(tmp_path, train_cmd, ds20):
    loss = _script(tmp_path, "loss.py", """
        import json, os, pathlib
        m = json.loads(pathlib.Path(os.environ["SMALLAUG_MANIFEST"]).read_text())
        ann = json.loads((pathlib.Path(os.environ["SMALLAUG_MANIFEST"]).parent / m["annotations_file"]).read_text())
        pasted = sum(a["origin"] == "pasted" for a in ann["annotations"])
        print(json.dumps({"loss": abs(pasted - 10) / 10}))
    """)
    ev = SubprocessEvaluator(train_cmd, loss, tmp_path / "work")
    res = run_search(ds20, ev, SearchConfig(num_search=3, k_folds=2, top_n=1, workers=2), tmp_path / "out")
    assert len(res) == 2
    assert not list((tmp_path / "work").glob("fold_*/eval_*"))
