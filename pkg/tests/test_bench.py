import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clab.bench import (ExperimentConfig, RunRecord, aggregate, derive_seed, run_benchmark,
                        stratified_subsample, supervised_pretrain, train_val_split)
from clab.data import AugmentationPolicy, Dataset, SyntheticSpec, generate_synthetic
from clab.errors import ConfigError, ContractError
from clab.nn.layers import EncoderConfig
from clab.report import format_cell, table_csv


class _Labels:
    """Minimal dataset stand-in: labels plus unique locations."""

    def __init__(self, labels, locations=None):
        self.labels = np.asarray(labels)
        self.locations = np.arange(len(labels)) if locations is None else np.asarray(locations)


# ---------------------------------------------------------------- subsampling

def test_subsample_five_per_class():
    ds = _Labels(np.repeat([0, 1], 50))
    idx = stratified_subsample(ds, 0.1, np.random.default_rng(0))
    assert np.bincount(ds.labels[idx]).tolist() == [5, 5]
    assert len(set(idx.tolist())) == 10


def test_subsample_full_is_identity():
    ds = _Labels(np.repeat([0, 1, 2], 7))
    assert stratified_subsample(ds, 1.0, np.random.default_rng(0)).tolist() == list(range(21))


def test_subsample_forced_rounding():
    ds = _Labels(np.repeat(np.arange(10), 100))
    idx = stratified_subsample(ds, 0.01, np.random.default_rng(0))
    assert len(idx) == 10 and np.bincount(ds.labels[idx]).tolist() == [1] * 10


def test_subsample_keeps_locations_whole():
    ds = generate_synthetic(SyntheticSpec(num_classes=3, locations_per_class=10, views=4, image_size=4))
    idx = stratified_subsample(ds, 0.2, np.random.default_rng(1))
    chosen = set(ds.locations[idx].tolist())
    assert len(chosen) == 6
    for loc in chosen:
        assert set(ds.location_index()[loc].tolist()) <= set(idx.tolist())


def test_subsample_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        stratified_subsample(_Labels([0, 1]), 0.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        stratified_subsample(_Labels([0, 1]), 1.5, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(1, 60), min_size=1, max_size=6),
       fraction=st.floats(0.005, 1.0), seed=st.integers(0, 1000))
def test_subsample_stratification_bound(counts, fraction, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    rng = np.random.default_rng(seed)
    ds = _Labels(labels[rng.permutation(len(labels))])
    idx = stratified_subsample(ds, fraction, rng)
    got = np.bincount(ds.labels[idx], minlength=len(counts))
    for c, n_c in enumerate(counts):
        assert got[c] >= 1
        assert abs(got[c] - max(1.0, n_c * fraction)) <= 1
    assert len(np.unique(idx)) == len(idx)


def test_train_val_split_by_location():
    ds = generate_synthetic(SyntheticSpec(num_classes=2, locations_per_class=10, views=3, image_size=4))
    idx = stratified_subsample(ds, 1.0, np.random.default_rng(0))
    tr, va = train_val_split(ds, idx, np.random.default_rng(0))
    assert sorted(tr.tolist() + va.tolist()) == idx.tolist()
    assert not set(ds.locations[tr].tolist()) & set(ds.locations[va].tolist())
    assert np.bincount(ds.labels[va]).tolist() == [6, 6]  # 2 of 10 locations x 3 views


def test_train_val_split_single_location_falls_back_to_views():
    ds = generate_synthetic(SyntheticSpec(num_classes=2, locations_per_class=5, views=4, image_size=4))
    idx = stratified_subsample(ds, 0.01, np.random.default_rng(0))
    tr, va = train_val_split(ds, idx, np.random.default_rng(0))
    assert len(tr) == 6 and len(va) == 2
    assert np.bincount(ds.labels[va]).tolist() == [1, 1]


def test_derive_seed():
    assert derive_seed(0, "subset", 0.1, 2) == derive_seed(0, "subset", 0.1, 2)
    assert derive_seed(0, "subset", 0.1, 2) != derive_seed(0, "subset", 0.1, 1)
    assert derive_seed(0, "x") != derive_seed(1, "x")
    assert 0 <= derive_seed(2 ** 40, "x") < 2 ** 63


# ---------------------------------------------------------------- aggregation

def _rec(values, metric="macro_f1", variant="moco", protocol="knn", fraction=0.1):
    return [RunRecord(variant, protocol, fraction, r, 0, {metric: v}) for r, v in enumerate(values)]


def test_aggregate_constant():
    g = aggregate(_rec([60.0, 60.0, 60.0]))["groups"][0]
    assert g["macro_f1"]["mean"] == 60.0 and g["macro_f1"]["sd"] == 0.0


def test_aggregate_hand_values():
    g = aggregate(_rec([1.0, 2.0, 3.0]))["groups"][0]
    assert g["macro_f1"]["mean"] == 2.0 and g["macro_f1"]["sd"] == 1.0
    assert g["n"] == 3


def test_aggregate_single_value_omits_sd():
    g = aggregate(_rec([0.7]))["groups"][0]
    assert g["macro_f1"] == {"mean": 0.7, "sd": None, "values": [0.7]}


def test_aggregate_mean_within_range():
    rng = np.random.default_rng(0)
    for _ in range(20):
        vals = rng.random(int(rng.integers(1, 6))).tolist()
        m = aggregate(_rec(vals))["groups"][0]["macro_f1"]["mean"]
        assert min(vals) <= m <= max(vals)


def test_aggregate_rejects_inconsistent_groups():
    with pytest.raises(ContractError):
        aggregate(_rec([1.0, 2.0]) + _rec([3.0]))
    recs = _rec([1.0, 2.0])
    recs[1].metrics = {"accuracy": 2.0}
    with pytest.raises(ContractError):
        aggregate(recs)


def test_aggregate_counts_failures():
    recs = _rec([0.5, 0.7])
    recs.append(RunRecord("moco", "knn", 0.1, 2, 0, {}, status="error", error="boom"))
    g = aggregate(recs)["groups"][0]
    assert g["n"] == 2 and g["failed"] == 1


def test_table_cells():
    report = aggregate(_rec([0.6, 0.6, 0.6]) + _rec([0.5], fraction=1.0))
    assert format_cell(report["groups"][0]) == "60.00 (0.00)"
    assert table_csv(report, "knn") == "variant,10%,100%\nMoCo,60.00 (0.00),50.00\n"


# ---------------------------------------------------------------- supervised pretraining

TINY = EncoderConfig(input_shape=(8, 8, 3), hidden=(32,), feat_dim=16, proj_hidden=(8,), proj_dim=4,
                     conv_stem=False)


def _sup_data():
    return generate_synthetic(SyntheticSpec(num_classes=3, locations_per_class=10, views=2,
                                            image_size=8, seed=2, drift=0.02, cloud_prob=0.0))


def test_supervised_zero_epochs_and_determinism(tmp_path):
    from clab.bench import SupervisedConfig
    from clab.nn.layers import Encoder
    ds = _sup_data()
    enc, _, losses = supervised_pretrain(ds, TINY, SupervisedConfig(epochs=0), seed=4)
    init = Encoder.init(TINY, np.random.default_rng([4, 21]))
    for name, arr in init.params.arrays().items():
        assert np.array_equal(enc.params[name].data, arr)
    assert losses == []
    cfg = SupervisedConfig(epochs=2, batch_size=16)
    supervised_pretrain(ds, TINY, cfg, seed=4, out=tmp_path / "a")
    supervised_pretrain(ds, TINY, cfg, seed=4, out=tmp_path / "b")
    assert (tmp_path / "a.clab").read_bytes() == (tmp_path / "b.clab").read_bytes()


def test_supervised_fits_separable_data():
    from clab.bench import SupervisedConfig
    from clab.eval import extract_features
    ds = _sup_data()
    enc, head, losses = supervised_pretrain(ds, TINY, SupervisedConfig(epochs=40, batch_size=16,
                                                                       lr=0.05, augment=False),
                                            seed=0)
    preds = head.predict(extract_features(enc, ds).features)
    assert np.mean(preds == ds.labels) > 0.9
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------- config

def _micro(**over):
    cfg = {
        "version": 1, "seed": 7,
        "train_data": {"synthetic": {"num_classes": 3, "locations_per_class": 5, "views": 2,
                                     "image_size": 8}},
        "variants": ["none"], "fractions": [1.0], "repeats": 1, "protocols": ["knn"],
        "encoder": {"input_shape": [8, 8, 3], "hidden": [16], "feat_dim": 8,
                    "proj_hidden": [8], "proj_dim": 4},
        "pretrain": {"epochs": 1, "batch_size": 8,
                     "contrastive": {"queue_size": 16},
                     "augmentation": {"output_size": 8}},
        "eval_ssl": {"max_epochs": 3}, "eval_supervised": {"max_epochs": 3},
    }
    cfg.update(over)
    return cfg


def test_config_roundtrip():
    cfg = ExperimentConfig.from_dict(_micro())
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("over,field", [
    ({"fractions": [0.0]}, "fractions"),
    ({"repeats": 0}, "repeats"),
    ({"variants": ["simclr"]}, "variants"),
    ({"bogus": 1}, "bogus"),
    ({"version": 2}, "version"),
    ({"encoder": {"feat_dim": 1}}, "encoder.feat_dim"),
    ({"pretrain": {"contrastive": {"temperature": 0.0}}}, "pretrain.contrastive.temperature"),
    ({"eval_ssl": {"lr": 1.0}}, "eval_ssl.lr"),
    ({"train_data": {"folder": "x"}}, "test_data"),
])
def test_config_errors_name_the_field(over, field):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict(_micro(**over))
    assert err.value.field == field


def test_config_requires_version():
    d = _micro()
    del d["version"]
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict(d)
    assert err.value.field == "version"


# ---------------------------------------------------------------- the grid

def test_micro_benchmark_has_one_record_and_resumes(tmp_path):
    cfg = ExperimentConfig.from_dict(_micro())
    report = run_benchmark(cfg, tmp_path / "r")
    assert len(report["records"]) == 1
    rec_file = next((tmp_path / "r" / "records").glob("*.json"))
    stamp = rec_file.stat().st_mtime_ns
    first = (tmp_path / "r" / "report.json").read_bytes()
    run_benchmark(cfg, tmp_path / "r")
    assert rec_file.stat().st_mtime_ns == stamp
    assert (tmp_path / "r" / "report.json").read_bytes() == first


def test_report_is_bit_reproducible(tmp_path):
    cfg = _micro(variants=["none", "mocotp"], fractions=[0.5, 1.0], repeats=2,
                 protocols=["knn", "linear"])
    run_benchmark(ExperimentConfig.from_dict(cfg), tmp_path / "a")
    run_benchmark(ExperimentConfig.from_dict(cfg), tmp_path / "b")
    for rel in ["report.json", "tables/knn.csv", "tables/linear.csv"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    # fraction 1.0 runs once, 0.5 runs twice: 2 variants x (2 + 1) x 2 protocols
    assert len(report["records"]) == 12


def test_failed_cell_does_not_abort_siblings(tmp_path):
    # one location and one view per class: no validation split is possible for the linear probe
    cfg = _micro(train_data={"synthetic": {"num_classes": 3, "locations_per_class": 1, "views": 1,
                                           "image_size": 8}},
                 test_data={"synthetic": {"num_classes": 3, "locations_per_class": 2, "views": 1,
                                          "image_size": 8, "split": 1}},
                 protocols=["knn", "linear"])
    report = run_benchmark(ExperimentConfig.from_dict(cfg), tmp_path / "r")
    status = {r["protocol"]: r["status"] for r in report["records"]}
    assert status == {"knn": "ok", "linear": "error"}


def test_benchmark_refuses_other_config_in_same_dir(tmp_path):
    run_benchmark(ExperimentConfig.from_dict(_micro()), tmp_path / "r")
    with pytest.raises(ConfigError):
        run_benchmark(ExperimentConfig.from_dict(_micro(seed=8)), tmp_path / "r")


def test_ssl_pretraining_never_sees_labels(tmp_path, monkeypatch):
    import clab.bench as bench
    seen = []
    real = bench.pretrain

    def spy(data, *a, **kw):
        seen.append(data)
        return real(data, *a, **kw)
    monkeypatch.setattr(bench, "pretrain", spy)
    run_benchmark(ExperimentConfig.from_dict(_micro(variants=["moco"])), tmp_path / "r")
    assert seen and all(not hasattr(d, "labels") for d in seen)
