import json
import struct

import numpy as np
import pytest

from learnedprior.cli import main, member_seeds, select_best
from learnedprior.config import ConfigError, ExperimentConfig, parse_config
from learnedprior.data import Dataset, save_csv
from learnedprior.formats import (FormatError, load_checkpoint, load_prior, load_samples,
                                  prior_from_bytes, prior_to_bytes, read_csv, save_checkpoint,
                                  save_prior, save_samples)
from learnedprior.model import MlpModel, ParamLayout
from learnedprior.pipeline import DownstreamSpec, ensemble_params, group_layout
from learnedprior.prior import LowRankGaussian


def tiny(**over):
    cfg = {
        "seed": 0,
        "task": {"synthetic": {"n_source": 200, "n_target_train": 30, "n_val": 40, "n_test": 60,
                               "n_shifted_test": 60}},
        "model": {"hidden": [8]},
        "pretrain": {"steps": 50},
        "swag": {"snapshot_interval": 5, "max_rank": 3, "total_snapshots": 4},
        "prior": {"lambda_grid": [10, 100]},
        "inference": {"sampler": {"n_steps": 30, "n_chains": 2}, "map": {"n_steps": 30}},
        "eval": {"record_runtime": False},
        "analysis": {"n_seeds": 2, "n_random": 2, "lambdas": [1, 10]},
        "ensemble": {"k": 2},
    }
    cfg.update(over)
    return cfg


@pytest.fixture
def cfg_file(tmp_path):
    def write(**over):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(tiny(**over)))
        return str(p)
    return write


def random_prior(d=12, rank=3, seed=0):
    rng = np.random.default_rng(seed)
    return LowRankGaussian(rng.standard_normal(d), rng.uniform(0.1, 1, d), rng.standard_normal((d, rank)), 7.0)


# --- formats -----------------------------------------------------------------------------

def test_prior_bundle_layout_is_little_endian_and_column_major():
    layout = ParamLayout.from_shapes([("W0", (2, 2)), ("b0", (2,))], {"feature_extractor": ["W0", "b0"]})
    p = LowRankGaussian(np.arange(6.0), np.full(6, 0.5), np.arange(12.0).reshape(6, 2), 3.0)
    raw = prior_to_bytes(p, layout)
    assert raw[:8] == b"BPRIOR1\0"
    assert struct.unpack("<IIId", raw[8:28]) == (1, 6, 2, 3.0)
    body = np.frombuffer(raw[28:28 + 8 * 24], dtype="<f8")
    np.testing.assert_array_equal(body[:6], p.mean)
    np.testing.assert_array_equal(body[12:18], p.deviations[:, 0])
    n = struct.unpack("<I", raw[28 + 8 * 24:32 + 8 * 24])[0]
    assert len(raw) == 32 + 8 * 24 + n
    assert json.loads(raw[-n:]) == layout.to_dict()


def test_prior_bundle_round_trip(tmp_path):
    p = random_prior()
    layout = ParamLayout.from_shapes([("W0", (4, 3))], {"feature_extractor": ["W0"]})
    path = tmp_path / "p.bin"
    save_prior(path, p, layout)
    q, l2 = load_prior(path)
    assert prior_to_bytes(q, l2) == path.read_bytes()
    assert q.scale == 7.0 and l2.to_dict() == layout.to_dict()


def test_prior_bundle_rejects_corruption(tmp_path):
    layout = ParamLayout.from_shapes([("W0", (4, 3))], {})
    raw = prior_to_bytes(random_prior(), layout)
    with pytest.raises(FormatError, match="magic"):
        prior_from_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError, match="truncated"):
        prior_from_bytes(raw[:-5])
    with pytest.raises(FormatError, match="trailing"):
        prior_from_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        prior_to_bytes(random_prior(d=5), layout)


def test_checkpoint_and_samples_round_trip(tmp_path):
    m = MlpModel([3, 4, 2])
    w = np.random.default_rng(1).standard_normal(m.dim)
    save_checkpoint(tmp_path / "c.bin", w, m.layout)
    w2, layout = load_checkpoint(tmp_path / "c.bin")
    assert w2.tobytes() == w.tobytes() and layout.to_dict() == m.layout.to_dict()
    samples = [(0, 1, w), (1, 0, -w)]
    save_samples(tmp_path / "s.bin", samples, m.layout)
    back, _ = load_samples(tmp_path / "s.bin")
    assert [(c, s) for c, s, _ in back] == [(0, 1), (1, 0)]
    assert np.array_equal(back[1][2], -w)


def test_group_layout_rebases_offsets():
    m = MlpModel([3, 4, 5, 2])
    g = group_layout(m.layout)
    assert g.total_dim == m.layout.group_dim("feature_extractor")
    assert [b.offset for b in g.blocks] == [0, 12, 16, 36]


# --- config ---------------------------------------------------------------------------------

def test_defaults_parse():
    cfg = parse_config({})
    assert cfg == ExperimentConfig()
    assert cfg.prior.lam_grid == (1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1e3, 1e4, 1e5)
    assert cfg.inference.sampler.total_samples == 10


@pytest.mark.parametrize("data,where", [
    ({"prior": {"lamda": 3}}, "prior.lamda"),
    ({"bogus": 1}, "bogus"),
    ({"inference": {"sampler": {"stepsize": 0.1}}}, "inference.sampler.stepsize"),
    ({"prior": {"lambda_grid": []}}, "prior"),
    ({"prior": {"lambda": -1}}, "prior"),
    ({"swag": {"max_rank": 1}}, "swag"),
    ({"task": {"synthetic": {"source_classes": 0}}}, "task.synthetic"),
    ({"inference": {"method": "nope"}}, "inference"),
    ({"pretrain": {"steps": "many"}}, "pretrain.steps"),
    ({"task": {"csv": {"source": "missing.csv"}}}, "task.csv.source"),
    ({"analysis": {"ranks": [0, 50]}}, "analysis.ranks"),
])
def test_config_errors_name_the_field(data, where):
    with pytest.raises(ConfigError) as e:
        parse_config(data)
    assert e.value.where == where


def test_csv_task_paths_resolve_relative_to_config(tmp_path):
    ds = Dataset(np.zeros((3, 2)), [0, 1, 0])
    for name in ("s", "a", "b", "c"):
        save_csv(ds, tmp_path / f"{name}.csv")
    cfg = parse_config({"task": {"csv": {"source": "s.csv", "target_train": "a.csv",
                                         "target_val": "b.csv", "target_test": "c.csv"}}}, str(tmp_path))
    assert cfg.synthetic is None and cfg.csv["source"] == str(tmp_path / "s.csv")


# --- orchestration -----------------------------------------------------------------------------

def test_select_best_tie_breaks():
    rows = [{"lambda": 10.0, "head_var": 1.0, "val_error": 0.2},
            {"lambda": 3.0, "head_var": 1.0, "val_error": 0.2},
            {"lambda": 1.0, "head_var": 1.0, "val_error": 0.3}]
    assert select_best(rows) == (3.0, 1.0)
    assert select_best(rows[:1]) == (10.0, 1.0)


def test_identical_member_seeds_collapse_to_one_model():
    rng = np.random.default_rng(0)
    m = MlpModel([2, 3, 2])
    train = Dataset(rng.standard_normal((20, 2)), rng.integers(0, 2, 20))
    fe = m.layout.group_dim("feature_extractor")
    learned = LowRankGaussian(rng.standard_normal(fe), np.ones(fe), np.zeros((fe, 0)))
    from learnedprior.config import MapSection
    spec = DownstreamSpec("map_transfer", MapSection(n_steps=20).sampler())
    same = ensemble_params(m, train, learned, spec, [5, 5, 5])
    assert all(np.array_equal(same[0], w) for w in same)
    assert len(member_seeds(0, 4)) == 4 and member_seeds(0, 4) == member_seeds(0, 4)


def test_pipeline_end_to_end(tmp_path, cfg_file):
    path = cfg_file()
    out = str(tmp_path / "out")
    for cmd in (["pretrain"], ["fit-prior"], ["rescale-sweep"], ["infer"],
                ["infer", "--method", "map_transfer"], ["ensemble", "--k", "1"],
                ["analyze"]):
        assert main([*cmd, "--config", path, "--out-dir", out]) == 0, cmd
    prov, rows = read_csv(tmp_path / "out" / "metrics_bnn_learned.csv")
    assert prov.startswith("# config_hash=") and "seed=0" in prov and "version=" in prov
    assert list(rows[0]) == ["method", "n_train", "seed", "error", "nll", "ece", "runtime_s"]
    assert rows[0]["runtime_s"] == ""
    _, sweep = read_csv(tmp_path / "out" / "lambda_sweep.csv")
    assert [float(r["lambda"]) for r in sweep] == [1.0, 10.0]
    _, ranks = read_csv(tmp_path / "out" / "rank_ablation.csv")
    assert [int(r["rank"]) for r in ranks] == [0, 1, 2, 3]
    _, scan = read_csv(tmp_path / "out" / "scan.csv")
    assert len({r["loss"] for r in scan if float(r["t"]) == 0.0}) == 1
    # a one-member ensemble is a single MAP run
    _, ens = read_csv(tmp_path / "out" / "metrics_ensemble.csv")
    assert ens[0]["method"] == "ensemble_1"
    prior, layout = load_prior(tmp_path / "out" / "prior.bin")
    assert prior.rank == 3 and set(layout.groups) == {"feature_extractor"}
    assert main(["evaluate", "--config", path, "--out-dir", out, "--params",
                 str(tmp_path / "out" / "samples_bnn_learned.bin")]) == 0


def test_zero_step_pretrain_returns_init(tmp_path, cfg_file):
    path = cfg_file(pretrain={"steps": 0})
    assert main(["pretrain", "--config", path, "--out-dir", str(tmp_path)]) == 0
    w, layout = load_checkpoint(tmp_path / "checkpoint.bin")
    m = MlpModel([10, 8, 10])
    assert np.array_equal(w, m.init_params(np.random.default_rng(0)))


def test_separable_source_is_fit_exactly(tmp_path, cfg_file, capsys):
    path = cfg_file(task={"synthetic": {"cluster_sd": 1e-4, "n_source": 200, "source_classes": 4,
                                        "target_classes": 4}},
                    pretrain={"steps": 1500})
    assert main(["pretrain", "--config", path, "--out-dir", str(tmp_path)]) == 0
    assert "source train error 0.0000" in capsys.readouterr().out


def test_exit_codes(tmp_path, cfg_file):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"prior": {"lamda": 1}}))
    assert main(["pretrain", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert main(["fit-prior", "--config", cfg_file(), "--out-dir", str(tmp_path / "nothing")]) == 4
    diverge = cfg_file(pretrain={"steps": 50, "step_size": 1e4})
    assert main(["pretrain", "--config", diverge, "--out-dir", str(tmp_path)]) == 3
    assert main(["pretrain", "--config", cfg_file(), "--out-dir", str(tmp_path), "--threads", "0"]) == 2


def test_reruns_are_byte_identical(tmp_path, cfg_file):
    path = cfg_file()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in (["pretrain"], ["fit-prior"], ["infer"]):
            assert main([*cmd, "--config", path, "--out-dir", str(out)]) == 0
        outs.append(out)
    for f in ("checkpoint.bin", "prior.bin", "samples_bnn_learned.bin", "metrics_bnn_learned.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
