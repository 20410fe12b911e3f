import builtins
import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from adc_cyclegan import data as data_mod
from adc_cyclegan import pipeline
from adc_cyclegan.cli import main
from adc_cyclegan.clustering import assign_cluster, extract_features
from adc_cyclegan.config import RunConfig, load_config
from adc_cyclegan.data import ingest, load_domain, make_toy_data, read_png
from adc_cyclegan.networks import Generator
from adc_cyclegan.trainer import TrainConfig, train_cluster


TINY = dict(image_size=32, feature_side=8, gen_width=4, disc_width=4, n_res=2, epochs=1, train_fraction=0.75)


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_data(root, n=16, seed=0, side=32)
    return root


def make_cfg(toy_root, out, **kw):
    base = dict(data_x=str(toy_root / "X"), data_y=str(toy_root / "Y"), pairs=str(toy_root / "pairs.csv"),
                output_dir=str(out), checkpoint_dir=str(Path(out) / "ckpt"), K=2, **TINY)
    base.update(kw)
    return RunConfig(**base)


def test_cluster_k1_and_byte_reproducible(toy_root, tmp_path):
    cfg = make_cfg(toy_root, tmp_path / "a", K=1)
    pipeline.cmd_cluster(cfg)
    assert (tmp_path / "a/cluster_counts.csv").read_text().splitlines()[1] == "0,12,12,"
    cfg2 = make_cfg(toy_root, tmp_path / "b", K=1)
    pipeline.cmd_cluster(cfg2)
    assert (tmp_path / "a/cluster_index.json").read_bytes() == (tmp_path / "b/cluster_index.json").read_bytes()


def test_cluster_counts_match_toy_construction(toy_root, tmp_path):
    cfg = make_cfg(toy_root, tmp_path)
    index = pipeline.cmd_cluster(cfg)
    splits = ingest(cfg.manifest())
    with open(toy_root / "groups.csv") as fh:
        group = {r["id"]: r["group"] for r in csv.DictReader(fh)}
    labels = pipeline.route(splits.train_x.images, splits.train_x.ids, index)
    by_cluster = {}
    for image_id, k in zip(splits.train_x.ids, labels):
        by_cluster.setdefault(int(k), set()).add(group[image_id])
    assert sorted(len(v) for v in by_cluster.values()) == [1, 1]
    rows = list(csv.DictReader(io.StringIO((tmp_path / "cluster_counts.csv").read_text())))
    for r in rows:
        k = int(r["cluster"])
        assert int(r["count_x"]) == int((labels == k).sum())


def test_train_needs_index(toy_root, tmp_path):
    with pytest.raises(pipeline.PipelineError, match="cluster command"):
        pipeline.cmd_train(make_cfg(toy_root, tmp_path))


def test_train_never_reads_pairing_map(toy_root, tmp_path, monkeypatch):
    cfg = make_cfg(toy_root, tmp_path)
    pipeline.cmd_cluster(cfg)
    opened = []
    real_open = builtins.open

    def spy(file, *a, **k):
        opened.append(str(file))
        return real_open(file, *a, **k)

    def forbidden(*a, **k):
        raise AssertionError("pairing map read during training")

    monkeypatch.setattr(builtins, "open", spy)
    monkeypatch.setattr(data_mod, "read_pairing_map", forbidden)
    monkeypatch.setattr(pipeline, "read_pairing_map", forbidden)
    log = []
    results = pipeline.cmd_train(cfg, access_log=log)
    assert not any("pairs.csv" in f for f in opened)
    assert len(results) == 2
    for k in range(2):
        assert (tmp_path / f"ckpt/cluster_{k}/final/manifest.json").is_file()
        assert (tmp_path / f"ckpt/cluster_{k}/history.csv").is_file()
    # routing consistency: each logged image belongs to the cluster that trained on it
    splits = ingest(cfg.manifest())
    index = pipeline.load_index(cfg)
    route_x = dict(zip(splits.train_x.ids, pipeline.route(splits.train_x.images, splits.train_x.ids, index)))
    route_y = dict(zip(splits.train_y.ids, pipeline.route(splits.train_y.images, splits.train_y.ids, index)))
    for k, dom, image_id in log:
        assert (route_x if dom == "x" else route_y)[image_id] == k


@pytest.fixture(scope="module")
def trained(toy_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    cfg = make_cfg(toy_root, out)
    pipeline.cmd_cluster(cfg)
    pipeline.cmd_train(cfg)
    return cfg


def test_synthesize_deterministic_and_routed(trained, toy_root, tmp_path):
    cfg = trained
    r1 = pipeline.cmd_synthesize(cfg, "x2y", toy_root / "X", toy_root / "Y", out_dir=tmp_path / "s1")
    pipeline.cmd_synthesize(cfg, "x2y", toy_root / "X", out_dir=tmp_path / "s2")
    for image_id in r1.ids:
        assert (tmp_path / "s1" / image_id).read_bytes() == (tmp_path / "s2" / image_id).read_bytes()
        assert read_png(tmp_path / "s1" / image_id).shape == (32, 32)
        assert (tmp_path / "s1/errors" / image_id).is_file()
    assert not (tmp_path / "s2/errors").exists()
    index = pipeline.load_index(cfg)
    data = load_domain(toy_root / "X", 32)
    feats = extract_features(data.images, index.extractor, data.ids)
    with open(tmp_path / "s1/routing.csv") as fh:
        routing = {r["id"]: int(r["cluster"]) for r in csv.DictReader(fh)}
    for i, image_id in enumerate(data.ids):
        assert routing[image_id] == assign_cluster(feats[i], index)


def test_error_map_of_image_against_itself_is_black(trained, toy_root, tmp_path):
    a = np.random.default_rng(0).uniform(0, 1, (8, 8))
    assert np.all(pipeline.error_map(a, a) == 0)
    pipeline.cmd_synthesize(trained, "y2x", toy_root / "Y", out_dir=tmp_path / "s")
    # feed the outputs back as their own ground truth
    res = pipeline.cmd_synthesize(trained, "y2x", toy_root / "Y", truth_dir=tmp_path / "s", out_dir=tmp_path / "t")
    for image_id in res.ids[:4]:
        assert read_png(tmp_path / "t/errors" / image_id).max() <= 1  # 8-bit quantization of the truth


def test_synthesize_missing_checkpoint_names_cluster(trained, toy_root, tmp_path):
    cfg = trained.replace(checkpoint_dir=str(tmp_path / "empty"))
    with pytest.raises(pipeline.PipelineError, match="cluster 0"):
        pipeline.cmd_synthesize(cfg, "x2y", toy_root / "X", out_dir=tmp_path / "o")


def test_evaluate_requires_pairs(toy_root, tmp_path):
    with pytest.raises(pipeline.PipelineError, match="evaluation"):
        pipeline.cmd_evaluate(make_cfg(toy_root, tmp_path, pairs=""), [1])
    with pytest.raises(pipeline.PipelineError, match="evaluation"):
        pipeline.cmd_evaluate(make_cfg(toy_root, tmp_path, pairs=str(tmp_path / "none.csv")), [1])


def test_evaluate_single_seed(toy_root, tmp_path):
    cfg = make_cfg(toy_root, tmp_path)
    reports = pipeline.cmd_evaluate(cfg, [1])
    assert set(reports) == {"x2y", "y2x", "combined"}
    for key, rep in reports.items():
        assert all(v == 0.0 for v in rep.sd.values())
        data = json.loads((tmp_path / "eval" / f"{key}.json").read_text())
        assert data["ssim_sd"] == 0.0 and len(data["runs"]) == 1
    # reuse flag loads the tagged checkpoints instead of retraining
    again = pipeline.cmd_evaluate(cfg.replace(reuse_checkpoints=True), [1])
    assert again["combined"].mean == reports["combined"].mean


def test_evaluate_perfect_candidates(trained):
    splits = ingest(trained.manifest())
    index = pipeline.load_index(trained)

    class Identity:
        def translate(self, images, direction):
            return images

    pairs = {i: i for i in splits.test_x.ids + splits.test_y.ids}
    # on the toy data X and Y differ, so map truth to the input domain itself
    cfg = trained.replace(data_y=trained.data_x)
    splits.test_y = splits.test_x
    res = pipeline.evaluate_bundles(cfg, [Identity()] * index.K, index, splits, pairs)
    assert res["x2y"]["mae"] == 0.0 and res["x2y"]["psnr"] == 100.0
    assert res["x2y"]["ssim"] == pytest.approx(1.0, abs=1e-9)


def test_parse_seeds():
    assert pipeline.parse_seeds("1,2, 3") == [1, 2, 3]
    with pytest.raises(pipeline.PipelineError):
        pipeline.parse_seeds("a,b")


def test_ablation_grid_structure():
    variants = pipeline.ablation_variants()
    assert len(variants) == 8
    base = RunConfig(K=4, beta_dc=0.5)
    off = variants[0].apply(base)
    assert (off.beta_dc, off.use_cbam, off.K) == (0.0, False, 1)
    on = variants[-1].apply(base)
    assert (on.beta_dc, on.use_cbam, on.K) == (0.5, True, 4)
    assert len({(v.dual_contrast, v.cbam, v.clustering) for v in variants}) == 8


def test_ablation_inventories_differ_only_by_cbam():
    base = RunConfig(**{k: v for k, v in TINY.items() if k != "train_fraction"})
    inv = {}
    for v in pipeline.ablation_variants():
        g = Generator(v.apply(base).generator_config(), np.random.default_rng(0))
        inv[v.name] = set(g.params)
    plain, att = inv["CycleGAN wo/ clustering"], inv["A-cycleGAN wo/ clustering"]
    assert att - plain and all(".cbam." in k for k in att - plain) and not plain - att
    assert inv["DC-cycleGAN w/ clustering"] == plain and inv["ADC-cycleGAN w/ clustering"] == att


def test_all_off_variant_is_vanilla_path(toy_root, tmp_path):
    cfg = make_cfg(toy_root, tmp_path, seed=2)
    off = pipeline.ablation_variants()[0].apply(cfg)
    splits = ingest(off.manifest())
    index = pipeline.fit_index(off, splits)
    (bundle, hist), = pipeline.cmd_train(off, splits, index, seed=2, checkpoint_dir="")
    vanilla_cfg = TrainConfig(epochs=1, seed=2, weights=off.train_config().weights)
    assert vanilla_cfg.weights.beta_dc == 0.0
    ref, ref_hist = train_cluster(splits.train_x, splits.train_y, off.generator_config(),
                                  off.discriminator_config(), vanilla_cfg)
    assert [repr(sorted(r.items())) for r in hist] == [repr(sorted(r.items())) for r in ref_hist]
    assert all(r["dc_term"] == 0.0 for r in hist if r["unit_kind"] == "D")
    assert bundle.G.cbam_blocks() == []


def test_cmd_ablate_report(toy_root, tmp_path):
    cfg = make_cfg(toy_root, tmp_path)
    text, summary = pipeline.cmd_ablate(cfg)
    assert len(summary) == 8
    rows = [line for line in text.splitlines() if "clustering" in line and "(" in line]
    assert len(rows) == 8
    assert json.loads((tmp_path / "ablation.json").read_text()).keys() == summary.keys()
    assert summary["CycleGAN wo/ clustering"]["K"] == 1 and summary["CycleGAN wo/ clustering"]["beta_dc"] == 0.0


def test_cli_end_to_end(tmp_path, capsys):
    assert main(["make-toy-data", "--out", str(tmp_path / "d"), "--n", "12", "--seed", "1", "--side", "32"]) == 0
    lines = ["data_x = d/X", "data_y = d/Y", "pairs = d/pairs.csv", "output_dir = out", "checkpoint_dir = out/ckpt",
             "K = 1"] + [f"{k} = {v}" for k, v in TINY.items()]
    (tmp_path / "run.cfg").write_text("\n".join(lines) + "\n")
    cfg_path = str(tmp_path / "run.cfg")
    assert main(["cluster", "--config", cfg_path]) == 0
    assert main(["train", "--config", cfg_path]) == 0
    assert main(["synthesize", "--config", cfg_path, "--direction", "y2x", "--input", str(tmp_path / "d/Y")]) == 0
    assert (tmp_path / "out/synth/y2x/routing.csv").is_file()
    assert main(["evaluate", "--config", cfg_path, "--seeds", "1"]) == 0
    assert "combined" in capsys.readouterr().out
    assert load_config(cfg_path).K == 1


def test_cli_reports_errors(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("nope = 1\n")
    assert main(["cluster", "--config", str(tmp_path / "bad.cfg")]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert "not found" in capsys.readouterr().err
