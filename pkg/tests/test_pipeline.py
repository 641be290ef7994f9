import json
import shutil
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llcvision.classifier import STAGE_SVM, svm_score
from llcvision.encoding import feature_dim
from llcvision.errors import (
    DataError,
    DuplicateClassError,
    EmptyClassError,
    InvariantViolation,
    UnknownLabelError,
)
from llcvision.imageio import GrayImage, save_pgm
from llcvision.pipeline import (
    PipelineConfig,
    benchmark_sweep,
    classify_one,
    evaluate,
    evaluate_predictions,
    ingest_dataset,
    load_bundle,
    make_toy_corpus,
    reference_profile,
    save_bundle,
    train_full,
)
from llcvision.pipeline import cli
from llcvision.pipeline.bundle import bundle_from_bytes
from llcvision.pipeline.dataset import toy_texture


def _img(path, value=0):
    path.parent.mkdir(parents=True, exist_ok=True)
    save_pgm(GrayImage(np.full((8, 8), value, dtype=np.uint8)), path)


# ---- ingestion ------------------------------------------------------------

def test_ingest_two_classes(tmp_path):
    for i in range(3):
        _img(tmp_path / "a" / f"{i}.pgm")
    for i in range(2):
        _img(tmp_path / "b" / f"{i}.pgm")
    m = ingest_dataset(tmp_path)
    assert m.class_ids == {"a": 0, "b": 1}
    assert m.counts() == {"train": {"a": 3, "b": 2}}


def test_ingest_unknown_gets_highest_id(tmp_path):
    for i in range(4):
        _img(tmp_path / "unknown_light" / f"{i}.pgm")
    for c in ("zeta", "alpha"):
        _img(tmp_path / c / "0.pgm")
    m = ingest_dataset(tmp_path)
    assert m.class_ids == {"alpha": 0, "zeta": 1, "unknown_light": 2}
    assert m.unknown_names == ["unknown_light"]


def test_ingest_empty_class_names_directory(tmp_path):
    _img(tmp_path / "a" / "0.pgm")
    (tmp_path / "hollow").mkdir()
    with pytest.raises(EmptyClassError, match="hollow"):
        ingest_dataset(tmp_path)


def test_ingest_duplicate_after_normalization(tmp_path):
    _img(tmp_path / "Sedan Car" / "0.pgm")
    _img(tmp_path / "sedan-car" / "0.pgm")
    with pytest.raises(DuplicateClassError):
        ingest_dataset(tmp_path)


def test_ingest_split_layout(tmp_path):
    for split, n in (("train", 3), ("test", 1)):
        for c in ("a", "b"):
            for i in range(n):
                _img(tmp_path / split / c / f"{i}.pgm")
    m = ingest_dataset(tmp_path)
    assert m.counts() == {"train": {"a": 3, "b": 3}, "test": {"a": 1, "b": 1}}
    assert [c for _, c in m.items("test")] == [0, 1]


def test_ingest_missing_root(tmp_path):
    with pytest.raises(DataError):
        ingest_dataset(tmp_path / "absent")


# ---- toy corpus -----------------------------------------------------------

def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.pgm"))}


def test_toy_corpus_layout_and_determinism(tmp_path):
    m = make_toy_corpus(tmp_path / "a", classes=5, per_class=30, seed=7)
    make_toy_corpus(tmp_path / "b", classes=5, per_class=30, seed=7)
    assert len(m.known_names) == 5 and m.unknown_names == ["unknown_heavy", "unknown_light"]
    assert all(n == 30 for n in m.counts()["train"].values())
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert len(a) == 7 * 30 and a == b


def test_toy_canonical_textures_distinct():
    tex = [toy_texture(i, 6, canonical=True) for i in range(6)]
    tex += [toy_texture(0, 6, canonical=True, kind=k) for k in ("unknown_heavy", "unknown_light")]
    for i in range(len(tex)):
        assert tex[i].shape == (96, 96)
        for j in range(i):
            assert not np.array_equal(tex[i], tex[j])


def test_toy_corpus_rejects_zero_per_class(tmp_path):
    with pytest.raises(ValueError):
        make_toy_corpus(tmp_path, classes=3, per_class=0)


def test_toy_corpus_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        make_toy_corpus(blocker / "sub", classes=3, per_class=1)


# ---- training, bundles ----------------------------------------------------

def test_bundle_round_trip(small_bundle, tmp_path):
    path = save_bundle(small_bundle, tmp_path / "m.llcm")
    back = load_bundle(path)
    assert back.to_bytes() == small_bundle.to_bytes()
    assert np.array_equal(back.svm.weights, small_bundle.svm.weights)
    assert np.array_equal(back.codebook.bases, small_bundle.codebook.bases)
    assert back.config == small_bundle.config
    side = json.loads((tmp_path / "m.llcm.json").read_text())
    assert side["codebook_sha256"] == small_bundle.codebook.digest()


def test_bundle_layout(small_bundle):
    b = small_bundle
    assert b.class_names[:3] == ["class_00", "class_01", "class_02"]
    assert b.class_names[3:] == ["unknown_heavy", "unknown_light"]
    assert b.feature_dim == feature_dim(64, b.config.pyramid)
    assert b.mlp1.sizes[-1] == 3 and b.mlp2.sizes[-1] == 5
    assert b.openset.unknown_class_ids == frozenset({3, 4})
    assert b.meta["thresholds_tuned"]


def test_retraining_is_byte_identical(small_corpus, small_cfg, small_bundle):
    assert train_full(small_corpus, small_cfg).to_bytes() == small_bundle.to_bytes()


def test_corrupt_bundle():
    from llcvision.errors import CorruptHeaderError

    with pytest.raises(CorruptHeaderError):
        bundle_from_bytes(b"nope")


def test_tampered_codebook_is_invariant_violation(small_bundle):
    data = bytearray(small_bundle.to_bytes())
    i = data.index(b"LLCB") + 16
    data[i] ^= 0x01
    with pytest.raises(InvariantViolation):
        bundle_from_bytes(bytes(data))


@pytest.fixture(scope="module")
def known_only_corpus(small_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("known_only")
    for split in ("train", "test"):
        for name in small_corpus.known_names:
            shutil.copytree(small_corpus.root / split / name, root / split / name)
    return ingest_dataset(root)


def test_known_only_downgrade(known_only_corpus, small_cfg, small_bundle):
    with pytest.warns(UserWarning, match="open-set routing disabled"):
        b = train_full(known_only_corpus, small_cfg, codebook=small_bundle.codebook)
    assert b.known_only and b.mlp2 is None
    assert b.class_names == known_only_corpus.known_names
    rep = evaluate(b, known_only_corpus)
    assert max(rep.predictions) < 3
    assert set(rep.stages) <= {"svm-argmax", "fallback"}
    assert load_bundle_bytes(b).known_only


def load_bundle_bytes(b):
    return bundle_from_bytes(b.to_bytes())


def test_train_needs_two_known_classes(tmp_path, small_cfg):
    for i in range(3):
        _img(tmp_path / "a" / f"{i}.pgm")
    with pytest.raises(DataError):
        train_full(ingest_dataset(tmp_path), small_cfg)


# ---- evaluation -----------------------------------------------------------

def test_evaluate_stub_perfect_predictions():
    truths = [0, 0, 1, 2, 2, 2]
    rep = evaluate_predictions(truths, truths, ["a", "b", "c"])
    assert np.array_equal(rep.confusion, np.diag([2, 1, 3]))
    assert rep.overall_accuracy == 1.0 and rep.mean_per_class_accuracy == 1.0


def test_evaluate_hand_case():
    rep = evaluate_predictions([0, 0, 1, 1], [0, 0, 0, 1], ["a", "b"])
    assert rep.confusion.tolist() == [[2, 0], [1, 1]]
    assert rep.overall_accuracy == 0.75
    assert rep.per_class_accuracy.tolist() == [1.0, 0.5]
    assert rep.mean_per_class_accuracy == 0.75
    assert rep.confusion_csv() == "true\\pred,a,b\na,2,0\nb,1,1\n"


def test_evaluate_empty_split(small_bundle, tmp_path):
    (tmp_path / "test" / "class_00").mkdir(parents=True)
    _img(tmp_path / "train" / "class_00" / "0.pgm")
    m = ingest_dataset(tmp_path / "train")
    m.splits["test"] = {}
    with pytest.raises(DataError):
        evaluate(small_bundle, m, "test")
    with pytest.raises(DataError):
        evaluate_predictions([], [], ["a"])


def test_evaluate_unknown_label(small_bundle, tmp_path):
    _img(tmp_path / "test" / "martian" / "0.pgm", 50)
    _img(tmp_path / "train" / "martian" / "0.pgm", 50)
    with pytest.raises(UnknownLabelError):
        evaluate(small_bundle, ingest_dataset(tmp_path), "test")


def test_evaluate_report_contents(small_bundle, small_corpus):
    rep = evaluate(small_bundle, small_corpus)
    counts = small_corpus.counts()["test"]
    expect_rows = [counts[n] for n in small_bundle.class_names]
    assert rep.confusion.sum(axis=1).tolist() == expect_rows
    assert rep.overall_accuracy == pytest.approx(np.trace(rep.confusion) / rep.confusion.sum())
    assert set(rep.timing) == {"preprocess", "descriptors", "encoding", "pooling", "classification"}
    assert all(v > 0 for v in rep.timing.values())
    assert rep.overall_accuracy > 0.6
    text = rep.to_text()
    assert "overall accuracy" in text and "encoding" in text
    assert json.loads(json.dumps(rep.to_dict()))["confusion"] == rep.confusion.tolist()


def test_evaluate_deterministic(small_bundle, small_corpus):
    a = evaluate(small_bundle, small_corpus).deterministic_dict()
    b = evaluate(small_bundle, small_corpus).deterministic_dict()
    assert a == b


# ---- classify_one ---------------------------------------------------------

def test_classify_one_training_image(small_bundle, small_corpus):
    from llcvision.classifier import OpenSetConfig

    # reference thresholds: tuning on the toy validation split may push t1 to 1
    op = OpenSetConfig(0.87, 0.93, small_bundle.openset.unknown_class_ids)
    path, label = small_corpus.items("train", ["class_01"])[0]
    res, timing = classify_one(small_bundle, path, op)
    assert res.label == label
    assert res.confidence > 0.87
    assert res.stage == STAGE_SVM
    assert set(timing) == {"preprocess", "descriptors", "encoding", "pooling", "classification"}


def test_classify_one_constant_image(small_bundle, tmp_path):
    p = tmp_path / "flat.pgm"
    save_pgm(GrayImage(np.full((96, 96), 90, dtype=np.uint8)), p)
    a, _ = classify_one(small_bundle, p)
    b, _ = classify_one(small_bundle, p)
    np.testing.assert_array_equal(a.score_vector, small_bundle.svm.biases)
    assert (a.label, a.stage, a.confidence) == (b.label, b.stage, b.confidence)


def test_classify_one_missing_file(small_bundle, tmp_path):
    with pytest.raises(FileNotFoundError):
        classify_one(small_bundle, tmp_path / "missing.pgm")


# ---- benchmark sweep ------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return make_toy_corpus(root, classes=3, splits={"train": 8, "test": 4}, seed=11)


def test_benchmark_rows_in_order_and_duplicates_identical(tiny_corpus, small_cfg):
    sweep = [(64, 16), (64, None), (32, 16), (64, 16)]
    rows, trends = benchmark_sweep(tiny_corpus, small_cfg, sweep)
    assert [(r.M, r.max_comparisons) for r in rows] == sweep
    assert rows[0].accuracy == rows[3].accuracy
    assert all(r.encode_seconds > 0 for r in rows)
    assert "accuracy non-decreasing in comparisons at M=64" in trends
    # directional soft check: exact search should not lose more than 2 points
    if rows[1].accuracy < rows[0].accuracy - 0.02:
        warnings.warn(f"unbounded accuracy {rows[1].accuracy:.3f} below bounded {rows[0].accuracy:.3f}")
    print(f"sweep accuracy bounded={rows[0].accuracy:.3f} unbounded={rows[1].accuracy:.3f}")


def test_benchmark_needs_two_points(tiny_corpus, small_cfg):
    with pytest.raises(ValueError):
        benchmark_sweep(tiny_corpus, small_cfg, [(64, 16)])


# ---- configuration --------------------------------------------------------

def test_config_ini_round_trip(small_cfg, tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(small_cfg.to_ini())
    assert PipelineConfig.load(p) == small_cfg
    unbounded = small_cfg.with_overrides(max_comparisons=-1)
    assert PipelineConfig.from_ini(unbounded.to_ini()).llc.max_comparisons is None


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        PipelineConfig.from_ini("[llc]\nbogus = 1\n")
    with pytest.raises(ValueError):
        PipelineConfig.from_ini("[nowhere]\nx = 1\n")
    with pytest.raises(ValueError):
        PipelineConfig.from_ini("[pipeline]\nllc = 3\n")


def test_config_partial_file_keeps_defaults():
    cfg = PipelineConfig.from_ini("[llc]\nK = 3\n[pipeline]\nseed = 9\n")
    assert cfg.llc.K == 3 and cfg.seed == 9
    assert cfg.descriptor == PipelineConfig().descriptor


def test_overrides():
    cfg = PipelineConfig().with_overrides(seed=4, dict_size=77, knn=2, max_comparisons=40,
                                          t1=0.5, no_preprocess=True)
    assert (cfg.seed, cfg.M, cfg.llc.K, cfg.llc.max_comparisons) == (4, 77, 2, 40)
    assert cfg.openset.t1 == 0.5 and cfg.openset.t2 == 0.93 and not cfg.openset.tune
    assert not cfg.preprocess_enabled


@pytest.mark.parametrize("M,dim", [(1200, 16800), (3600, 50400)])
def test_reference_profiles(M, dim):
    cfg = reference_profile(M)
    assert feature_dim(cfg.M, cfg.pyramid) == dim
    assert cfg.descriptor.step == 5 and cfg.descriptor.bin_sizes == (4, 6)
    assert cfg.llc.K == 5 and cfg.pyramid.grids == (1, 2, 3)
    assert (cfg.openset.t1, cfg.openset.t2) == (0.87, 0.93)


def test_reference_profile_rejects_other_sizes():
    with pytest.raises(ValueError):
        reference_profile(500)
    with pytest.raises(ValueError):
        reference_profile(1200, max_comparisons=50)


# ---- CLI ------------------------------------------------------------------

def test_cli_help_and_usage_errors(capsys):
    assert cli.main(["--help"]) == 0
    assert cli.main([]) == 1
    assert cli.main(["train"]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["benchmark", "x", "--sweep", "64"]) in (1, 2)


def test_cli_data_errors(tmp_path, capsys):
    assert cli.main(["train", str(tmp_path / "absent"), "--out", str(tmp_path / "m")]) == 2
    (tmp_path / "junk.llcm").write_bytes(b"junk")
    assert cli.main(["inspect", str(tmp_path / "junk.llcm")]) == 2
    assert cli.main(["inspect", str(tmp_path / "nothing.llcm")]) == 2


def test_cli_invariant_exit_code(monkeypatch, tmp_path, capsys):
    def boom(args):
        raise InvariantViolation("broken")

    monkeypatch.setattr(cli, "cmd_inspect", boom)
    assert cli.main(["inspect", str(tmp_path / "x")]) == 3


def test_cli_bad_config_is_usage_error(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[llc]\nbogus = 1\n")
    assert cli.main(["train", str(tmp_path), "--out", str(tmp_path / "m"), "--config", str(p)]) == 1


def test_cli_end_to_end(tmp_path, small_cfg, capsys):
    data, out = tmp_path / "data", tmp_path / "out"
    assert cli.main(["make-toy", "--out", str(data), "--classes", "3",
                     "--splits", "train=8,val=4,test=4", "--seed", "5"]) == 0
    ini = tmp_path / "cfg.ini"
    ini.write_text(small_cfg.to_ini())
    model = tmp_path / "m.llcm"
    assert cli.main(["train", str(data), "--out", str(model), "--config", str(ini),
                     "--seed", "2"]) == 0
    capsys.readouterr()
    assert cli.main(["inspect", str(model)]) == 0
    meta = json.loads(capsys.readouterr().out)
    assert meta["config"]["seed"] == 2 and meta["n_known"] == 3

    assert cli.main(["evaluate", str(model), str(data), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert sum(map(sum, report["confusion"])) == 5 * 4
    assert (out / "confusion.csv").read_text().startswith("true\\pred,")
    assert "overall accuracy" in (out / "report.txt").read_text()
    assert cli.main(["evaluate", str(model), str(data), "--known-only", "--t1", "0.5"]) == 0

    img = sorted((data / "test" / "class_00").iterdir())[0]
    capsys.readouterr()
    assert cli.main(["classify", str(model), str(img)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert set(res) >= {"label", "confidence", "stage", "scores", "class_name", "timing"}
    assert cli.main(["classify", str(model), str(tmp_path / "gone.pgm")]) == 2


# ---- invariants -----------------------------------------------------------

labelled = st.integers(2, 8).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), min_size=1, max_size=200),
    )
)


@given(labelled)
def test_prop_confusion_rows_and_trace(case):
    n, pairs = case
    truths, preds = [t for t, _ in pairs], [p for _, p in pairs]
    rep = evaluate_predictions(truths, preds, [f"c{i}" for i in range(n)])
    assert rep.confusion.sum(axis=1).tolist() == np.bincount(truths, minlength=n).tolist()
    assert rep.confusion.sum() == len(pairs)
    assert rep.overall_accuracy == np.trace(rep.confusion) / len(pairs)
    assert 0.0 <= rep.overall_accuracy <= 1.0
    present = np.bincount(truths, minlength=n) > 0
    assert np.isnan(rep.per_class_accuracy[~present]).all()
    assert 0.0 <= rep.mean_per_class_accuracy <= 1.0


@given(st.integers(1, 5000), st.lists(st.integers(1, 6), min_size=1, max_size=4))
def test_prop_feature_dim_formula(M, grids):
    from llcvision.encoding import CodeSet, PyramidConfig, spm_pool

    pyr = PyramidConfig(tuple(grids))
    f = spm_pool(CodeSet.from_pairs([]), 12, 12, M, pyr)
    assert f.size == feature_dim(M, pyr) == M * sum(g * g for g in grids)


def test_t1_zero_reproduces_stage1_on_test_split(small_bundle, small_corpus):
    from llcvision.classifier import OpenSetConfig

    op = OpenSetConfig(0.0, small_bundle.openset.t2, small_bundle.openset.unknown_class_ids)
    open_rep = evaluate(small_bundle, small_corpus, openset=op)
    stage1 = evaluate(small_bundle, small_corpus, open_set=False)
    assert open_rep.predictions == stage1.predictions
    assert set(open_rep.stages) == {STAGE_SVM}


def test_pipeline_feature_dim_matches_bundle(small_bundle, small_corpus):
    from llcvision.imageio import load_gray
    from llcvision.pipeline import FeatureExtractor

    fx = FeatureExtractor(small_bundle.config, small_bundle.codebook, small_bundle.tree)
    f = fx(load_gray(small_corpus.items("test")[0][0]))
    assert f.shape == (fx.dim,) == (small_bundle.feature_dim,)
    np.testing.assert_allclose(np.linalg.norm(f), 1.0)
    assert svm_score(small_bundle.svm, f).shape == (3,)
