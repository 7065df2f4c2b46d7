import json
import multiprocessing as mp

import numpy as np
import pytest

from kilnseg.cli import main, run_id
from kilnseg.errors import ConfigError, LogCorruptError, NonFiniteError
from kilnseg.metrics import running_variance
from kilnseg.models import ModelConfig, build_pspnet, build_unet_mini
from kilnseg.pipeline.config import RunConfig, load_config, parse_config_text
from kilnseg.pipeline.evaluate import evaluate_predictions, format_table, write_report
from kilnseg.pipeline.log import append_record, append_records, read_log
from kilnseg.pipeline.stream import run_stream
from kilnseg.pipeline.training import fit, occlusion_fbeta, train_segmenter
from kilnseg.synthetic import SLAG, SceneParams, load_pairs, make_dataset, make_stream
from kilnseg.tensor import Tensor

# ------------------------------------------------------------------- config


def test_model_defaults():
    assert (RunConfig(model="pspnet").loss, RunConfig(model="pspnet").weighting) == ("ce", "isrv")
    assert (RunConfig(model="unet").loss, RunConfig(model="unet").weighting) == ("dice", "isv")
    assert RunConfig().window == 60 and RunConfig().threshold == 0.5
    assert RunConfig(model="pspnet-lstm").epochs == 80 and RunConfig(model="unet", epochs=3).epochs == 3


def test_file_then_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# monitor\nmodel = unet\nwindow = 30  # shorter\nlr = 0.01\ndata = none\n")
    cfg = load_config(path, window=12, seed=None)
    assert (cfg.model, cfg.window, cfg.lr, cfg.data) == ("unet", 12, 0.01, None)


@pytest.mark.parametrize("text", ["windw = 3", "window = many", "window"])
def test_bad_config_lines_rejected(text):
    with pytest.raises(ConfigError, match=":1:|window"):
        parse_config_text(text)


@pytest.mark.parametrize("bad", [dict(model="resnet"), dict(loss="hinge"), dict(window=1),
                                 dict(threshold=1.5), dict(model="discriminator", loss="dice")])
def test_invalid_values_rejected(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_run_id_ignores_output_dir():
    a, b = RunConfig(out="x"), RunConfig(out="y")
    assert run_id(a, "stream") == run_id(b, "stream")
    assert run_id(a, "stream") != run_id(a.with_(seed=1), "stream")


# ---------------------------------------------------------------------- log


def test_log_round_trip(tmp_path):
    path = tmp_path / "log.jsonl"
    recs = [{"i": i, "v": i / 3} for i in range(5)]
    append_record(path, recs[0])
    assert append_records(path, recs[1:]) == 4
    assert read_log(path) == recs


def test_log_appends_never_rewrite(tmp_path):
    path = tmp_path / "log.jsonl"
    append_records(path, [{"a": 1}, {"b": 2}])
    before = path.read_bytes()
    append_record(path, {"c": 3})
    assert path.read_bytes().startswith(before)


def test_log_rejects_nan(tmp_path):
    with pytest.raises(ValueError):
        append_record(tmp_path / "log.jsonl", {"v": float("nan")})


@pytest.mark.parametrize("tail, line, reason", [(b'{"x": 1}', 3, "truncated"), (b"{oops}\n", 3, "JSON"),
                                                (b"[1, 2]\n", 3, "object")])
def test_corrupt_log_names_the_line(tmp_path, tail, line, reason):
    path = tmp_path / "log.jsonl"
    append_records(path, [{"a": 1}, {"b": 2}])
    with path.open("ab") as fh:
        fh.write(tail)
    with pytest.raises(LogCorruptError, match=reason) as info:
        read_log(path)
    assert info.value.line_number == line


def _writer(path, run, n):
    for i in range(n):
        append_record(path, {"run_id": run, "i": i, "pad": "x" * 500})


def test_concurrent_writers_keep_every_record(tmp_path):
    path = tmp_path / "log.jsonl"
    runs = [f"run{k}" for k in range(4)]
    procs = [mp.get_context("fork").Process(target=_writer, args=(path, r, 50)) for r in runs]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    recs = read_log(path)
    assert len(recs) == 200
    for r in runs:
        assert [x["i"] for x in recs if x["run_id"] == r] == list(range(50))


# ------------------------------------------------------------------- stream


class _Out:
    def __init__(self, data):
        self.data = data


class Gate:
    """Discriminator stand-in with scripted probabilities."""

    def __init__(self, probs):
        self.probs = iter(probs)

    def forward(self, x):
        return _Out(np.array([next(self.probs)]))


def _one_hot(mask):
    return (np.arange(4)[:, None, None] == mask[None]).astype(np.float64)[None]


class Oracle:
    """Segmenter stand-in that returns the given masks in call order."""

    def __init__(self, masks):
        self.masks = iter(masks)

    def forward(self, x):
        return _Out(_one_hot(next(self.masks)))


class TemporalOracle(Oracle):
    def features(self, x):
        return x

    def forward_features(self, prev, cur):
        return self.forward(cur)


SMALL = SceneParams(height=32, width=32, seed=5, occlusion_prob=0.5)


@pytest.fixture(scope="module")
def small_stream():
    return list(make_stream(SMALL, 40))


def test_gate_is_sound(small_stream):
    probs = [0.9 if f.occluded else 0.1 for f in small_stream]
    clean = [f.mask for f in small_stream if not f.occluded]
    records, summary = run_stream(small_stream, Gate(probs), Oracle(clean), window=5)
    assert len(records) == len(small_stream)
    for rec, frame in zip(records, small_stream):
        assert rec.filtered == frame.occluded
        assert (rec.fraction is None) == rec.filtered
    assert summary["leaked_occluded"] == 0 and summary["models"]["framewise"]["outliers"] == 0


def test_all_occluded_stream_yields_no_fractions(small_stream):
    records, summary = run_stream(small_stream, Gate([1.0] * 40), Oracle([]), window=5)
    assert all(r.filtered and r.fraction is None for r in records)
    assert summary["unfiltered"] == 0 and summary["models"]["framewise"]["median_running_variance"] is None


def test_static_scene_has_zero_variance():
    frames = list(make_stream(SMALL.with_(growth_rate=0.0, jitter=0.0, occlusion_prob=0.0), 30))
    records, summary = run_stream(frames, Gate([0.0] * 30), Oracle([f.mask for f in frames]), window=10)
    assert [r.running_variance for r in records[:9]] == [None] * 9
    assert all(r.running_variance == 0.0 for r in records[9:])


def test_logged_variance_matches_batch_recomputation(small_stream):
    rng = np.random.default_rng(0)
    noisy = [np.where(rng.random(f.mask.shape) < 0.1, SLAG, f.mask) for f in small_stream]
    records, _ = run_stream(small_stream, Gate([0.0] * 40), Oracle(noisy), window=7)
    logged = [r.running_variance for r in records if r.running_variance is not None]
    expected = running_variance([r.fraction for r in records], 7)
    assert len(logged) == len(expected) == 34
    np.testing.assert_allclose(logged, expected, rtol=0, atol=1e-12)


def test_temporal_pairs_with_last_unfiltered_frame(small_stream):
    probs = [0.1, 0.9, 0.9, 0.1, 0.1] + [0.1] * 35
    masks = [f.mask for f, p in zip(small_stream, probs) if p < 0.5]
    records, _ = run_stream(small_stream, Gate(probs), temporal=TemporalOracle(masks), window=5)
    deltas = [r.delta for r in records[:5]]
    assert deltas == [0.0, None, None, 30.0, 10.0]


def test_short_stream_rejected(small_stream):
    with pytest.raises(ConfigError):
        run_stream(small_stream[:4], Gate([0.0] * 4), Oracle([]), window=5)


# --------------------------------------------------------------- evaluation


def test_ground_truth_scores_perfectly(small_stream):
    masks = [f.mask for f in small_stream]
    report = evaluate_predictions(masks, masks, "truth")
    assert report.iou == (1.0, 1.0, 1.0, 1.0) and report.miou == 1.0 and report.accuracy == 1.0


def test_report_lists_four_classes(tmp_path, small_stream):
    masks = [f.mask for f in small_stream]
    report = evaluate_predictions([np.zeros_like(m) for m in masks], masks, "zeros")
    table = format_table([report])
    header = [c.strip() for c in table.splitlines()[0].split(" | ")]
    assert header == ["Model", "background", "slag", "camera edge", "wall", "mIoU", "Accuracy"]
    csv_path, txt_path = write_report(report, tmp_path)
    assert len(csv_path.read_text().splitlines()) == 1 + 4 + 2
    assert "zeros" in txt_path.read_text()


# ----------------------------------------------------------------- training


@pytest.fixture(scope="module")
def tiny_pairs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs")
    make_dataset(SceneParams(seed=3), root, n_pairs=40, split_ratios=(0.6, 0.2, 0.2))
    return load_pairs(root, "train"), load_pairs(root, "val")


def _train(pairs, epochs=3, seed=0, build=build_pspnet):
    train, val = pairs
    model = build(ModelConfig(), seed=seed)
    result = train_segmenter(model, train.cur_images, train.cur_masks, val.cur_images, val.cur_masks,
                             epochs=epochs, seed=seed, batch_size=8)
    return model, result


def test_training_is_deterministic(tiny_pairs):
    (a, ra), (b, rb) = _train(tiny_pairs, 2, build=build_unet_mini), _train(tiny_pairs, 2, build=build_unet_mini)
    assert ra.history == rb.history
    for key, value in a.state_arrays().items():
        np.testing.assert_array_equal(value, b.state_arrays()[key])


def test_training_loss_decreases(tiny_pairs):
    _, result = _train(tiny_pairs, 3)
    losses = [h["train_loss"] for h in result.history]
    assert losses[0] > losses[1] > losses[2]


def test_non_finite_loss_aborts():
    model = build_unet_mini(ModelConfig(), seed=0)

    def step_loss(idx, rng):
        return Tensor(np.array(np.nan)) + next(iter(model.params.values())).sum() * 0.0

    with pytest.raises(NonFiniteError, match="epoch 1, batch 0"):
        fit(model, 4, step_loss, lambda: 0.0, epochs=1, batch_size=2)


class FixedScores:
    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=float)

    def forward(self, x):
        return _Out(self.scores[: x.shape[0]])


def test_fbeta_hand_value():
    # 2 true positives, 1 false positive, 2 misses: P = 2/3, R = 1/2
    scores = [0.9, 0.8, 0.7, 0.1, 0.2, 0.3]
    labels = [True, True, False, True, True, False]
    images = np.zeros((6, 8, 8, 3), np.uint8)
    p, r = 2 / 3, 1 / 2
    expected = 1.25 * p * r / (0.25 * p + r)
    assert abs(occlusion_fbeta(FixedScores(scores), images, labels) - expected) < 1e-12
    assert occlusion_fbeta(FixedScores([0.0] * 6), images, labels) == 0.0


# ---------------------------------------------------------------------- CLI


def test_cli_reports_missing_checkpoint(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "none.kseg"), "--data", str(tmp_path)])
    assert code == 2
    assert capsys.readouterr().err.startswith("ERROR CheckpointError:")


def test_cli_requires_data(capsys):
    assert main(["train", "--model", "unet"]) == 2
    assert "ERROR DatasetError: --data is required" in capsys.readouterr().err


def test_cli_bad_flag_value_rejected(capsys):
    assert main(["train", "--window", "1", "--data", "."]) == 2
    assert "ERROR ConfigError" in capsys.readouterr().err


def test_cli_end_to_end_smoke(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["generate", "--out", out, "--n-pairs", "10", "--occlusion-frames", "30",
                 "--stream-frames", "25"]) == 0
    common = ["--data", out, "--out", out, "--epochs", "1", "--batch-size", "8"]
    assert main(["train", "--model", "pspnet", *common]) == 0
    assert main(["train", "--model", "pspnet-lstm", "--base", f"{out}/pspnet.kseg", *common]) == 0
    assert main(["train", "--model", "discriminator", *common]) == 0
    assert main(["eval", "--checkpoint", f"{out}/pspnet.kseg", "--data", out, "--out", out]) == 0
    capsys.readouterr()
    args = ["stream", "--stream", f"{out}/streams/removal", "--discriminator", f"{out}/discriminator.kseg",
            "--framewise", f"{out}/pspnet.kseg", "--temporal", f"{out}/pspnet-lstm.kseg", "--window", "5"]
    assert main([*args, "--out", f"{out}/s1"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert set(result) >= {"log", "summary", "framewise", "temporal"}
    assert main([*args, "--out", f"{out}/s2"]) == 0
    a = (tmp_path / "s1" / "stream_log.jsonl").read_bytes()
    assert a == (tmp_path / "s2" / "stream_log.jsonl").read_bytes()
    assert len(a.splitlines()) == 2 * 25
    assert (tmp_path / "eval_pspnet_test.csv").exists()
    assert (tmp_path / "pspnet_history.csv").read_text().startswith("epoch,train_loss,val_slag_iou")
