import csv

import numpy as np
import pytest

from spiralnet.architectures import BandCrop, Branch, LayerSpec, NetworkSpec, get_architecture
from spiralnet.dsp.audio import SAMPLE_RATE, AudioBuffer, write_wav
from spiralnet.dsp.cqt import cqt, perceptual_weighting
from spiralnet.nn import init_params, zero_params
from spiralnet.training import (
    AccuracyReport, DatasetError, DatasetManifest, DegenerateBatchError, Entry, ExcerptSampler, SpectrogramCache,
    TrainConfig, TrainingDiverged, accuracy_report, combine_trials, eval_windows, evaluate, normalize_batch,
    read_manifest, repeated_trials, sample_excerpt, should_stop, stopping_epoch, train, write_accuracy_csv,
    write_manifest,
)

SR = SAMPLE_RATE


def tone(freq, seconds, amp=0.3, partials=3):
    t = np.arange(int(round(seconds * SR))) / SR
    return sum(amp / n * np.sin(2 * np.pi * n * freq * t) for n in range(1, partials + 1))


def write(path, x):
    write_wav(path, x, SR, bits=32)
    return path


def tiny_spec(n_classes=2):
    layers = (
        LayerSpec("conv2d", {"dt": 5, "dk": 5, "channels": 4}),
        LayerSpec("relu", {"alpha": 0.3}),
        LayerSpec("maxpool", {"pt": 5, "pk": 3}),
        LayerSpec("flatten"),
    )
    head = (
        LayerSpec("concat"),
        LayerSpec("dropout", {"rate": 0.5}),
        LayerSpec("dense", {"units": 8, "bias": True}),
        LayerSpec("relu", {"alpha": 0.3}),
        LayerSpec("dropout", {"rate": 0.5}),
        LayerSpec("dense", {"units": n_classes, "bias": False}),
        LayerSpec("softmax"),
    )
    return NetworkSpec("tiny", (Branch("2d", BandCrop(0, 96), layers),), head)


@pytest.fixture(scope="module")
def two_class(tmp_path_factory):
    """Low harmonic tones against high harmonic tones; test notes at unseen pitches."""
    root = tmp_path_factory.mktemp("two_class")
    entries = []
    for i, f in enumerate((110.0, 130.0, 146.0, 123.0)):
        entries.append(Entry(write(root / f"low{i}.wav", tone(f, 4.5)), 0, "test" if i == 3 else "train"))
    for i, f in enumerate((1760.0, 2000.0, 2300.0, 1900.0)):
        entries.append(Entry(write(root / f"high{i}.wav", tone(f, 4.5)), 1, "test" if i == 3 else "train"))
    manifest = DatasetManifest(entries, ["low", "high"])
    write_manifest(root / "manifest.csv", manifest)
    return root, manifest


class TestManifest:
    def test_round_trip(self, two_class):
        root, manifest = two_class
        again = read_manifest(root / "manifest.csv")
        assert [(e.path.resolve(), e.label, e.split) for e in again.entries] == [
            (e.path.resolve(), e.label, e.split) for e in manifest.entries
        ]

    def test_missing_column(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,label\na.wav,0\n")
        with pytest.raises(DatasetError, match="split"):
            read_manifest(tmp_path / "m.csv")

    def test_class_absent_from_train(self, tmp_path):
        m = DatasetManifest([Entry(tmp_path / "a.wav", 0, "train"), Entry(tmp_path / "b.wav", 1, "test")], ["a", "b"])
        with pytest.raises(DatasetError, match=r"absent from the train split: \[1\]"):
            m.validate(2)

    def test_leakage(self, tmp_path):
        m = DatasetManifest(
            [Entry(tmp_path / "a.wav", 0, "train"), Entry(tmp_path / "b.wav", 1, "train"), Entry(tmp_path / "a.wav", 0, "test")],
            ["a", "b"],
        )
        with pytest.raises(DatasetError, match="both splits"):
            m.validate(2)

    def test_artist_overlap(self, tmp_path):
        m = DatasetManifest(
            [Entry(tmp_path / "a.wav", 0, "train", "x"), Entry(tmp_path / "b.wav", 1, "train", "y"),
             Entry(tmp_path / "c.wav", 0, "test", "x")],
            ["a", "b"],
        )
        with pytest.raises(DatasetError, match="artists"):
            m.validate(2)

    def test_bad_label_and_split(self, tmp_path):
        with pytest.raises(DatasetError, match="label"):
            DatasetManifest([Entry(tmp_path / "a.wav", 9, "train")], ["a"]).validate(8)
        with pytest.raises(DatasetError, match="split"):
            DatasetManifest([Entry(tmp_path / "a.wav", 0, "dev")], ["a"]).validate(1)


class TestSampling:
    def test_single_three_second_file(self, tmp_path):
        x = tone(440.0, 3.0)
        path = write(tmp_path / "a.wav", x)
        m = DatasetManifest([Entry(path, 0, "train")], ["a"])
        rng = np.random.default_rng(0)
        cache = SpectrogramCache()
        ref = perceptual_weighting(cqt(AudioBuffer(x.astype(np.float32).astype(np.float64)))).values
        for _ in range(3):
            s = sample_excerpt(m, 0, rng, cache)
            assert s.shape == (128, 96)
            np.testing.assert_allclose(s.values, ref, atol=1e-4)

    def test_leading_silence(self, tmp_path):
        x = np.concatenate([np.zeros(3 * SR), tone(440.0, 3.0)])
        path = write(tmp_path / "half.wav", x)
        m = DatasetManifest([Entry(path, 0, "train")], ["a"])
        cache = SpectrogramCache()
        sampler = ExcerptSampler(m, cache)
        rng = np.random.default_rng(1)
        starts = [sampler.candidates[0][rng.integers(len(sampler.candidates[0]))][1] for _ in range(1000)]
        n = 3 * SR
        for s in starts:
            # the window [s*hop, s*hop + 3 s) must reach well into the tone
            assert s * 1024 + n > 3 * SR + n // 2
        assert sampler.sample(0, rng).shape == (128, 96)

    def test_exhausted_class(self, tmp_path):
        path = write(tmp_path / "short.wav", tone(440.0, 2.0))
        m = DatasetManifest([Entry(path, 0, "train")], ["a"])
        with pytest.raises(DatasetError, match="class 0"):
            sample_excerpt(m, 0, np.random.default_rng(0))

    def test_balanced_batches(self, tmp_path):
        entries = [Entry(write(tmp_path / f"{k}.wav", tone(100.0 * (k + 1), 3.5)), k, "train") for k in range(8)]
        sampler = ExcerptSampler(DatasetManifest(entries, [str(k) for k in range(8)]), SpectrogramCache())
        rng = np.random.default_rng(0)
        for _ in range(5):
            x, y = sampler.batch(rng)
            assert x.shape == (32, 128, 96)
            assert np.array_equal(np.bincount(y, minlength=8), np.full(8, 4))


class TestNormalization:
    def test_moments(self):
        x = np.random.default_rng(0).normal(3.0, 7.0, size=(32, 128, 96)).astype(np.float32)
        y = normalize_batch(x).astype(np.float64)
        assert abs(y.mean()) < 1e-6 and abs(y.var() - 1) < 1e-5

    def test_affine_invariance(self):
        x = np.random.default_rng(1).normal(size=(4, 8, 6))
        np.testing.assert_allclose(normalize_batch(2.5 * x - 4.0), normalize_batch(x), atol=1e-12)

    def test_constant(self):
        with pytest.raises(DegenerateBatchError):
            normalize_batch(np.ones((2, 3, 3)))


class TestStopping:
    def test_rule(self):
        assert stopping_epoch([2.0, 1.5, 1.5]) == 3
        assert stopping_epoch([2.0, 1.5, 1.4]) is None
        assert should_stop([1.0, 1.2])
        assert not should_stop([1.0])

    def test_config(self):
        assert TrainConfig().epoch_size // TrainConfig().batch_size == 256
        with pytest.raises(ValueError):
            TrainConfig(epoch_size=100)


@pytest.fixture(scope="module")
def result(two_class):
    _, manifest = two_class
    return train(tiny_spec(), manifest, TrainConfig(seed=3, epoch_size=256, batch_size=16, max_epochs=6))


class TestTrain:
    def test_learnability(self, result):
        # measured with seed 3: 0.091, 0.012, 0.007, 0.004, 0.0006, 0.012
        assert result.history[-1] < 0.1
        first = result.history[:3]
        assert all(b <= a for a, b in zip(first, first[1:]))

    def test_evaluation(self, result, two_class):
        _, manifest = two_class
        report = evaluate(result.spec, result.params, manifest)
        assert report.accuracy == [100.0, 100.0]
        assert report.counts == [2, 2]

    def test_deterministic_checkpoint(self, two_class, tmp_path):
        _, manifest = two_class
        cfg = TrainConfig(seed=5, epoch_size=64, batch_size=16, max_epochs=1)
        train(tiny_spec(), manifest, cfg, checkpoint=tmp_path / "a.ckpt")
        train(tiny_spec(), manifest, cfg, checkpoint=tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, two_class):
        _, manifest = two_class
        with pytest.raises(TrainingDiverged, match="epoch 1"):
            train(tiny_spec(), manifest, TrainConfig(seed=0, lr=1e38, epoch_size=64, batch_size=16, max_epochs=2))

    def test_class_count_mismatch(self, two_class):
        _, manifest = two_class
        with pytest.raises(DatasetError, match="absent"):
            train(tiny_spec(3), manifest, TrainConfig(seed=0, epoch_size=48, batch_size=48, max_epochs=1))


class TestEvaluate:
    def test_window_count(self):
        starts = eval_windows(int(10.5 * SR))
        assert [s / SR for s in starts] == [0.0, 1.5, 3.0, 4.5, 6.0, 7.5]

    def test_zero_model_ties_to_first_class(self, tmp_path):
        entries = []
        for k in range(8):
            entries.append(Entry(write(tmp_path / f"tr{k}.wav", tone(100.0 * (k + 1), 3.0)), k, "train"))
            entries.append(Entry(write(tmp_path / f"te{k}.wav", tone(105.0 * (k + 1), 3.0)), k, "test"))
        spec = get_architecture("2d32")
        report = evaluate(spec, zero_params(spec), DatasetManifest(entries, [str(k) for k in range(8)]))
        assert report.accuracy == [100.0] + [0.0] * 7
        assert report.average == pytest.approx(12.5)

    def test_absent_class(self):
        r = accuracy_report([0, 0, 1], [0, 1, 1], ["a", "b", "c"])
        assert r.accuracy == [50.0, 100.0, None]
        assert r.average == pytest.approx(75.0)

    def test_csv_schema(self, tmp_path):
        r = accuracy_report([0, 1, 1], [0, 1, 0], ["a", "b"])
        write_accuracy_csv(tmp_path / "acc.csv", r)
        rows = list(csv.reader(open(tmp_path / "acc.csv")))
        assert rows[0] == ["class", "accuracy", "stddev", "n_excerpts"]
        assert [r[0] for r in rows[1:]] == ["a", "b", "average"]
        assert float(rows[2][1]) == 50.0

    def test_combine_trials(self):
        a = AccuracyReport(["x", "y"], [80.0, 60.0], [5, 5])
        b = AccuracyReport(["x", "y"], [90.0, 60.0], [5, 5])
        c = combine_trials([a, b])
        assert c.accuracy == [85.0, 60.0] and c.stddev == [5.0, 0.0]
        assert c.average_stddev == pytest.approx(2.5)
        assert len(list(c.rows())) == 3


def test_repeated_trials_same_seed(two_class):
    _, manifest = two_class
    cfg = TrainConfig(seed=1, epoch_size=64, batch_size=16, max_epochs=1)
    report, results = repeated_trials(tiny_spec(), manifest, cfg, 2, seeds=[7, 7])
    assert all(s == 0.0 for s in report.stddev)
    assert results[0].history == results[1].history
    with pytest.raises(ValueError):
        repeated_trials(tiny_spec(), manifest, cfg, 1)


def test_trainer_loss_matches_standalone_forward(two_class):
    """Recorded step loss equals cross-entropy of the same normalized batch through forward()."""
    from spiralnet import tensor as T
    from spiralnet.nn import Network

    _, manifest = two_class
    spec = tiny_spec()
    params = init_params(spec, np.random.default_rng(0))
    sampler = ExcerptSampler(manifest, SpectrogramCache())
    x, y = sampler.batch(np.random.default_rng(0), 16, 2)
    x = normalize_batch(x)
    net = Network(spec, params)
    a = T.cross_entropy(net.forward(x, training=True, rng=np.random.default_rng(4)), y)
    b = T.cross_entropy(Network(spec, params).forward(x, training=True, rng=np.random.default_rng(4)), y)
    assert a == b
