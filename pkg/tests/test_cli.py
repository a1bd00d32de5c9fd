import json

import numpy as np
import pytest

from wavesep import cli
from wavesep.checkpoint import Checkpoint, save_checkpoint
from wavesep.dataset import read_wav, write_stem_directory, write_wav
from wavesep.model import Model, ModelConfig
from wavesep.synthetic import singing_voice_track

VOICE = ModelConfig(stacks=1, dilation_depth=2, filters=3, target_field=160, num_outputs=1, post_filters=(4, 3))
TINY_SET = ["stacks=1", "dilation_depth=2", "filters=3", "target_field=160", "num_outputs=1",
            "post_filters=4,3", "batch_size=2", "steps_per_epoch=2", "max_epochs=3", "validation_segments=3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def overrides(values):
    out = []
    for v in values:
        out += ["-s", v]
    return out


@pytest.fixture(scope="module")
def voice_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "voice.wssm"
    save_checkpoint(path, Checkpoint.capture(Model.init(VOICE, seed=2)))
    return path


@pytest.fixture(scope="module")
def voice_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    tracks = [singing_voice_track(n, 0.5, seed=i) for i, n in enumerate(["a", "b", "c"])]
    write_stem_directory(root, tracks, write_mixture=False)
    (root / "dataset.json").write_text(json.dumps({"train": ["a", "b"], "validation": ["c"]}))
    return root


class TestInspect:
    def test_table1(self, capsys):
        assert run("inspect", "--table1") == 0
        out = capsys.readouterr().out
        assert "2053 samples / 128 ms" in out and "8191 samples / 512 ms" in out

    def test_single(self, capsys):
        assert run("inspect", "-s", "stacks=4", "-s", "filters=64") == 0
        assert "8191 samples / 512 ms" in capsys.readouterr().out

    def test_json(self, tmp_path):
        assert run("inspect", "--table1", "--json", tmp_path / "t.json") == 0
        rows = json.loads((tmp_path / "t.json").read_text())
        assert [r["receptive_field_samples"] for r in rows] == [2053, 4099, 6145, 8191, 10237]

    def test_zero_stacks_exit_2(self, capsys):
        assert run("inspect", "-s", "stacks=0") == 2
        assert "stacks" in capsys.readouterr().err

    def test_unknown_key_exit_2(self):
        assert run("inspect", "-s", "bogus=1") == 2

    def test_argparse_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            run("inspect", "--nope")
        assert exc.value.code == 2


class TestSeparate:
    def test_lengths(self, tmp_path, voice_ckpt):
        mix = singing_voice_track("m", 3.0, seed=9).mixture
        write_wav(tmp_path / "mix.wav", mix, 16000)
        assert run("separate", "--checkpoint", voice_ckpt, "--input", tmp_path / "mix.wav",
                   "--output", tmp_path / "out") == 0
        names = sorted(p.name for p in (tmp_path / "out").iterdir())
        assert names == ["accompaniment.wav", "vocals.wav"]
        for n in names:
            x, rate = read_wav(tmp_path / "out" / n)
            assert len(x) == 48000 and rate == 16000

    def test_wrong_rate(self, tmp_path, voice_ckpt):
        write_wav(tmp_path / "mix.wav", np.zeros(100), 44100)
        assert run("separate", "--checkpoint", voice_ckpt, "--input", tmp_path / "mix.wav",
                   "--output", tmp_path / "out") == 2

    def test_corrupt_checkpoint_exit_5(self, tmp_path, voice_ckpt):
        raw = bytearray(voice_ckpt.read_bytes())
        raw[50] ^= 0xFF
        (tmp_path / "bad.wssm").write_bytes(bytes(raw))
        write_wav(tmp_path / "mix.wav", np.zeros(100), 16000)
        assert run("separate", "--checkpoint", tmp_path / "bad.wssm", "--input", tmp_path / "mix.wav",
                   "--output", tmp_path / "out") == 5

    def test_missing_input_exit_5(self, tmp_path, voice_ckpt):
        assert run("separate", "--checkpoint", voice_ckpt, "--input", tmp_path / "absent.wav",
                   "--output", tmp_path / "out") == 5


class TestTrain:
    def test_deterministic_history(self, tmp_path, voice_dataset):
        for out in ("r1", "r2"):
            assert run("train", "--dataset", voice_dataset, "--output", tmp_path / out,
                       *overrides(TINY_SET)) == 0
        a = (tmp_path / "r1" / "history.csv").read_text()
        assert a == (tmp_path / "r2" / "history.csv").read_text()
        assert a.splitlines()[0] == "epoch,train_loss,val_loss"
        assert (tmp_path / "r1" / "best.wssm").read_bytes() == (tmp_path / "r2" / "best.wssm").read_bytes()
        assert (tmp_path / "r1" / "history.png").read_bytes()[:4] == b"\x89PNG"

    def test_missing_dataset_exit_3(self, tmp_path):
        assert run("train", "--dataset", tmp_path / "none", "--output", tmp_path / "o") == 3

    def test_no_dataset_exit_2(self, tmp_path):
        assert run("train", "--output", tmp_path / "o") == 2

    def test_threads_flag(self, tmp_path, voice_dataset):
        assert run("train", "--threads", 1, "--dataset", voice_dataset, "--output", tmp_path / "t",
                   *overrides(TINY_SET + ["max_epochs=1"])) == 0


class TestMix:
    def test_writes_mixture(self, tmp_path):
        t = singing_voice_track("x", 0.1, seed=0)
        write_stem_directory(tmp_path, [t], write_mixture=False)
        assert run("mix", "--dataset", tmp_path) == 0
        mix, _ = read_wav(tmp_path / "x" / "mixture.wav")
        voc, _ = read_wav(tmp_path / "x" / "vocals.wav")
        acc, _ = read_wav(tmp_path / "x" / "accompaniment.wav")
        assert np.max(np.abs(mix - (voc + acc))) <= 1.5 / 32768


class TestEvaluateReport:
    def test_oracle_and_merge(self, tmp_path, voice_dataset, capsys):
        assert run("evaluate", "--estimates", voice_dataset, "--references", voice_dataset,
                   "--filter-length", 16, "--name", "oracle", "--output", tmp_path / "ev") == 0
        rows = (tmp_path / "ev" / "report.csv").read_text().splitlines()
        assert rows[1] == "oracle," + ",".join(["100.0000"] * 6)
        assert (tmp_path / "ev" / "report.png").exists()

        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        report["name"] = "other"
        (tmp_path / "other.json").write_text(json.dumps(report))
        assert run("report", tmp_path / "ev" / "report.json", tmp_path / "other.json",
                   "--output", tmp_path / "cmp.csv") == 0
        merged = (tmp_path / "cmp.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in merged] == ["model", "oracle", "other"]
        assert (tmp_path / "cmp.png").read_bytes()[:4] == b"\x89PNG"

    def test_missing_estimates_exit_3(self, tmp_path, voice_dataset):
        (tmp_path / "est" / "a").mkdir(parents=True)
        write_wav(tmp_path / "est" / "a" / "vocals.wav", np.zeros(8000), 16000)
        assert run("evaluate", "--estimates", tmp_path / "est", "--references", voice_dataset,
                   "--output", tmp_path / "ev") == 3

    def test_bad_report_exit_3(self, tmp_path):
        (tmp_path / "r.json").write_text("{}")
        assert run("report", tmp_path / "r.json", "--output", tmp_path / "c.csv") == 3
