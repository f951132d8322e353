import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matlstm_ad import ecgpipe as ecg
from matlstm_ad import io as mio
from matlstm_ad.cli import main
from matlstm_ad.config import DEFAULTS, RunConfig, derive_seed, parse_value
from matlstm_ad.errors import ContractError, ParseError
from matlstm_ad.models import Model, ModelSpec, SequenceDataset, init_params


class TestMseq:
    def test_layout_by_hand(self):
        frames = np.arange(2 * 1 * 2 * 3, dtype=float).reshape(2, 1, 2, 3)
        buf = mio.encode_mseq(frames, np.array([0, -1]))
        assert buf[:5] == b"MSEQ1"
        assert struct.unpack_from("<IIIIB", buf, 5) == (2, 1, 2, 3, mio.DTYPE_U8)
        assert buf[22:24] == bytes([0, 255])
        assert buf[24:] == bytes(range(12))

    def test_float_payload(self):
        frames = np.full((1, 1, 1, 2), 0.5)
        buf = mio.encode_mseq(frames, np.array([1]))
        assert buf[21] == mio.DTYPE_F32
        assert buf[-8:] == struct.pack("<ff", 0.5, 0.5)

    @settings(max_examples=40, deadline=None)
    @given(
        shape=st.tuples(st.integers(0, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
        as_bytes=st.booleans(),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_byte_round_trip(self, shape, as_bytes, seed):
        rng = np.random.default_rng(seed)
        frames = rng.integers(0, 256, shape).astype(float) if as_bytes else rng.standard_normal(shape).astype(np.float32)
        labels = rng.integers(-1, 2, shape[0])
        buf = mio.encode_mseq(frames, labels)
        m = mio.decode_mseq(buf)
        assert mio.encode_mseq(m.frames, m.labels, m.dtype) == buf
        np.testing.assert_array_equal(m.labels, labels)
        np.testing.assert_array_equal(m.frames, np.asarray(frames, dtype=np.float64))

    def test_dtype_choice(self):
        assert mio.choose_dtype(np.array([0.0, 1.0, 255.0])) == mio.DTYPE_U8
        assert mio.choose_dtype(np.array([0.0, 256.0])) == mio.DTYPE_F32
        assert mio.choose_dtype(np.array([0.5])) == mio.DTYPE_F32
        assert mio.choose_dtype(np.array([-1.0])) == mio.DTYPE_F32

    @pytest.mark.parametrize(
        "mutate,offset",
        [
            (lambda b: b"XSEQ1" + b[5:], 0),
            (lambda b: b[:12], 12),
            (lambda b: b[:21] + bytes([7]) + b[22:], 21),
            (lambda b: b[:22] + bytes([3]) + b[23:], 22),
            (lambda b: b[:-1], 24),
            (lambda b: b + b"\0", 24),
        ],
    )
    def test_parse_errors_report_offset(self, mutate, offset):
        buf = mio.encode_mseq(np.zeros((2, 1, 1, 2)), np.array([0, 1]))
        with pytest.raises(ParseError) as err:
            mio.decode_mseq(mutate(buf))
        assert err.value.offset == offset
        assert f"offset {offset}" in str(err.value)

    def test_encode_rejects(self):
        with pytest.raises(ValueError):
            mio.encode_mseq(np.zeros((2, 1, 1)), np.zeros(2))
        with pytest.raises(ValueError):
            mio.encode_mseq(np.zeros((2, 1, 1, 1)), np.array([0, 2]))

    def test_dataset_with_sidecar(self, tmp_path):
        ds = SequenceDataset(np.ones((3, 2, 2, 2)), np.array([0, 1, -1], dtype=np.int8), ["a", "b", "c"])
        mio.write_dataset(tmp_path / "d.mseq", ds, {"fingerprint": "abc"})
        back, meta = mio.read_dataset(tmp_path / "d.mseq")
        assert back.ids == ["a", "b", "c"] and meta["fingerprint"] == "abc"
        np.testing.assert_array_equal(back.labels, ds.labels)
        # without a sidecar ids fall back to positions
        (tmp_path / "d.mseq.json").unlink()
        back, _ = mio.read_dataset(tmp_path / "d.mseq")
        assert back.ids == ["0", "1", "2"]


class TestModelFile:
    def test_round_trip(self):
        spec = ModelSpec((3, 4), hidden=(2, 3), strategy="autoencoder")
        model = Model(spec, init_params(spec, 3))
        buf = mio.encode_model(model, {"fingerprint": "f"})
        back, meta = mio.decode_model(buf)
        assert back.spec == spec and meta == {"fingerprint": "f"}
        assert set(back.params) == set(model.params)
        for k in model.params:
            assert np.array_equal(back.params[k], model.params[k])
        assert mio.encode_model(back, meta) == buf

    @pytest.mark.parametrize("cut", [3, 18, 40])
    def test_truncated(self, cut):
        spec = ModelSpec((2, 2), hidden=(1, 1))
        buf = mio.encode_model(Model(spec, init_params(spec, 0)))
        with pytest.raises(ParseError):
            mio.decode_model(buf[:cut] if cut != 40 else buf[:-8])

    def test_version_checked(self):
        spec = ModelSpec((2, 2), hidden=(1, 1))
        buf = bytearray(mio.encode_model(Model(spec, init_params(spec, 0))))
        buf[len(mio.MODEL_MAGIC)] = 9
        with pytest.raises(ParseError, match="version 9"):
            mio.decode_model(bytes(buf))


class TestScoresCsv:
    def test_round_trip(self, tmp_path):
        scores = np.array([0.1, 1 / 3, 2.5e-17])
        text = mio.scores_csv(["x", "y", "z"], scores, np.array([1, 0, -1]))
        assert text.splitlines()[0] == "id,score,label"
        assert text.splitlines()[3].endswith(",")
        (tmp_path / "s.csv").write_text(text)
        ids, back, labels = mio.read_scores_csv(tmp_path / "s.csv")
        assert ids == ["x", "y", "z"] and list(labels) == [1, 0, -1]
        assert np.array_equal(back, scores)  # repr keeps every bit

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        mio.atomic_write(tmp_path / "a" / "f.txt", "hello")
        assert (tmp_path / "a" / "f.txt").read_text() == "hello"
        assert [p.name for p in (tmp_path / "a").iterdir()] == ["f.txt"]


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig.build()
        assert cfg["train.learning_rate"] == 3e-4 and cfg["train.batch_size"] == 64
        assert cfg["train.max_epochs"] == 100 and cfg["eval.seeds"] == [0, 1, 2]
        assert set(cfg.to_dict()) == set(DEFAULTS)

    def test_unknown_key(self):
        with pytest.raises(ContractError, match="model.hiden"):
            RunConfig.build({"model.hiden": [3, 3]})

    def test_overrides_win_and_are_typed(self):
        cfg = RunConfig.build({"data.n_c": 50}, ["data.n_c=100", "data.fixed_shift=true", "model.hidden=[4,5]"])
        assert cfg["data.n_c"] == 100 and cfg["data.fixed_shift"] is True and cfg["model.hidden"] == [4, 5]

    @pytest.mark.parametrize("item", ["data.n_c=ten", "data.n_c=2.5", "data.fixed_shift=maybe", "nokey"])
    def test_bad_overrides(self, item):
        with pytest.raises(ContractError):
            RunConfig.build(overrides=[item])

    def test_fingerprints(self):
        a = RunConfig.build()
        assert a.fingerprint() == RunConfig.build().fingerprint()
        assert a.fingerprint() != a.with_values(train__learning_rate=1e-3).fingerprint()
        # the data fingerprint ignores which draw, not what kind of data
        assert a.data_fingerprint() == a.with_values(data__seed=7).data_fingerprint()
        assert a.data_fingerprint() != a.with_values(data__n_c=100).data_fingerprint()

    def test_load_rejects_non_object(self, tmp_path):
        (tmp_path / "c.json").write_text("[1, 2]")
        with pytest.raises(ContractError):
            RunConfig.load(tmp_path / "c.json")

    def test_parse_value(self):
        assert parse_value("3") == 3 and parse_value("[1,2]") == [1, 2] and parse_value("abc") == "abc"

    def test_derive_seed(self):
        assert derive_seed(1, 2) == derive_seed(1, 2) != derive_seed(2, 1)


# ------------------------------------------------------------------ command line

SMALL_SET = ["--set", "data.n_sequences=60", "--set", "data.n_c=6", "--set", "data.n_r=4",
             "--set", "data.T=6", "--set", "data.outlier_ratio=0.2", "--set", "data.shift_max=3"]
TRAIN_SET = ["--set", "model.hidden=[2,3]", "--set", "train.max_epochs=2", "--set", "train.batch_size=16"]


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestCliGen:
    def test_default_synth(self, tmp_path, capsys):
        code, out, _ = _run(capsys, "gen", "synth", "--out", tmp_path / "d.mseq")
        assert code == 0
        ds, meta = mio.read_dataset(tmp_path / "d.mseq")
        assert len(ds) == 5000 and int((ds.labels == 1).sum()) == 250
        assert ds.frame_shape == (10, 10) and ds.T == 20
        assert "5000 sequences" in out and "250 anomalous (5.0%)" in out
        assert meta["fingerprint"] and meta["dtype"] == mio.DTYPE_U8

    def test_regeneration_is_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert _run(capsys, "gen", "synth", *SMALL_SET, "--seed", 3, "--out", tmp_path / name)[0] == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        _run(capsys, "gen", "synth", *SMALL_SET, "--seed", 4, "--out", tmp_path / "c")
        assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()

    def test_wide_frames_header(self, tmp_path, capsys):
        _run(capsys, "gen", "synth", "--set", "data.n_c=100", "--set", "data.n_sequences=20",
             "--out", tmp_path / "w")
        n, T, r, c, _ = struct.unpack_from("<IIIIB", (tmp_path / "w").read_bytes(), 5)
        assert (n, T, r, c) == (20, 20, 10, 100)

    def test_sprites(self, tmp_path, capsys):
        code, _, _ = _run(capsys, "gen", "sprites", "--set", "data.n_sequences=10", "--set", "data.T=4",
                          "--out", tmp_path / "s")
        assert code == 0
        ds, _ = mio.read_dataset(tmp_path / "s")
        assert ds.frame_shape == (28, 28) and len(ds) == 10

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        code, _, err = _run(capsys, "gen", "synth", "--set", "data.bogus=1", "--out", tmp_path / "x")
        assert code == 2 and "data.bogus" in err

    def test_unwritable_path_exit_2(self, tmp_path, capsys):
        (tmp_path / "file").write_text("")
        code, _, err = _run(capsys, "gen", "synth", *SMALL_SET, "--out", tmp_path / "file" / "sub" / "d")
        assert code == 2 and err.startswith("error:")


@pytest.fixture
def trained(tmp_path, capsys):
    data = tmp_path / "d.mseq"
    _run(capsys, "gen", "synth", *SMALL_SET, "--out", data)
    code, out, _ = _run(capsys, "train", *TRAIN_SET, "--data", data, "--out", tmp_path / "m.bin")
    assert code == 0 and "parameters" in out
    return tmp_path, data, tmp_path / "m.bin"


class TestCliTrainScore:
    def test_score_twice_identical(self, trained, capsys):
        d, data, model = trained
        for name in ("s1.csv", "s2.csv"):
            assert _run(capsys, "score", "--model", model, "--data", data, "--out", d / name)[0] == 0
        assert (d / "s1.csv").read_bytes() == (d / "s2.csv").read_bytes()
        ids, scores, labels = mio.read_scores_csv(d / "s1.csv")
        assert len(ids) == 60 and np.all(np.isfinite(scores)) and int(labels.sum()) == 12

    def test_retrain_is_byte_identical(self, trained, capsys):
        d, data, model = trained
        _run(capsys, "train", *TRAIN_SET, "--data", data, "--out", d / "m2.bin")
        assert model.read_bytes() == (d / "m2.bin").read_bytes()

    def test_model_embeds_fingerprint(self, trained):
        _, _, model = trained
        _, meta = mio.load_model(model)
        assert meta["fingerprint"] and meta["data_fingerprint"] and meta["config"]["model.hidden"] == [2, 3]

    @pytest.mark.parametrize("key,value", [("data.n_r", 5), ("data.n_c", 7)])
    def test_shape_mismatch_exit_2(self, trained, capsys, key, value):
        d, _, model = trained
        _run(capsys, "gen", "synth", *SMALL_SET, "--set", f"{key}={value}", "--out", d / "other")
        code, _, err = _run(capsys, "score", "--model", model, "--data", d / "other", "--out", d / "s.csv")
        assert code == 2 and key in err
        assert not (d / "s.csv").exists()

    def test_fingerprint_refusal_and_force(self, trained, capsys):
        d, _, model = trained
        _run(capsys, "gen", "synth", *SMALL_SET, "--set", "data.shift_max=2", "--out", d / "other")
        code, _, err = _run(capsys, "eval", "--model", model, "--data", d / "other")
        assert code == 2 and "fingerprint" in err and "--force" in err
        code, out, _ = _run(capsys, "eval", "--model", model, "--data", d / "other", "--force")
        assert code == 0 and "AUC" in out

    def test_same_distribution_other_draw_accepted(self, trained, capsys):
        d, _, model = trained
        _run(capsys, "gen", "synth", *SMALL_SET, "--seed", 99, "--out", d / "test")
        assert _run(capsys, "score", "--model", model, "--data", d / "test", "--out", d / "s.csv")[0] == 0

    def test_eval_scores_file(self, trained, capsys):
        d, data, model = trained
        _run(capsys, "score", "--model", model, "--data", data, "--out", d / "s.csv")
        code, out, _ = _run(capsys, "eval", "--scores", d / "s.csv", "--out", d / "r.json")
        assert code == 0 and out.startswith("AUC ") and "F1 " in out and "±" in out
        doc = json.loads((d / "r.json").read_text())
        assert 0.0 <= doc["auc"] <= 1.0

    def test_missing_inputs_exit_2(self, tmp_path, capsys):
        code, _, err = _run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "m")
        assert code == 2 and "does not exist" in err
        code, _, _ = _run(capsys, "score", "--model", tmp_path / "nope", "--data", tmp_path / "x",
                          "--out", tmp_path / "s")
        assert code == 2

    def test_non_finite_loss_exit_3(self, tmp_path, capsys):
        frames = np.zeros((8, 3, 2, 2))
        frames[0, 1, 0, 0] = np.nan
        mio.write_dataset(tmp_path / "nan.mseq", SequenceDataset(frames), {})
        code, _, err = _run(capsys, "train", "--set", "model.hidden=[1,1]", "--set", "train.max_epochs=1",
                            "--data", tmp_path / "nan.mseq", "--out", tmp_path / "m")
        assert code == 3 and "error" in err
        assert not (tmp_path / "m").exists()


class TestCliExperiment:
    def test_eval_pipeline(self, tmp_path, capsys):
        code, out, _ = _run(capsys, "eval", *SMALL_SET, *TRAIN_SET, "--set", "eval.seeds=[0,1]",
                            "--artifacts", tmp_path / "art", "--out", tmp_path / "r.json")
        assert code == 0
        assert out.startswith("AUC ") and "±" in out and "seeds [0, 1]" in out
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["seeds"] == [0, 1] and doc["config"]["model.hidden"] == [2, 3]
        assert (tmp_path / "art" / "seed1" / "scores.csv").exists()

    def test_sweep(self, tmp_path, capsys):
        code, out, _ = _run(capsys, "sweep", *SMALL_SET, *TRAIN_SET, "--grid", "2x2,1x1", "--seed", 0,
                            "--out", tmp_path / "sw.csv")
        assert code == 0
        lines = (tmp_path / "sw.csv").read_text().splitlines()
        assert lines[0] == "param_count,auc_mean,auc_std,f1_mean,f1_std" and len(lines) == 3
        assert int(lines[1].split(",")[0]) < int(lines[2].split(",")[0])
        assert out == (tmp_path / "sw.csv").read_text()

    @pytest.mark.parametrize("grid", ["", "10xa"])
    def test_bad_grid(self, tmp_path, capsys, grid):
        code, _, _ = _run(capsys, "sweep", "--grid", grid, "--out", tmp_path / "sw.csv")
        assert code == 2


HEADER_TMPL = "{rid} 2 360 {n}\n{rid}.dat 212 200 11 1024 0 0 0 MLII\n{rid}.dat 212 200 11 1024 0 0 0 V5\n"


def _toy_record(directory, rid, rng, n_beats, symbols):
    rr = 300
    n = rr * (n_beats + 2)
    x = 0.05 * rng.standard_normal(n)
    peaks = [rr * (k + 1) for k in range(n_beats)]
    for p in peaks:
        x[p - 5:p + 5] += np.hanning(10) * 2.0
    samples = np.clip(np.round(np.stack([x, -x]) * 200), -2048, 2047).astype(int)
    (directory / f"{rid}.hea").write_text(HEADER_TMPL.format(rid=rid, n=n))
    (directory / f"{rid}.dat").write_bytes(ecg.write_wfdb_212(samples))
    (directory / f"{rid}.csv").write_text("".join(f"{p},{s}\n" for p, s in zip(peaks, symbols)))


class TestCliEcgPrep:
    def _prep(self, capsys, d, N, context=1, manifest="manifest.txt", out="u.mseq"):
        return _run(capsys, "ecg-prep", "--records", d, "--manifest", d / manifest, "--annotations", d,
                    "--N", N, "--context", context, "--out", d / out)

    def test_two_beat_fixture(self, tmp_path, rng, capsys):
        _toy_record(tmp_path, "200", rng, 2, ["N", "V"])
        (tmp_path / "manifest.txt").write_text("200\n")
        code, out, _ = self._prep(capsys, tmp_path, 2, context=0)
        assert code == 0 and "1 units: 0 normal / 1 abnormal" in out
        ds, _ = mio.read_dataset(tmp_path / "u.mseq")
        assert len(ds) == 1 and ds.T == 1 and ds.frame_shape == (2, 360) and list(ds.labels) == [1]
        # one unit cannot fill a sequence of two
        code, out, err = self._prep(capsys, tmp_path, 2, context=1, out="v.mseq")
        assert code == 2 and "1 units" in out and "2 units" in err

    def test_units_and_sequences(self, tmp_path, rng, capsys):
        syms = ["N"] * 40
        syms[25] = "V"
        _toy_record(tmp_path, "100", rng, 40, syms)
        (tmp_path / "manifest.txt").write_text("100\n300\n")
        code, out, err = self._prep(capsys, tmp_path, 5, context=2)
        assert code == 0 and "missing record 300" in err
        assert "8 units: 7 normal / 1 abnormal" in out
        ds, meta = mio.read_dataset(tmp_path / "u.mseq")
        assert ds.frame_shape == (5, 360) and ds.T == 3 and len(ds) == 6
        assert meta["units"] == {"normal": 7, "abnormal": 1}
        assert meta["dtype"] == mio.DTYPE_F32
        # the abnormal unit is the sixth; it is the last unit of exactly one window
        assert list(ds.labels) == [0, 0, 0, 1, 0, 0]

    def test_larger_groups_give_fewer_units(self, tmp_path, rng, capsys):
        _toy_record(tmp_path, "100", rng, 60, ["N"] * 60)
        (tmp_path / "manifest.txt").write_text("100\n")
        self._prep(capsys, tmp_path, 10, out="a")
        self._prep(capsys, tmp_path, 20, out="b")
        n10 = json.loads((tmp_path / "a.json").read_text())["units"]["normal"]
        n20 = json.loads((tmp_path / "b.json").read_text())["units"]["normal"]
        assert n20 < n10

    def test_deterministic(self, tmp_path, rng, capsys):
        _toy_record(tmp_path, "100", rng, 30, ["N"] * 30)
        (tmp_path / "manifest.txt").write_text("100\n")
        self._prep(capsys, tmp_path, 5, out="a")
        self._prep(capsys, tmp_path, 5, out="b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_nothing_produced_exit_2(self, tmp_path, capsys):
        (tmp_path / "manifest.txt").write_text("404\n")
        code, _, err = self._prep(capsys, tmp_path, 5)
        assert code == 2 and "missing record 404" in err
