from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from edgeasr.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from edgeasr.mel import synthetic_audio, write_wav
from edgeasr.tensorstore import QuantizedTensor, TensorF32, read_container

TABLE7_INT4 = {"ami": 17.05, "earn": 13.60, "giga": 12.10, "lsc": 2.38, "lso": 5.04, "spgi": 2.83, "ted": 4.65, "voxp": 7.98}

SMALL = ["--layers", "2", "--d-model", "32", "--d-dec", "32", "--d-joint", "32", "--vocab", "16", "--conv-kernel", "5"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["genmodel", *SMALL, "--seed", "42", "--out", str(root / "gen")]) == EXIT_OK
    write_wav(root / "a.wav", synthetic_audio(1, 2.0))
    write_wav(root / "b.wav", synthetic_audio(2, 2.0))
    return root


def test_genmodel_deterministic(pipeline, tmp_path):
    assert main(["genmodel", *SMALL, "--seed", "42", "--out", str(tmp_path)]) == EXIT_OK
    assert _sha(tmp_path / "model.estm") == _sha(pipeline / "gen" / "model.estm")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 42
    assert manifest["subcommand"] == "genmodel"


def test_genmodel_single_layer_and_seed_diff(tmp_path):
    assert main(["genmodel", *SMALL[2:], "--layers", "1", "--seed", "1", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["genmodel", *SMALL[2:], "--layers", "1", "--seed", "2", "--out", str(tmp_path / "b")]) == EXIT_OK
    a = read_container(tmp_path / "a" / "model.estm")
    b = read_container(tmp_path / "b" / "model.estm")
    assert not any(n.startswith("enc.1.") for n in a.names())
    assert a.names() == b.names()
    assert all(a[n].shape == b[n].shape for n in a.names())
    assert a != b


def test_genmodel_bad_flags(tmp_path):
    assert main(["genmodel", "--d-model", "30", "--heads", "4", "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["genmodel", "--layers", "x", "--out", str(tmp_path)])
    assert e.value.code == EXIT_USAGE


def test_quantize_int4_kquant(pipeline, tmp_path):
    src = pipeline / "gen" / "model.estm"
    assert main(["quantize", "--in", str(src), "--bits", "4", "--scheme", "kquant", "--out", str(tmp_path)]) == EXIT_OK
    c = read_container(tmp_path / "model.estm")
    from edgeasr.transducer import ToyModelSpec

    spec = ToyModelSpec.from_json(c.metadata["model.spec"])
    for name in c.names():
        if name in spec.encoder_linear_names():
            assert isinstance(c[name], QuantizedTensor) and c[name].bits == 4
        else:
            assert isinstance(c[name], TensorF32)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["payload_bytes_after"] < man["payload_bytes_before"]
    assert set(man["tensor_bits"].values()) == {4}


def test_quantize_policy_file(pipeline, tmp_path):
    pol = tmp_path / "mixed.policy"
    pol.write_text(json.dumps({"default_bits": 4, "rules": [
        {"pattern": "enc.*.attn.*", "bits": 8}, {"pattern": "enc.0.*", "bits": 8}, {"pattern": "enc.1.*", "bits": 8}]}))
    src = pipeline / "gen" / "model.estm"
    assert main(["quantize", "--in", str(src), "--policy", str(pol), "--out", str(tmp_path / "o")]) == EXIT_OK
    bits = json.loads(read_container(tmp_path / "o" / "model.estm").metadata["quant.tensor_bits"])
    assert bits["enc.0.attn.q.w"] == 8 and bits["enc.1.ff.w1"] == 8 and bits["enc.in_proj.w"] == 4


def test_quantize_scope_none_identical(pipeline, tmp_path):
    src = pipeline / "gen" / "model.estm"
    assert main(["quantize", "--in", str(src), "--scope", "none", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "model.estm").read_bytes() == src.read_bytes()


def test_quantize_bad_input(tmp_path):
    (tmp_path / "junk.estm").write_bytes(b"garbage!" * 4)
    assert main(["quantize", "--in", str(tmp_path / "junk.estm"), "--out", str(tmp_path / "o")]) == EXIT_DATA


@pytest.mark.parametrize("config,delay,history", [("7,10,7", 0.56, 5.6), ("2,35,2", 0.16, 5.6)])
def test_stream_reports_delay(pipeline, tmp_path, config, delay, history):
    args = ["stream", "--model", str(pipeline / "gen" / "model.estm"), str(pipeline / "a.wav"), "--config", config]
    assert main([*args, "--out", str(tmp_path / "1")]) == EXIT_OK
    summary = json.loads((tmp_path / "1" / "summary.json").read_text())
    assert summary["delay_s"] == pytest.approx(delay)
    assert summary["history_s"] == pytest.approx(history)
    assert summary["effective_latency_s"] == pytest.approx(delay * (1 + 1 / summary["rtfx"]))
    assert main([*args, "--out", str(tmp_path / "2")]) == EXIT_OK
    assert (tmp_path / "1" / "hyp.tsv").read_text() == (tmp_path / "2" / "hyp.tsv").read_text()


def test_stream_raw_and_int_matmul(pipeline, tmp_path):
    raw = tmp_path / "a.raw"
    synthetic_audio(1, 1.0).astype("<f4").tofile(raw)
    args = ["stream", "--model", str(pipeline / "gen" / "model.estm"), str(raw), "--format", "raw", "--int-matmul"]
    assert main([*args, "--out", str(tmp_path / "o")]) == EXIT_OK
    assert (tmp_path / "o" / "timings.csv").exists()


def test_stream_errors(pipeline, tmp_path):
    model = str(pipeline / "gen" / "model.estm")
    wav = str(pipeline / "a.wav")
    assert main(["stream", "--model", model, wav, "--config", "7,10", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["stream", "--model", model, str(tmp_path / "nope.wav"), "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["stream", "--model", str(tmp_path / "nope.estm"), wav, "--out", str(tmp_path)]) == EXIT_DATA


def _write_table7_fixture(tmp_path):
    refs, hyps = [], []
    words_per_utt, n_utts = 25, 400  # 10,000 reference words per dataset
    for ds, pct in TABLE7_INT4.items():
        errors = round(pct * 100)
        for u in range(n_utts):
            ref = [f"w{(u + j) % 7}" for j in range(words_per_utt)]
            hyp = list(ref)
            k = errors // n_utts + (1 if u < errors % n_utts else 0)
            for j in range(k):
                hyp[j] = "zz"
            refs.append(f"{ds}/{u}\t{' '.join(ref)}")
            hyps.append(f"{ds}/{u}\t{' '.join(hyp)}")
    (tmp_path / "refs.tsv").write_text("\n".join(refs) + "\n")
    (tmp_path / "hyps.tsv").write_text("\n".join(hyps) + "\n")


def test_eval_table7_fixture(tmp_path):
    _write_table7_fixture(tmp_path)
    assert main(["eval", "--refs", str(tmp_path / "refs.tsv"), "--hyps", str(tmp_path / "hyps.tsv"),
                 "--out", str(tmp_path / "out")]) == EXIT_OK
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    per = {d["name"]: 100 * d["wer"] for d in report["datasets"]}
    for ds, pct in TABLE7_INT4.items():
        assert per[ds] == pytest.approx(pct, abs=1e-9)
    assert 100 * report["average_wer"] == pytest.approx(8.20, abs=0.005)


def test_eval_identical_and_bsf(tmp_path):
    (tmp_path / "r.tsv").write_text("x/1\thello world\n")
    assert main(["eval", "--refs", str(tmp_path / "r.tsv"), "--hyps", str(tmp_path / "r.tsv"),
                 "--out", str(tmp_path / "o")]) == EXIT_OK
    assert json.loads((tmp_path / "o" / "report.json").read_text())["average_wer"] == 0.0

    # 728 errors in 10,000 words = 7.28% streaming WER against a 7.07% batch baseline
    refs, hyps = [], []
    for u in range(400):
        k = 2 if u < 328 else 1
        refs.append(f"u{u}\t{' '.join(['a'] * 25)}")
        hyps.append(f"u{u}\t{' '.join(['b'] * k + ['a'] * (25 - k))}")
    (tmp_path / "r2.tsv").write_text("\n".join(refs) + "\n")
    (tmp_path / "h2.tsv").write_text("\n".join(hyps) + "\n")
    assert main(["eval", "--refs", str(tmp_path / "r2.tsv"), "--hyps", str(tmp_path / "h2.tsv"),
                 "--batch-baseline", "7.07", "--out", str(tmp_path / "o2")]) == EXIT_OK
    assert json.loads((tmp_path / "o2" / "report.json").read_text())["bsf"] == pytest.approx(1.03, abs=0.005)


def test_eval_id_mismatch(tmp_path):
    (tmp_path / "r.tsv").write_text("a\thello\n")
    (tmp_path / "h.tsv").write_text("b\thello\n")
    assert main(["eval", "--refs", str(tmp_path / "r.tsv"), "--hyps", str(tmp_path / "h.tsv"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_eval_reads_stream_directory(pipeline, tmp_path):
    model = str(pipeline / "gen" / "model.estm")
    assert main(["stream", "--model", model, str(pipeline / "a.wav"), "--dataset", "syn",
                 "--out", str(tmp_path / "s")]) == EXIT_OK
    (tmp_path / "refs.tsv").write_text("syn/a\tsome reference words\n")
    assert main(["eval", "--refs", str(tmp_path / "refs.tsv"), "--hyps", str(tmp_path / "s"),
                 "--out", str(tmp_path / "e")]) == EXIT_OK
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["latency"]["delay_s"] == pytest.approx(0.56)
    assert rep["model_size_bytes"] > 0


def test_bench_one_row(pipeline, tmp_path):
    assert main(["bench", "--model", str(pipeline / "gen" / "model.estm"), "--configs", "2,2,2",
                 "--repeat", "1", "--seconds", "0.64", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "bench.csv").read_text().strip().splitlines()
    assert len(lines) == 2
    assert (tmp_path / "plot_latency.csv").exists()
    assert main(["bench", "--model", str(pipeline / "gen" / "model.estm"), "--configs", "2,2",
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_end_to_end_pipeline(pipeline, tmp_path):
    model = pipeline / "gen" / "model.estm"
    assert main(["quantize", "--in", str(model), "--policy", "mixed", "--out", str(tmp_path / "q")]) == EXIT_OK
    assert main(["stream", "--model", str(tmp_path / "q" / "model.estm"), str(pipeline / "a.wav"),
                 str(pipeline / "b.wav"), "--out", str(tmp_path / "s")]) == EXIT_OK
    hyp = (tmp_path / "s" / "hyp.tsv").read_text()
    (tmp_path / "refs.tsv").write_text(hyp)
    assert main(["eval", "--refs", str(tmp_path / "refs.tsv"), "--hyps", str(tmp_path / "s"),
                 "--out", str(tmp_path / "e")]) == EXIT_OK
    for d in ("q", "s", "e"):
        assert (tmp_path / d / "manifest.json").exists()
    assert np.isfinite(json.loads((tmp_path / "s" / "summary.json").read_text())["rtfx"])
