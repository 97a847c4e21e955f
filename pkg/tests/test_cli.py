"""CLI: subcommand behavior, exit codes, config files, report layout."""

import json

import numpy as np
import pytest

from tselab import cli
from tselab.audio import Manifest, read_wav
from tselab.embedder import Embedding, save_embedding_archive


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus")
    assert run(["synth", "--speakers", "6", "--utts", "4", "--dur", "0.4",
                "--seed", "3", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def mixdir(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("mix")
    assert run(["mix", "--corpus", str(corpus), "--out", str(path),
                "--n-mix", "8", "--split-ratios", "0.5,0.25,0.25",
                "--seed", "5"]) == 0
    return path


@pytest.fixture(scope="module")
def embedder_ckpt(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("emb") / "xvec.ckpt"
    assert run(["train-embedder", "--corpus", str(corpus), "--out", str(path),
                "--pooling", "stats", "--channels", "8", "--emb-dim", "8",
                "--mels", "16", "--epochs", "2", "--lr", "2e-3",
                "--seed", "0"]) == 0
    return path


class TestSynth:
    def test_counts(self, corpus):
        wavs = sorted(corpus.glob("*.wav"))
        assert len(wavs) == 24  # 6 speakers x 4 utterances
        rows = [json.loads(l) for l in (corpus / "corpus.jsonl").read_text().splitlines()]
        assert len(rows) == 24
        assert len({r["speaker"] for r in rows}) == 6

    def test_deterministic_bytes(self, corpus, tmp_path):
        again = tmp_path / "again"
        assert run(["synth", "--speakers", "6", "--utts", "4", "--dur", "0.4",
                    "--seed", "3", "--out", str(again)]) == 0
        for wav in sorted(corpus.glob("*.wav")):
            assert (again / wav.name).read_bytes() == wav.read_bytes()

    def test_missing_required_flag_is_usage_error(self):
        assert run(["synth", "--speakers", "2"]) == 1

    def test_eight_speakers_ten_utts_gives_eighty_wavs(self, tmp_path):
        assert run(["synth", "--speakers", "8", "--utts", "10", "--dur", "0.1",
                    "--seed", "0", "--out", str(tmp_path / "c")]) == 0
        assert len(list((tmp_path / "c").glob("*.wav"))) == 80


class TestMix:
    def test_split_sizes_and_snr_range(self, mixdir):
        sizes = {}
        for split in ("train", "valid", "test"):
            man = Manifest.load(mixdir / f"{split}.jsonl", split)
            sizes[split] = len(man.entries)
            for entry in man.entries:
                assert 0.0 <= entry.snr_db <= 5.0
        assert sizes == {"train": 4, "valid": 2, "test": 2}

    def test_test_speakers_disjoint(self, mixdir):
        train = Manifest.load(mixdir / "train.jsonl", "train")
        valid = Manifest.load(mixdir / "valid.jsonl", "valid")
        test = Manifest.load(mixdir / "test.jsonl", "test")
        assert not (train.speakers | valid.speakers) & test.speakers

    def test_measured_snr_matches_manifest(self, mixdir):
        man = Manifest.load(mixdir / "train.jsonl", "train")
        entry = man.entries[0]
        mix = read_wav(man.resolve(entry.mix))
        target = read_wav(man.resolve(entry.target))
        interferer = mix.samples - target.samples
        measured = 10 * np.log10(np.mean(target.samples ** 2)
                                 / np.mean(interferer ** 2))
        assert abs(measured - entry.snr_db) < 0.01  # 16-bit quantization noise

    def test_bad_ratios_usage_error(self, corpus, tmp_path):
        assert run(["mix", "--corpus", str(corpus), "--out", str(tmp_path / "m"),
                    "--split-ratios", "0.5,0.5,0.5"]) == 1

    def test_too_many_test_speakers_data_error(self, corpus, tmp_path):
        assert run(["mix", "--corpus", str(corpus), "--out", str(tmp_path / "m"),
                    "--test-speakers", "5"]) == 2


class TestEmbedderCommands:
    def test_train_and_extract(self, corpus, embedder_ckpt, tmp_path):
        archive = tmp_path / "embs.bin"
        assert run(["extract-embeddings", "--model", str(embedder_ckpt),
                    "--corpus", str(corpus), "--out", str(archive)]) == 0
        assert archive.exists() and (tmp_path / "embs.bin.jsonl").exists()

    def test_eval_separated_clusters_zero_eer(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        embs = []
        for s in range(3):
            center = np.zeros(8)
            center[s] = 10.0
            for _ in range(6):
                embs.append(Embedding(vector=center + 0.01 * rng.standard_normal(8),
                                      kind="xvec", speaker_id=f"spk{s}"))
        save_embedding_archive(tmp_path / "clusters.bin", embs, jsonl_mirror=False)
        assert run(["eval-embeddings", "--archive", str(tmp_path / "clusters.bin"),
                    "--label", "x-vector", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert "embedding" in out and "EER(%)" in out and "minDCF" in out
        row = [l for l in out.splitlines() if l.startswith("x-vector")][0]
        assert "0.00" in row  # EER column

    def test_eval_report_files(self, tmp_path):
        rng = np.random.default_rng(1)
        embs = [Embedding(vector=rng.standard_normal(4), kind="xvec",
                          speaker_id=f"s{i % 2}") for i in range(8)]
        save_embedding_archive(tmp_path / "a.bin", embs, jsonl_mirror=False)
        prefix = tmp_path / "rep"
        assert run(["eval-embeddings", "--archive", str(tmp_path / "a.bin"),
                    "--report", str(prefix)]) == 0
        summary = json.loads((tmp_path / "rep.summary.json").read_text())
        assert summary["version"]
        assert summary["config"]["archive"] == str(tmp_path / "a.bin")
        assert {"eer", "min_dcf", "dimension"} <= set(summary["results"])


class TestFitLda:
    @staticmethod
    def _archive(tmp_path, n_speakers=5, dim=8):
        rng = np.random.default_rng(2)
        embs = []
        for s in range(n_speakers):
            center = 3.0 * rng.standard_normal(dim)
            for _ in range(4):
                embs.append(Embedding(vector=center + rng.standard_normal(dim),
                                      kind="xivec", speaker_id=f"spk{s}"))
        path = tmp_path / "train_embs.bin"
        save_embedding_archive(path, embs, jsonl_mirror=False)
        return path

    def test_dims_sweep_writes_one_model_per_value(self, tmp_path):
        archive = self._archive(tmp_path)
        out = tmp_path / "lda"
        assert run(["fit-lda", "--archive", str(archive), "--dims", "1,2,4",
                    "--out-dir", str(out)]) == 0
        assert sorted(p.name for p in out.glob("lda_*.json")) == \
            ["lda_1.json", "lda_2.json", "lda_4.json"]

    def test_full_rank_ratios_sum_to_one(self, tmp_path):
        archive = self._archive(tmp_path)
        out = tmp_path / "lda"
        assert run(["fit-lda", "--archive", str(archive), "--dims", "4",
                    "--out-dir", str(out)]) == 0
        payload = json.loads((out / "lda_4.json").read_text())
        assert abs(sum(payload["explained_variance_ratio"]) - 1.0) < 1e-9

    def test_dims_at_class_count_is_data_error(self, tmp_path):
        archive = self._archive(tmp_path)  # 5 classes -> max l = 4
        assert run(["fit-lda", "--archive", str(archive), "--dims", "5",
                    "--out-dir", str(tmp_path / "l")]) == 2


class TestTrainEvalTse:
    def test_round_trip(self, mixdir, embedder_ckpt, tmp_path, capsys):
        model = tmp_path / "tse.ckpt"
        assert run(["train-tse", "--train", str(mixdir / "train.jsonl"),
                    "--valid", str(mixdir / "valid.jsonl"),
                    "--embedder", str(embedder_ckpt), "--out", str(model),
                    "--epochs", "2", "--lr", "1e-3", "--seed", "1"]) == 0
        report = tmp_path / "eval"
        assert run(["eval-tse", "--model", str(model),
                    "--manifest", str(mixdir / "test.jsonl"),
                    "--embedder", str(embedder_ckpt),
                    "--report", str(report)]) == 0
        out = capsys.readouterr().out
        assert "x-TSE" in out and "mixture" in out
        summary = json.loads((tmp_path / "eval.summary.json").read_text())
        # identity system row: the mixture scored against itself improves by 0
        assert abs(summary["mixture_row"]["mean_si_sdri_db"]) < 1e-9
        rows = [json.loads(l) for l in (tmp_path / "eval.jsonl").read_text().splitlines()]
        assert {"si_sdr_db", "si_sdri_db", "sdr_db", "sdri_db"} <= set(rows[0])

    def test_eval_reports_are_rerun_identical(self, mixdir, embedder_ckpt, tmp_path):
        model = tmp_path / "tse.ckpt"
        run(["train-tse", "--train", str(mixdir / "train.jsonl"),
             "--valid", str(mixdir / "valid.jsonl"),
             "--embedder", str(embedder_ckpt), "--out", str(model),
             "--epochs", "1", "--seed", "2"])
        for prefix in ("r1", "r2"):
            assert run(["eval-tse", "--model", str(model),
                        "--manifest", str(mixdir / "test.jsonl"),
                        "--embedder", str(embedder_ckpt),
                        "--report", str(tmp_path / prefix)]) == 0
        assert (tmp_path / "r1.jsonl").read_bytes() == (tmp_path / "r2.jsonl").read_bytes()
        assert (tmp_path / "r1.summary.json").read_text().replace("r1", "rX") == \
            (tmp_path / "r2.summary.json").read_text().replace("r2", "rX")

    def test_missing_lda_file_is_data_error(self, mixdir, embedder_ckpt, tmp_path):
        assert run(["train-tse", "--train", str(mixdir / "train.jsonl"),
                    "--valid", str(mixdir / "valid.jsonl"),
                    "--embedder", str(embedder_ckpt),
                    "--lda", str(tmp_path / "nope.json"),
                    "--out", str(tmp_path / "m.ckpt")]) == 2

    def test_dynamic_mixing_requires_corpus(self, mixdir, embedder_ckpt, tmp_path):
        assert run(["train-tse", "--valid", str(mixdir / "valid.jsonl"),
                    "--embedder", str(embedder_ckpt),
                    "--out", str(tmp_path / "m.ckpt"),
                    "--dynamic-mixing", "true"]) == 1

    def test_cue_flag_must_match_embedder(self, mixdir, embedder_ckpt, tmp_path):
        # the fixture embedder uses stats pooling -> xvec; claiming xivec fails
        assert run(["train-tse", "--train", str(mixdir / "train.jsonl"),
                    "--valid", str(mixdir / "valid.jsonl"),
                    "--embedder", str(embedder_ckpt), "--cue", "xivec",
                    "--out", str(tmp_path / "m.ckpt")]) == 1


class TestGradcheckCommand:
    def test_clean_run_exit_zero(self, capsys):
        assert run(["gradcheck", "--instances", "2"]) == 0
        assert "ok" in capsys.readouterr().out

    def test_injected_bad_gradient_caught_and_named(self, capsys):
        assert run(["gradcheck", "--instances", "2",
                    "--inject-bad-grad", "softmax"]) == 3
        captured = capsys.readouterr()
        assert "softmax" in captured.out + captured.err


class TestConfigFile:
    def test_section_overrides_defaults_and_flags_win(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[synth]\nspeakers = 3\nutts = 2\ndur = 0.3\n"
                       f"out = {tmp_path / 'c1'}\n")
        assert run(["--config", str(ini), "synth"]) == 0
        assert len(list((tmp_path / "c1").glob("*.wav"))) == 6
        # flag overrides file
        assert run(["--config", str(ini), "synth", "--utts", "1",
                    "--out", str(tmp_path / "c2")]) == 0
        assert len(list((tmp_path / "c2").glob("*.wav"))) == 3

    def test_unknown_key_rejected(self, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("[synth]\nspekaers = 3\n")
        assert run(["--config", str(ini), "synth", "--out", str(tmp_path / "x")]) == 1

    def test_unknown_command_is_usage_error(self):
        assert run(["frobnicate"]) == 1
