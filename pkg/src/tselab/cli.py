"""Command-line pipeline: corpus synthesis, mixing, embedder/LDA/TSE training,
evaluation, and self-checks.

Every subcommand resolves its options as defaults < config file < flags.  The
config file is INI-style with one section per subcommand (unknown keys are
rejected).  Reports are machine-first: JSON-lines rows plus a summary JSON
embedding the resolved config, seed and version; timestamps live in a
separate ``.meta.json`` so re-runs are byte-identical.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .audio import (Manifest, ManifestEntry, UtterancePool, dynamic_mix,
                    make_speaker_profiles, synth_speaker_utterance,
                    validate_speaker_disjoint, write_corpus_manifest, write_wav)
from .embedder import (EmbedderConfig, EmbedderModel, EmbedderTrainConfig,
                       LogMelConfig, load_embedding_archive,
                       save_embedding_archive, train_embedder)
from .errors import (DataError, DegenerateSignalError, GraphError,
                     NumericalError, TseLabError, UsageError)
from .lda import LabeledEmbeddingSet, fit_lda, load_lda, save_lda
from .metrics import (TrialScores, cosine_score, eer, min_dcf,
                      score_extraction, summarize_scores)
from .separator import PRESETS, SeparatorModel
from .trainer import TrainConfig, train_tse

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


# ---------------------------------------------------------------------------
# option plumbing: defaults < config file < flags
# ---------------------------------------------------------------------------


@dataclass
class Opt:
    name: str           # flag name, e.g. "speakers" -> --speakers
    type: type | None
    default: object
    help: str
    required: bool = False


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


COMMANDS: dict[str, list[Opt]] = {
    "synth": [
        Opt("speakers", int, 8, "number of synthetic speakers"),
        Opt("utts", int, 10, "utterances per speaker"),
        Opt("dur", float, 2.0, "utterance duration in seconds"),
        Opt("sr", int, 8000, "sample rate in Hz"),
        Opt("seed", int, 0, "generation seed"),
        Opt("out", str, None, "output corpus directory", required=True),
    ],
    "mix": [
        Opt("corpus", str, None, "corpus directory from `synth`", required=True),
        Opt("out", str, None, "output mixture directory", required=True),
        Opt("n-mix", int, 40, "total number of mixtures across splits"),
        Opt("split-ratios", str, "0.7,0.15,0.15", "train,valid,test fractions"),
        Opt("test-speakers", int, 0, "test speakers (0 = from the test ratio)"),
        Opt("snr-min", float, 0.0, "minimum mixing SNR in dB"),
        Opt("snr-max", float, 5.0, "maximum mixing SNR in dB"),
        Opt("seed", int, 0, "sampling seed"),
    ],
    "train-embedder": [
        Opt("corpus", str, None, "corpus directory", required=True),
        Opt("out", str, None, "output checkpoint path", required=True),
        Opt("pooling", str, "stats", "pooling head: stats | gaussian"),
        Opt("channels", int, 64, "frame-encoder channels"),
        Opt("emb-dim", int, 32, "embedding dimension"),
        Opt("mels", int, 24, "mel bands"),
        Opt("epochs", int, 30, "training epochs"),
        Opt("lr", float, 1e-3, "Adam learning rate"),
        Opt("seed", int, 0, "training seed"),
        Opt("log", str, "", "optional JSONL training-log path"),
    ],
    "extract-embeddings": [
        Opt("model", str, None, "embedder checkpoint", required=True),
        Opt("corpus", str, None, "corpus directory", required=True),
        Opt("out", str, None, "output archive path", required=True),
    ],
    "eval-embeddings": [
        Opt("archive", str, None, "embedding archive", required=True),
        Opt("label", str, "", "row label (defaults to archive stem)"),
        Opt("trials-per-speaker", int, 20, "positive and negative trials per speaker"),
        Opt("p-target", float, 0.01, "minDCF target prior"),
        Opt("c-miss", float, 1.0, "minDCF miss cost"),
        Opt("c-fa", float, 1.0, "minDCF false-accept cost"),
        Opt("seed", int, 0, "trial sampling seed"),
        Opt("report", str, "", "report path prefix (writes .jsonl/.summary.json)"),
    ],
    "fit-lda": [
        Opt("archive", str, None, "training-split embedding archive", required=True),
        Opt("dims", str, "8", "comma-separated discriminant counts, e.g. 8,16,32"),
        Opt("shrinkage", float, 1e-4, "within-class shrinkage epsilon"),
        Opt("out-dir", str, None, "directory for fitted lda_<l>.json files",
            required=True),
    ],
    "train-tse": [
        Opt("train", str, "", "training mixture manifest (omit for dynamic mixing)"),
        Opt("valid", str, None, "validation mixture manifest", required=True),
        Opt("embedder", str, None, "embedder checkpoint", required=True),
        Opt("cue", str, "", "cue kind xvec|xivec; validated against the embedder"),
        Opt("lda", str, "", "optional fitted LDA file for the cue"),
        Opt("preset", str, "desk", "architecture preset: desk | paper"),
        Opt("out", str, None, "output separator checkpoint", required=True),
        Opt("epochs", int, 60, "max training epochs"),
        Opt("lr", float, 1.5e-4, "initial learning rate"),
        Opt("warm-epochs", int, 20, "epochs exempt from LR decay"),
        Opt("patience", int, 2, "plateau patience in epochs"),
        Opt("grad-clip", float, 5.0, "global gradient-norm clip"),
        Opt("seed", int, 0, "training seed"),
        Opt("dynamic-mixing", _parse_bool, False, "draw fresh mixtures every epoch"),
        Opt("corpus", str, "", "corpus directory (required with dynamic mixing)"),
        Opt("examples-per-epoch", int, 0, "mixtures per epoch with dynamic mixing"),
        Opt("log", str, "", "optional JSONL training-log path"),
    ],
    "eval-tse": [
        Opt("model", str, None, "separator checkpoint", required=True),
        Opt("manifest", str, None, "test mixture manifest", required=True),
        Opt("embedder", str, None, "embedder checkpoint", required=True),
        Opt("lda", str, "", "optional fitted LDA file for the cue"),
        Opt("report", str, None, "report path prefix", required=True),
        Opt("wav-dir", str, "", "optional directory for extracted WAVs"),
    ],
    "gradcheck": [
        Opt("instances", int, 20, "random instances per operation"),
        Opt("seed", int, 20260810, "suite seed"),
        Opt("inject-bad-grad", str, "", "test hook: corrupt one op's gradient"),
    ],
    "selftest": [
        Opt("instances", int, 5, "random instances per operation"),
        Opt("seed", int, 20260810, "suite seed"),
    ],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); spec wants usage=1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="tse-lab",
                     description="Desk-scale target speaker extraction lab")
    parser.add_argument("--config", default="", help="INI config file; one "
                        "section per subcommand, flags override")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    for command, opts in COMMANDS.items():
        sub = subs.add_parser(command)
        for opt in opts:
            sub.add_argument(f"--{opt.name}", dest=opt.name.replace("-", "_"),
                             type=opt.type, help=opt.help,
                             default=argparse.SUPPRESS)
    return parser


def resolve_options(command: str, args: argparse.Namespace,
                    config_path: str) -> dict:
    """defaults < config-file section < explicit flags; unknown config keys
    are an error."""
    opts = {o.name: o for o in COMMANDS[command]}
    resolved = {name: opt.default for name, opt in opts.items()}
    if config_path:
        ini = configparser.ConfigParser()
        read = ini.read(config_path)
        if not read:
            raise DataError(f"config file not found: {config_path}")
        if ini.has_section(command):
            for key, raw in ini.items(command):
                if key not in opts:
                    raise UsageError(f"unknown key {key!r} in config section "
                                     f"[{command}]")
                resolved[key] = opts[key].type(raw)
    for name in opts:
        attr = name.replace("-", "_")
        if hasattr(args, attr):
            resolved[name] = getattr(args, attr)
    missing = [name for name, opt in opts.items()
               if opt.required and resolved[name] in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required options: "
                         + ", ".join(f"--{m}" for m in missing))
    return resolved


# ---------------------------------------------------------------------------
# report helpers
# ---------------------------------------------------------------------------


def _run_stamp(command: str, cfg: dict) -> dict:
    return {"command": command, "config": {k: cfg[k] for k in sorted(cfg)},
            "version": __version__}


def write_report(prefix: str, rows: list[dict], summary: dict) -> None:
    prefix = str(prefix)
    with open(prefix + ".jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    Path(prefix + ".summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    Path(prefix + ".meta.json").write_text(
        json.dumps({"written_unix_s": time.time()}) + "\n", encoding="utf-8")


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*headers), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*(str(c) for c in row)) for row in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    profiles = make_speaker_profiles(cfg["speakers"], seed=cfg["seed"])
    rows = []
    for i, profile in enumerate(profiles):
        speaker = f"spk{i:03d}"
        for u in range(cfg["utts"]):
            name = f"{speaker}_utt{u:02d}.wav"
            wf = synth_speaker_utterance(profile, cfg["dur"], seed=u,
                                         sample_rate=cfg["sr"])
            write_wav(out / name, wf)
            rows.append({"speaker": speaker, "path": name})
    write_corpus_manifest(out / "corpus.jsonl", rows)
    profile_dump = [{"speaker": f"spk{i:03d}", "f0_hz": p.f0_hz,
                     "harmonic_weights": p.harmonic_weights.tolist(),
                     "vibrato_rate": p.vibrato_rate, "noise_floor": p.noise_floor,
                     "seed": p.seed} for i, p in enumerate(profiles)]
    (out / "profiles.json").write_text(
        json.dumps({**_run_stamp("synth", cfg), "profiles": profile_dump},
                   sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(rows)} utterances for {cfg['speakers']} speakers to {out}")
    return EXIT_OK


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise UsageError(f"--split-ratios needs train,valid,test, got {text!r}")
    ratios = tuple(float(p) for p in parts)
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise UsageError(f"split ratios must be positive and sum to 1, got {ratios}")
    return ratios


def cmd_mix(cfg: dict) -> int:
    ratios = _parse_ratios(cfg["split-ratios"])
    if cfg["snr-min"] > cfg["snr-max"]:
        raise UsageError("snr-min exceeds snr-max")
    pool = UtterancePool.from_manifest(Path(cfg["corpus"]) / "corpus.jsonl")
    speakers = pool.speakers
    n_test_spk = cfg["test-speakers"] or max(2, round(len(speakers) * ratios[2]))
    if len(speakers) - n_test_spk < 2:
        raise DataError(f"corpus of {len(speakers)} speakers cannot spare "
                        f"{n_test_spk} test speakers and keep >= 2 for training")
    rng = np.random.default_rng([cfg["seed"] & 0x7FFFFFFF, 0x317])
    shuffled = list(rng.permutation(speakers))
    test_speakers = set(shuffled[:n_test_spk])
    trainval_speakers = set(shuffled[n_test_spk:])

    counts = [round(cfg["n-mix"] * ratios[0]), round(cfg["n-mix"] * ratios[1])]
    counts.append(cfg["n-mix"] - sum(counts))
    if min(counts) < 1:
        raise UsageError(f"n-mix {cfg['n-mix']} too small for ratios {ratios}")

    out = Path(cfg["out"])
    manifests = {}
    for split, count, allowed in zip(("train", "valid", "test"), counts,
                                     (trainval_speakers, trainval_speakers,
                                      test_speakers)):
        split_pool = UtterancePool(
            by_speaker={s: pool.by_speaker[s] for s in sorted(allowed)},
            base_dir=pool.base_dir)
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        split_rng = np.random.default_rng([cfg["seed"] & 0x7FFFFFFF,
                                           {"train": 1, "valid": 2, "test": 3}[split]])
        entries = []
        for i in range(count):
            example = dynamic_mix(split_pool, split_rng, cfg["snr-min"],
                                  cfg["snr-max"])
            names = {key: f"{split}/{key}_{i:05d}.wav"
                     for key in ("mix", "target", "enroll")}
            write_wav(out / names["mix"], example.mixture)
            write_wav(out / names["target"], example.target)
            write_wav(out / names["enroll"], example.enrollment)
            entries.append(ManifestEntry(mix=names["mix"], target=names["target"],
                                         enroll=names["enroll"],
                                         speaker=example.target_speaker_id,
                                         snr_db=example.snr_db))
        manifest = Manifest(entries=entries, split=split, base_dir=out)
        manifest.save(out / f"{split}.jsonl")
        manifests[split] = manifest
    validate_speaker_disjoint(manifests["train"], manifests["valid"],
                              manifests["test"])
    (out / "mix_config.json").write_text(
        json.dumps({**_run_stamp("mix", cfg),
                    "test_speakers": sorted(test_speakers)},
                   sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {counts[0]}/{counts[1]}/{counts[2]} train/valid/test mixtures "
          f"to {out} ({n_test_spk} held-out test speakers)")
    return EXIT_OK


def _embedder_config(cfg: dict) -> EmbedderConfig:
    if cfg["pooling"] not in ("stats", "gaussian"):
        raise UsageError(f"--pooling must be stats or gaussian, got {cfg['pooling']!r}")
    return EmbedderConfig(logmel=LogMelConfig(n_mels=cfg["mels"]),
                          channels=cfg["channels"], emb_dim=cfg["emb-dim"],
                          pooling=cfg["pooling"])


def cmd_train_embedder(cfg: dict) -> int:
    pool = UtterancePool.from_manifest(Path(cfg["corpus"]) / "corpus.jsonl")
    model, log = train_embedder(pool, _embedder_config(cfg),
                                EmbedderTrainConfig(epochs=cfg["epochs"],
                                                    lr=cfg["lr"],
                                                    seed=cfg["seed"]))
    model.save(cfg["out"], meta=_run_stamp("train-embedder", cfg))
    if cfg["log"]:
        with open(cfg["log"], "w", encoding="utf-8") as fh:
            for row in log:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    final = log[-1]
    print(f"embedder ({cfg['pooling']}) trained: train_acc={final['train_acc']:.3f} "
          f"valid_acc={final['valid_acc']:.3f} -> {cfg['out']}")
    return EXIT_OK


def cmd_extract_embeddings(cfg: dict) -> int:
    model = EmbedderModel.load(cfg["model"])
    pool = UtterancePool.from_manifest(Path(cfg["corpus"]) / "corpus.jsonl")
    embeddings = []
    for speaker in pool.speakers:
        for path in pool.by_speaker[speaker]:
            embeddings.append(model.embed(pool.load(path), speaker_id=speaker))
    save_embedding_archive(cfg["out"], embeddings)
    print(f"wrote {len(embeddings)} {model.config.kind()} embeddings "
          f"(dim {model.config.emb_dim}) to {cfg['out']}")
    return EXIT_OK


def build_trials(embeddings, trials_per_speaker: int, seed: int) -> TrialScores:
    """Per speaker: equal numbers of same-speaker and different-speaker
    cosine trials against that speaker's utterances."""
    by_speaker: dict[str, list[np.ndarray]] = {}
    for emb in embeddings:
        by_speaker.setdefault(emb.speaker_id, []).append(emb.vector)
    speakers = sorted(s for s in by_speaker if len(by_speaker[s]) >= 2)
    if len(speakers) < 2:
        raise DataError("need >= 2 speakers with >= 2 utterances for trials")
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x7A])
    scores, labels = [], []
    for speaker in speakers:
        own = by_speaker[speaker]
        others = [v for s in speakers if s != speaker for v in by_speaker[s]]
        for _ in range(trials_per_speaker):
            i, j = rng.choice(len(own), size=2, replace=False)
            scores.append(cosine_score(own[i], own[j]))
            labels.append(True)
            scores.append(cosine_score(own[rng.integers(len(own))],
                                       others[rng.integers(len(others))]))
            labels.append(False)
    return TrialScores(np.array(scores), np.array(labels))


def cmd_eval_embeddings(cfg: dict) -> int:
    embeddings = load_embedding_archive(cfg["archive"])
    trials = build_trials(embeddings, cfg["trials-per-speaker"], cfg["seed"])
    eer_value = eer(trials)
    dcf_value = min_dcf(trials, p_target=cfg["p-target"], c_miss=cfg["c-miss"],
                        c_fa=cfg["c-fa"])
    label = cfg["label"] or Path(cfg["archive"]).stem
    dim = len(embeddings[0].vector)
    print(render_table(["embedding", "dimension", "EER(%)", "minDCF"],
                       [[label, dim, f"{100 * eer_value:.2f}", f"{dcf_value:.3f}"]]))
    if cfg["report"]:
        rows = [{"score": float(s), "same_speaker": bool(l)}
                for s, l in zip(trials.scores, trials.labels)]
        write_report(cfg["report"], rows, {
            **_run_stamp("eval-embeddings", cfg),
            "results": {"embedding": label, "dimension": dim,
                        "eer": eer_value, "min_dcf": dcf_value,
                        "n_trials": int(len(trials.scores))},
        })
    return EXIT_OK


def cmd_fit_lda(cfg: dict) -> int:
    embeddings = load_embedding_archive(cfg["archive"])
    dataset = LabeledEmbeddingSet.from_embeddings(embeddings)
    dims = [int(p) for p in str(cfg["dims"]).split(",") if p.strip()]
    if not dims:
        raise UsageError("--dims must list at least one dimension")
    out_dir = Path(cfg["out-dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for l in dims:
        fitted = fit_lda(dataset, n_components=l, shrinkage_eps=cfg["shrinkage"])
        save_lda(out_dir / f"lda_{l}.json", fitted)
        rows.append([l, f"{fitted.explained_variance_ratio.sum():.4f}",
                     str(out_dir / f"lda_{l}.json")])
    print(render_table(["dims", "retained_variance", "file"], rows))
    (out_dir / "fit_lda.summary.json").write_text(
        json.dumps({**_run_stamp("fit-lda", cfg),
                    "classes": dataset.n_classes,
                    "retained_variance": {str(r[0]): float(r[1]) for r in rows}},
                   sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def _cue_pipeline(embedder_path: str, lda_path: str):
    """Returns (cue_fn, cue_dim, system_base_name)."""
    embedder = EmbedderModel.load(embedder_path)
    base = "x" if embedder.config.pooling == "stats" else "xi"
    if lda_path:
        lda_model = load_lda(lda_path)
        if lda_model.dim_in != embedder.config.emb_dim:
            raise DataError(f"LDA expects {lda_model.dim_in}-D embeddings, "
                            f"embedder produces {embedder.config.emb_dim}-D")

        def cue_fn(waveform):
            return lda_model.transform_vector(embedder.embed(waveform).vector)

        return cue_fn, lda_model.n_components, f"{base}-LDA-TSE({lda_model.n_components}D)"

    def cue_fn(waveform):
        return embedder.embed(waveform).vector

    return cue_fn, embedder.config.emb_dim, f"{base}-TSE"


def cmd_train_tse(cfg: dict) -> int:
    cue_fn, cue_dim, system = _cue_pipeline(cfg["embedder"], cfg["lda"])
    if cfg["cue"]:
        if cfg["cue"] not in ("xvec", "xivec"):
            raise UsageError(f"--cue must be xvec or xivec, got {cfg['cue']!r}")
        if not system.startswith("x-" if cfg["cue"] == "xvec" else "xi-"):
            raise UsageError(f"--cue {cfg['cue']} does not match the embedder "
                             f"checkpoint (system would be {system})")
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"--preset must be one of {sorted(PRESETS)}")
    model = SeparatorModel(PRESETS[cfg["preset"]](cue_dim=cue_dim),
                           seed=cfg["seed"])
    valid = Manifest.load(cfg["valid"], "valid")
    train_cfg = TrainConfig(lr_init=cfg["lr"], max_epochs=cfg["epochs"],
                            plateau_patience_epochs=cfg["patience"],
                            warm_epochs=cfg["warm-epochs"],
                            grad_clip_norm=cfg["grad-clip"], seed=cfg["seed"],
                            dynamic_mixing=cfg["dynamic-mixing"],
                            examples_per_epoch=cfg["examples-per-epoch"] or None)
    if cfg["dynamic-mixing"]:
        if not cfg["corpus"]:
            raise UsageError("--dynamic-mixing requires --corpus")
        source = UtterancePool.from_manifest(Path(cfg["corpus"]) / "corpus.jsonl")
        system += " +DM"
    else:
        if not cfg["train"]:
            raise UsageError("--train manifest is required without dynamic mixing")
        source = Manifest.load(cfg["train"], "train")
    result = train_tse(model, source, valid, cue_fn, train_cfg,
                       ckpt_path=str(cfg["out"]) + ".train",
                       log_path=cfg["log"] or None)
    model.save(cfg["out"], meta={**_run_stamp("train-tse", cfg),
                                 "system": system,
                                 "best_valid_loss": result.state.best_valid_loss})
    best = min(r.valid_loss for r in result.log)
    print(f"{system}: {len(result.log)} epochs, best valid -SI-SDR {best:.2f} dB "
          f"-> {cfg['out']}")
    return EXIT_OK


def cmd_eval_tse(cfg: dict) -> int:
    from .ckpt import load_checkpoint

    cue_fn, cue_dim, system = _cue_pipeline(cfg["embedder"], cfg["lda"])
    _, _, meta, _ = load_checkpoint(cfg["model"], expect_kind="separator")
    system = meta.get("system", system)
    model = SeparatorModel.load(cfg["model"])
    if model.config.cue_dim != cue_dim:
        raise DataError(f"model expects cue dim {model.config.cue_dim}, cue "
                        f"pipeline produces {cue_dim}")
    manifest = Manifest.load(cfg["manifest"], "test")
    wav_dir = Path(cfg["wav-dir"]) if cfg["wav-dir"] else None
    if wav_dir:
        wav_dir.mkdir(parents=True, exist_ok=True)

    from .trainer import load_manifest_examples
    examples = load_manifest_examples(manifest)
    rows = []
    scored = []
    mixture_scored = []
    for i, example in enumerate(examples):
        estimate = model.extract(example.mixture, cue_fn(example.enrollment))
        scores = score_extraction(example.target.samples, estimate.samples,
                                  example.mixture.samples)
        scored.append(scores)
        mixture_scored.append(score_extraction(example.target.samples,
                                               example.mixture.samples,
                                               example.mixture.samples))
        rows.append({"index": i, "speaker": example.target_speaker_id,
                     "snr_db": example.snr_db, **scores.as_dict()})
        if wav_dir:
            write_wav(wav_dir / f"est_{i:05d}.wav", estimate)
    summary = summarize_scores(scored)
    mixture_summary = summarize_scores(mixture_scored)
    print(render_table(
        ["System", "SDRi(dB)", "SI-SDRi(dB)"],
        [["mixture", f"{mixture_summary['mean_sdri_db']:.2f}",
          f"{mixture_summary['mean_si_sdri_db']:.2f}"],
         [system, f"{summary['mean_sdri_db']:.2f}",
          f"{summary['mean_si_sdri_db']:.2f}"]]))
    write_report(cfg["report"], rows, {
        **_run_stamp("eval-tse", cfg), "system": system, "results": summary,
        "mixture_row": mixture_summary,
    })
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import inject_bad_gradient, run_suite

    def run():
        results, elapsed = run_suite(instances=cfg["instances"], seed=cfg["seed"])
        for res in results:
            print(res.line())
        print(f"suite: {len(results)} checks in {elapsed:.1f}s")
        failures = [r.name for r in results if not r.passed]
        if failures:
            raise NumericalError(f"gradient/invariant checks failed: {failures}")

    if cfg["inject-bad-grad"]:
        with inject_bad_gradient(cfg["inject-bad-grad"]):
            run()
    else:
        run()
    return EXIT_OK


def cmd_selftest(cfg: dict) -> int:
    import tempfile

    code = cmd_gradcheck({"instances": cfg["instances"], "seed": cfg["seed"],
                          "inject-bad-grad": ""})
    if code != EXIT_OK:
        return code
    # miniature end-to-end smoke: synth -> mix -> random-model extract
    with tempfile.TemporaryDirectory() as tmp:
        corpus = {"speakers": 3, "utts": 2, "dur": 0.3, "sr": 8000, "seed": 1,
                  "out": f"{tmp}/corpus"}
        cmd_synth(corpus)
        cmd_mix({"corpus": f"{tmp}/corpus", "out": f"{tmp}/mix", "n-mix": 3,
                 "split-ratios": "0.4,0.3,0.3", "test-speakers": 0,
                 "snr-min": 0.0, "snr-max": 5.0, "seed": 1})
        manifest = Manifest.load(Path(tmp) / "mix" / "train.jsonl", "train")
        from .trainer import load_manifest_examples
        example = load_manifest_examples(manifest)[0]
        model = SeparatorModel(PRESETS["desk"](cue_dim=8), seed=0)
        rng = np.random.default_rng(0)
        out = model.extract(example.mixture, rng.standard_normal(8))
        assert len(out) == len(example.mixture)
        model.verify_gradient_flow(seed=0)
    print("selftest ok")
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "mix": cmd_mix,
    "train-embedder": cmd_train_embedder,
    "extract-embeddings": cmd_extract_embeddings,
    "eval-embeddings": cmd_eval_embeddings,
    "fit-lda": cmd_fit_lda,
    "train-tse": cmd_train_tse,
    "eval-tse": cmd_eval_tse,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_options(args.command, args, args.config)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DegenerateSignalError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, GraphError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TseLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
