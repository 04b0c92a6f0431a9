"""Command line pipeline from data generation through scored reports.

One artifact directory (--out) holds everything a run produces under
fixed names, so subcommands compose without path plumbing:

    train.farc, eval.farc            feature archives
    {train,validation,pool,enroll,test}.manifest
    trials.txt                       enroll/test pairs with labels
    checkpoint_{system}.xvck         trained model
    trainlog_{system}.csv, epochs_{system}.csv
    embeddings_{system}_{split}.xvem
    backend_{system}.xvbk
    scores_{system}.txt
    report.csv, det_{system}.csv
    run_{command}[_{system}].json    reproducibility records

Settings come from a TOML config file with one table per stage;
--seed and --system override the config, and built-in defaults cover
everything else.  Exit codes: 0 success, 1 user error, 2 numeric
failure.
"""

import argparse
import copy
import hashlib
import json
import os
import sys

import numpy as np

try:
    import tomllib as _tomllib
except ModuleNotFoundError:  # python < 3.11
    _tomllib = None
    import toml as _toml

from .backend import (
    fit_backend,
    load_backend,
    read_embeddings,
    save_backend,
    score_trials,
    write_embeddings,
)
from .corpus import CorpusManifest, generate_synthetic_corpus, load_split, \
    write_archive
from .errors import FormatError, NumericError, ShapeError
from .evalkit import (
    evaluate_scores,
    emit_report,
    fuse_scores,
    parse_trials,
    read_scores,
    write_scores,
)
from .gradsuite import THRESHOLD, run_model_checks, run_op_checks
from .model import (
    AuxBranchSpec,
    ModelSpec,
    build_model,
    extract_embedding,
    load_checkpoint,
)
from .trainer import TrainConfig, train

TRAIN_ARCHIVE = "train.farc"
EVAL_ARCHIVE = "eval.farc"
TRIALS_FILE = "trials.txt"
SPLITS = ("train", "validation", "pool", "enroll", "test")
_SPLIT_ARCHIVE = {"train": TRAIN_ARCHIVE, "validation": TRAIN_ARCHIVE,
                  "pool": TRAIN_ARCHIVE, "enroll": EVAL_ARCHIVE,
                  "test": EVAL_ARCHIVE}

FUSION_SYSTEM = "GNCN-Fusion"

# trainable system presets: name -> (variant, aux tap or None)
SYSTEMS = {"x-vector": ("baseline", None), "GTM": ("gtm", None)}
for _mode in ("F0", "F1"):
    for _tap in ("IN", "FC", "AF", "BN"):
        SYSTEMS[f"GNCN-{_mode}-{_tap}"] = \
            ("gncn", (_mode.lower(), _tap.lower()))

# Sized for the bundled synthetic recipe: small corpus, steep lr decay.
# Library dataclasses keep the reference defaults; these override them.
DEFAULTS = {
    "seed": 0,
    "system": "x-vector",
    "corpus": {
        "train_speakers": 50,
        "eval_speakers": 20,
        "utts_per_speaker": 10,
        "train_utts": 3,
        "validation_utts": 1,
        "enroll_utts": 3,
        "feature_dim": 30,
        "frame_range": [120, 150],
        "num_phonemes": 8,
        "transform_scale": 0.4,
        "offset_scale": 0.6,
        "mixture_seed": 0,
    },
    "model": {
        "frame_layers": [[48, 5, 1], [48, 3, 2], [48, 3, 3],
                         [48, 1, 1], [96, 1, 1]],
        "embed_dims": [320, 320],
        "projection_dim": 100,
        "noise_mode": "fixed",
    },
    "trainer": {
        "epochs": 20,
        "batch_size": 8,
        "crop_range": [110, 120],
        "lr_initial": 0.01,
        "lr_final": 0.0003,
        "weight_decay": 0.0001,
        "gtm_alpha": 0.05,
        "gtm_squared": True,
        "task_weight_initial": 0.01,
        "task_weight_factor": 0.5,
        "task_weight_floor": 0.001,
        "patience": 1,
        "aux_squared": True,
        "validation_cap": 400,
    },
    "backend": {
        "lda_dim": 40,
        "em_iters": 10,
        "length_norm": "sqrt_dim",
    },
}


def _load_toml(path):
    if _tomllib is not None:
        with open(path, "rb") as handle:
            return _tomllib.load(handle)
    with open(path, "r", encoding="utf-8") as handle:
        return _toml.load(handle)


def _merge(base, override, prefix="config"):
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ValueError(f"unknown {prefix} key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"{prefix}.{key} must be a table")
            out[key] = _merge(base[key], value, f"{prefix}.{key}")
        else:
            out[key] = value
    return out


def resolve_config(config_path=None, seed=None, system=None):
    """Defaults, overlaid by the TOML file, overlaid by the flags."""
    config = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        config = _merge(config, _load_toml(config_path))
    if seed is not None:
        config["seed"] = int(seed)
    if system is not None:
        config["system"] = system
    return config


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_run_record(out_dir, tag, config, artifacts):
    record = {
        "command": tag,
        "seed": config["seed"],
        "system": config["system"],
        "config": config,
        "artifacts": {os.path.relpath(p, out_dir): _sha256(p)
                      for p in sorted(artifacts)},
    }
    path = os.path.join(out_dir, f"run_{tag}.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(record, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def _require_system(config):
    system = config["system"]
    if system not in SYSTEMS:
        raise ValueError(f"unknown system {system!r}; choose from "
                         f"{', '.join(sorted(SYSTEMS))}")
    return system


def _partition(manifest, head_count):
    """Per speaker, the first head_count utterances and the remainder.

    The tail may come out empty; callers that need a nonempty one
    check for themselves.
    """
    by_speaker = {}
    for entry in manifest:
        by_speaker.setdefault(entry.speaker_id, []).append(entry)
    head, tail = [], []
    for speaker in sorted(by_speaker):
        entries = sorted(by_speaker[speaker], key=lambda e: e.utterance_id)
        if not 0 < head_count <= len(entries):
            raise ValueError(
                f"cannot take {head_count} of {len(entries)} utterances "
                f"for speaker {speaker}")
        head.extend(entries[:head_count])
        tail.extend(entries[head_count:])
    return CorpusManifest(head), CorpusManifest(tail)


def cmd_gen_data(args, config, outputs):
    cc = config["corpus"]
    total = cc["train_speakers"] + cc["eval_speakers"]
    if cc["train_speakers"] < 2 or cc["eval_speakers"] < 2:
        raise ValueError("need at least two train and two eval speakers")
    if cc["train_utts"] < 1 or cc["validation_utts"] < 1:
        raise ValueError("train_utts and validation_utts must be positive")
    if cc["train_utts"] + cc["validation_utts"] > cc["utts_per_speaker"]:
        raise ValueError(
            f"train_utts + validation_utts "
            f"({cc['train_utts']}+{cc['validation_utts']}) exceed "
            f"utts_per_speaker ({cc['utts_per_speaker']})")
    if not 0 < cc["enroll_utts"] < cc["utts_per_speaker"]:
        raise ValueError(
            f"enroll_utts ({cc['enroll_utts']}) must leave at least one "
            f"test utterance of {cc['utts_per_speaker']}")
    sequences = generate_synthetic_corpus(
        total, cc["utts_per_speaker"],
        frame_range=tuple(cc["frame_range"]),
        feature_dim=cc["feature_dim"], seed=config["seed"],
        mixture_seed=cc["mixture_seed"], num_phonemes=cc["num_phonemes"],
        transform_scale=cc["transform_scale"],
        offset_scale=cc["offset_scale"])
    speakers = sorted({s.speaker_id for s in sequences})
    train_set = set(speakers[:cc["train_speakers"]])
    train_seqs = [s for s in sequences if s.speaker_id in train_set]
    eval_seqs = [s for s in sequences if s.speaker_id not in train_set]

    train_path = outputs.add(os.path.join(args.out, TRAIN_ARCHIVE))
    eval_path = outputs.add(os.path.join(args.out, EVAL_ARCHIVE))
    train_manifest = write_archive(train_path, train_seqs)
    eval_manifest = write_archive(eval_path, eval_seqs)

    # The trainer sees train_utts + validation_utts per speaker; the
    # backend trains on the pool, every train-speaker utterance.
    train_split, rest = _partition(train_manifest, cc["train_utts"])
    val_split, _ = _partition(rest, cc["validation_utts"])
    enroll_split, test_split = _partition(eval_manifest, cc["enroll_utts"])
    for name, manifest in (("train", train_split), ("validation", val_split),
                           ("pool", train_manifest),
                           ("enroll", enroll_split), ("test", test_split)):
        manifest.write(outputs.add(
            os.path.join(args.out, f"{name}.manifest")))

    lines = []
    targets = 0
    for enroll in enroll_split:
        for test in test_split:
            same = enroll.speaker_id == test.speaker_id
            targets += same
            label = "target" if same else "nontarget"
            lines.append(f"{enroll.utterance_id} {test.utterance_id} {label}")
    trials_path = outputs.add(os.path.join(args.out, TRIALS_FILE))
    with open(trials_path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")

    outputs.add(_write_run_record(args.out, "gen-data", config,
                                  outputs.paths))
    print(f"gen-data: {len(train_seqs)} train utterances "
          f"({cc['train_speakers']} speakers), {len(eval_seqs)} eval "
          f"utterances ({cc['eval_speakers']} speakers), "
          f"{len(lines)} trials ({targets} targets)")


def cmd_train(args, config, outputs):
    system = _require_system(config)
    variant, aux_tap = SYSTEMS[system]
    mc, tc = config["model"], config["trainer"]

    train_manifest = CorpusManifest.read(
        os.path.join(args.out, "train.manifest"))
    val_manifest = CorpusManifest.read(
        os.path.join(args.out, "validation.manifest"))
    archive = os.path.join(args.out, TRAIN_ARCHIVE)
    train_seqs = load_split(archive, train_manifest)
    val_seqs = load_split(archive, val_manifest)

    spec = ModelSpec(
        num_speakers=len(train_manifest.speakers),
        feature_dim=config["corpus"]["feature_dim"],
        frame_layers=tuple(tuple(layer) for layer in mc["frame_layers"]),
        embed_dims=tuple(mc["embed_dims"]),
        classifier_bias=variant != "gtm")
    aux = None
    if variant == "gncn":
        aux = AuxBranchSpec(mode=aux_tap[0], tap=aux_tap[1],
                            projection_dim=mc["projection_dim"],
                            noise_mode=mc["noise_mode"])
    model = build_model(spec, aux=aux, seed=config["seed"])

    train_config = TrainConfig(
        variant=variant, epochs=tc["epochs"], batch_size=tc["batch_size"],
        crop_range=tuple(tc["crop_range"]), lr_initial=tc["lr_initial"],
        lr_final=tc["lr_final"], weight_decay=tc["weight_decay"],
        gtm_alpha=tc["gtm_alpha"], gtm_squared=tc["gtm_squared"],
        task_weight_initial=tc["task_weight_initial"],
        task_weight_factor=tc["task_weight_factor"],
        task_weight_floor=tc["task_weight_floor"], patience=tc["patience"],
        aux_squared=tc["aux_squared"], seed=config["seed"],
        validation_cap=tc["validation_cap"])

    checkpoint = outputs.add(
        os.path.join(args.out, f"checkpoint_{system}.xvck"))
    log = train(model, train_seqs, val_seqs, train_config,
                checkpoint_path=checkpoint)
    log.write_step_csv(outputs.add(
        os.path.join(args.out, f"trainlog_{system}.csv")))
    log.write_epoch_csv(outputs.add(
        os.path.join(args.out, f"epochs_{system}.csv")))
    outputs.add(_write_run_record(args.out, f"train_{system}", config,
                                  outputs.paths))
    last = log.epochs[-1]
    print(f"train: {system} finished epoch {last.epoch} with "
          f"train CE {last.mean_ce:.4f}, val CE {last.val_ce:.4f}, "
          f"val acc {last.val_acc:.3f}")


def cmd_extract(args, config, outputs):
    system = _require_system(config)
    model, _, _ = load_checkpoint(
        os.path.join(args.out, f"checkpoint_{system}.xvck"))
    splits = args.split.split(",")
    for split in splits:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; choose from "
                             f"{', '.join(SPLITS)}")
        manifest = CorpusManifest.read(
            os.path.join(args.out, f"{split}.manifest"))
        sequences = load_split(
            os.path.join(args.out, _SPLIT_ARCHIVE[split]), manifest)
        ids = [s.utterance_id for s in sequences]
        vectors = np.stack([extract_embedding(model, s) for s in sequences])
        write_embeddings(outputs.add(os.path.join(
            args.out, f"embeddings_{system}_{split}.xvem")), ids, vectors)
        print(f"extract: {system} {split}: {len(ids)} embeddings "
              f"of dim {vectors.shape[1]}")
    outputs.add(_write_run_record(args.out, f"extract_{system}", config,
                                  outputs.paths))


def cmd_backend_train(args, config, outputs):
    system = _require_system(config)
    bc = config["backend"]
    ids, vectors = read_embeddings(
        os.path.join(args.out, f"embeddings_{system}_pool.xvem"))
    manifest = CorpusManifest.read(os.path.join(args.out, "pool.manifest"))
    speaker_of = {e.utterance_id: e.speaker_id for e in manifest}
    missing = [u for u in ids if u not in speaker_of]
    if missing:
        raise ValueError(f"embeddings not in pool manifest: {missing[:3]}")
    labels = [speaker_of[u] for u in ids]
    backend = fit_backend(vectors, labels, lda_dim=bc["lda_dim"],
                          em_iters=bc["em_iters"],
                          length_norm=bc["length_norm"])
    save_backend(outputs.add(
        os.path.join(args.out, f"backend_{system}.xvbk")), backend)
    outputs.add(_write_run_record(args.out, f"backend-train_{system}",
                                  config, outputs.paths))
    history = backend.plda.loglik_history
    print(f"backend-train: {system} projected to "
          f"{backend.projection.shape[1]} dims, marginal loglik "
          f"{history[0]:.2f} -> {history[-1]:.2f}")


def cmd_score(args, config, outputs):
    system = _require_system(config)
    backend = load_backend(os.path.join(args.out, f"backend_{system}.xvbk"))
    maps = {}
    for split in ("enroll", "test"):
        ids, vectors = read_embeddings(os.path.join(
            args.out, f"embeddings_{system}_{split}.xvem"))
        transformed = backend.transform(vectors)
        maps[split] = dict(zip(ids, transformed))
    trials = parse_trials(os.path.join(args.out, TRIALS_FILE))
    if not trials:
        raise ValueError("empty trial list")
    pairs = [(t.enroll, t.test) for t in trials]
    values = score_trials(backend.plda, maps["enroll"], maps["test"], pairs)
    scores = dict(zip(pairs, values))
    write_scores(outputs.add(
        os.path.join(args.out, f"scores_{system}.txt")), scores)
    outputs.add(_write_run_record(args.out, f"score_{system}", config,
                                  outputs.paths))
    print(f"score: {system}: {len(scores)} trials scored")


def cmd_evaluate(args, config, outputs):
    systems = (args.system or config["system"]).split(",")
    trials = parse_trials(os.path.join(args.out, TRIALS_FILE))
    reports = {}
    for system in systems:
        scores = read_scores(os.path.join(args.out, f"scores_{system}.txt"))
        reports[system] = evaluate_scores(scores, trials)
    for path in emit_report(reports, args.out):
        outputs.add(path)
    outputs.add(_write_run_record(
        args.out, f"evaluate_{'+'.join(systems)}", config, outputs.paths))
    for system, report in reports.items():
        print(f"evaluate: {system}: EER {100.0 * report.eer:.3f}%, "
              f"minDCF(0.01) {report.min_dcf_p01:.4f}, "
              f"minDCF(0.001) {report.min_dcf_p001:.4f}")


def cmd_fuse(args, config, outputs):
    names = args.inputs.split(",")
    if len(names) != 2:
        raise ValueError(f"--inputs needs two system names, got "
                         f"{args.inputs!r}")
    first = read_scores(os.path.join(args.out, f"scores_{names[0]}.txt"))
    second = read_scores(os.path.join(args.out, f"scores_{names[1]}.txt"))
    fused = fuse_scores(first, second)
    out_system = args.system or FUSION_SYSTEM
    write_scores(outputs.add(
        os.path.join(args.out, f"scores_{out_system}.txt")), fused)
    outputs.add(_write_run_record(args.out, f"fuse_{out_system}",
                                  dict(config, system=out_system),
                                  outputs.paths))
    print(f"fuse: {names[0]} + {names[1]} -> {out_system} "
          f"({len(fused)} trials)")


def cmd_gradcheck(args, config, outputs):
    failures = 0
    for name, err in run_op_checks(seed=config["seed"]):
        ok = err < THRESHOLD
        failures += not ok
        print(f"gradcheck: op {name}: {err:.3e} "
              f"{'ok' if ok else 'FAIL'}")
    for name, err in run_model_checks(seed=config["seed"]):
        ok = err < THRESHOLD
        failures += not ok
        print(f"gradcheck: model {name}: {err:.3e} "
              f"{'ok' if ok else 'FAIL'}")
    if failures:
        raise NumericError(f"{failures} gradient checks at or above "
                           f"{THRESHOLD}")
    outputs.add(_write_run_record(args.out, "gradcheck", config, []))
    print("gradcheck: all checks passed")


class _Outputs:
    """Artifact paths written so far, for cleanup on failure."""

    def __init__(self):
        self.paths = []

    def add(self, path):
        self.paths.append(path)
        return path


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits with 2 by default, which is reserved for
        # numeric failures here
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "extract": cmd_extract,
    "backend-train": cmd_backend_train,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "fuse": cmd_fuse,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, metavar="PATH",
                        help="TOML config file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--system", default=None, metavar="NAME",
                        help="system preset, e.g. x-vector or GNCN-F1-FC")
    common.add_argument("--out", default=".", metavar="DIR",
                        help="artifact directory")

    parser = _ArgumentParser(
        prog="svkit",
        description="speaker verification pipeline on synthetic features")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_ArgumentParser)
    sub.add_parser("gen-data", parents=[common],
                   help="generate the synthetic corpus and trial list")
    sub.add_parser("train", parents=[common],
                   help="train the selected system")
    extract = sub.add_parser("extract", parents=[common],
                             help="extract embeddings for manifests")
    extract.add_argument("--split", default="pool,enroll,test",
                         help="comma-separated manifest names")
    sub.add_parser("backend-train", parents=[common],
                   help="fit the scoring backend on pool embeddings")
    sub.add_parser("score", parents=[common], help="score the trial list")
    sub.add_parser("evaluate", parents=[common],
                   help="report EER and minDCF for scored systems")
    fuse = sub.add_parser("fuse", parents=[common],
                          help="average the scores of two systems")
    fuse.add_argument("--inputs", required=True, metavar="A,B",
                      help="the two systems to fuse")
    sub.add_parser("gradcheck", parents=[common],
                   help="run the finite-difference gradient suite")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    outputs = _Outputs()
    try:
        config = resolve_config(args.config, args.seed, args.system)
        os.makedirs(args.out, exist_ok=True)
        try:
            _COMMANDS[args.command](args, config, outputs)
        except BaseException:
            for path in outputs.paths:
                try:
                    if os.path.exists(path):
                        os.remove(path)
                except OSError:
                    pass  # keep the original error, not the cleanup's
            raise
    except NumericError as exc:
        print(f"svkit: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, FormatError, ShapeError) as exc:
        print(f"svkit: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
