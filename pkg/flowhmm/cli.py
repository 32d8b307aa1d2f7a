"""
flowhmm command-line interface.

Every subcommand is a function of its inputs, flags and seed; result files are rewritten
byte for byte on a rerun. Diagnostics go to stderr.
"""

import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
import yaml
from pydantic import ValidationError

from flowhmm import __version__
from flowhmm.classify import ClassifierBank, classify_all, evaluate, fuse
from flowhmm.config import Config, MfccConfig, load_config
from flowhmm.exceptions import ConfigurationError, DataError, FlowHmmError
from flowhmm.experiments import run_comparison, run_robustness
from flowhmm.features import Waveform, compute_features, gen_noise, mix_noise, read_wav, write_wav
from flowhmm.hmm import HmmModel
from flowhmm.logger import get_logger, log_run_header, setup_logging
from flowhmm.metrics import TrainingMetrics
from flowhmm.model_io import (
    CHECKPOINT_FORMAT_VERSION,
    FEATURE_FORMAT_VERSION,
    MODEL_FORMAT_VERSION,
    STATE_JSON,
    Manifest,
    ManifestEntry,
    load_checkpoint,
    load_dataset,
    load_model,
    read_manifest,
    read_predictions,
    save_checkpoint,
    save_model,
    write_features,
    write_manifest,
    write_predictions,
    write_report,
    write_train_log,
)
from flowhmm.numerics import derive_rng
from flowhmm.selftest import run_selftest
from flowhmm.synth import (
    CubicWarp,
    make_desk_corpus,
    make_tone_corpus,
    write_corpus,
    write_wave_corpus,
)
from flowhmm.trainer import CheckpointFn, TrainingState, train_class_set

logger = get_logger("cli")

CLASSES_FILE = "classes.txt"
TRAIN_LOG_FILE = "train_log.jsonl"

EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)
EXISTING_DIR = click.Path(exists=True, file_okay=False, path_type=Path)
OUTPUT_FILE = click.Path(dir_okay=False, path_type=Path)
OUTPUT_DIR = click.Path(file_okay=False, path_type=Path)


@dataclass
class CliState:
    config: Config


def _split(value: str) -> List[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


def _override(config: Config, section: str, **values: Any) -> Config:
    """Apply CLI flags that were actually given on top of the file configuration."""
    given = {key: value for key, value in values.items() if value is not None}
    if not given:
        return config
    updated = getattr(config, section).model_copy(update=given)
    # model_copy does not validate
    updated = type(updated)(**updated.model_dump())
    return config.model_copy(update={section: updated})


def _with_seed(config: Config, seed: Optional[int]) -> Config:
    """Replace the master seed and the training seed together."""
    if seed is None:
        return config
    config = Config(**{**config.model_dump(), "seed": seed})
    return _override(config, "train", seed=seed)


seed_option = click.option(
    "--seed", type=click.IntRange(min=0), default=None, help="Seed for this command"
)


def _load_mfcc(config: Config, path: Path) -> MfccConfig:
    """Read MFCC settings from YAML, either bare or under an ``mfcc`` key."""
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Cannot parse MFCC configuration {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"MFCC configuration {path} must be a mapping")
    data = data.get("mfcc", data) or {}
    return MfccConfig(**{**config.mfcc.model_dump(), **data})


def _run_header(ctx: click.Context, config: Config) -> Dict[str, Any]:
    return {
        "version": __version__,
        "command": ctx.invoked_subcommand,
        "seed": config.seed,
        "formats": {
            "model": MODEL_FORMAT_VERSION,
            "features": FEATURE_FORMAT_VERSION,
            "checkpoint": CHECKPOINT_FORMAT_VERSION,
        },
        "config": config.model_dump(mode="json"),
    }


@click.group()
@click.version_option(__version__, "--version", "-v", prog_name="flowhmm")
@click.option(
    "--config",
    "-f",
    "config_path",
    type=EXISTING_FILE,
    help="Path to configuration file",
)
@click.option("--log-level", default=None, help="Override the configured log level")
@click.option("--jobs", "-j", type=click.IntRange(1, 64), default=None, help="Parallel workers")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Master seed")
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Optional[Path],
    log_level: Optional[str],
    jobs: Optional[int],
    seed: Optional[int],
) -> None:
    """Flow-based HMM training, classification and evaluation."""
    config = load_config(str(config_path) if config_path else None)
    top: Dict[str, Any] = {"log_level": log_level, "jobs": jobs}
    top = {key: value for key, value in top.items() if value is not None}
    if top:
        config = Config(**{**config.model_dump(), **top})
    config = _with_seed(config, seed)
    setup_logging(config)
    log_run_header(logger, _run_header(ctx, config))
    ctx.obj = CliState(config)


# ---------------------------------------------------------------------------
# features


@cli.group()
def features() -> None:
    """Feature extraction and noise corruption."""


def _wave_entries(
    wav_dir: Optional[Path], wavs: Optional[Path]
) -> Tuple[List[str], List[Tuple[str, Path, str]]]:
    """Resolve ``(labels, [(id, path, label)])`` from a WAV manifest or a directory tree."""
    if (wav_dir is None) == (wavs is None):
        raise click.UsageError("Give exactly one of --wav-dir and --wavs")
    if wavs is not None:
        manifest = read_manifest(wavs)
        root = wavs.parent
        return manifest.labels, [(e.utterance_id, root / e.path, e.label) for e in manifest.entries]
    assert wav_dir is not None
    files = sorted(wav_dir.rglob("*.wav"))
    if not files:
        raise DataError(f"No .wav files under {wav_dir}")
    # <wav-dir>/<label>/<id>.wav; files directly under wav-dir are "unlabeled"
    entries = [
        (f.stem, f, f.parent.name if f.parent != wav_dir else "unlabeled") for f in files
    ]
    labels = sorted({label for _, _, label in entries})
    return labels, entries


@features.command("extract")
@click.option("--wav-dir", type=EXISTING_DIR)
@click.option("--wavs", type=EXISTING_FILE,
              help="Manifest of WAV files")
@click.option("--out", "out_path", required=True, type=OUTPUT_FILE,
              help="Feature archive to write")
@click.option("--list", "list_path", type=OUTPUT_FILE,
              help="Manifest to write (default: archive path with .lst suffix)")
@click.option("--deltas/--no-deltas", default=True, help="Append delta and delta-delta")
@click.option("--cmvn/--no-cmvn", default=True, help="Per-utterance mean/variance normalization")
@click.option("--mfcc-config", type=EXISTING_FILE,
              help="YAML file with MFCC settings overriding the configuration")
@click.pass_obj
def features_extract(
    obj: CliState,
    wav_dir: Optional[Path],
    wavs: Optional[Path],
    out_path: Path,
    list_path: Optional[Path],
    deltas: bool,
    cmvn: bool,
    mfcc_config: Optional[Path],
) -> None:
    """Compute MFCC features for every waveform."""
    mfcc = _load_mfcc(obj.config, mfcc_config) if mfcc_config else obj.config.mfcc
    labels, entries = _wave_entries(wav_dir, wavs)
    records = []
    for utt_id, path, _ in entries:
        records.append((utt_id, compute_features(read_wav(path), mfcc, deltas, cmvn)))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_features(out_path, records)
    list_path = list_path if list_path is not None else out_path.with_suffix(".lst")
    archive = os.path.relpath(out_path.resolve(), list_path.parent.resolve())
    manifest = Manifest(labels, [ManifestEntry(u, archive, label) for u, _, label in entries])
    write_manifest(list_path, manifest)
    logger.info(f"Extracted features of {len(records)} utterances to {out_path}")


@features.command("noise")
@click.option("--in", "--wavs", "wavs", required=True, type=EXISTING_FILE,
              help="Manifest of clean WAV files")
@click.option("--out-dir", required=True, type=OUTPUT_DIR)
@click.option("--snr", "snr_db", type=float, default=10.0, show_default=True, help="SNR in dB")
@click.option("--kind", type=click.Choice(["white", "pink", "file"]), default="white",
              show_default=True)
@click.option("--noise-file", type=EXISTING_FILE)
@click.option("--mct", is_flag=True, help="Keep the clean copies too (multi-condition training)")
@seed_option
@click.pass_obj
def features_noise(
    obj: CliState,
    wavs: Path,
    out_dir: Path,
    snr_db: float,
    kind: str,
    noise_file: Optional[Path],
    mct: bool,
    seed: Optional[int],
) -> None:
    """Corrupt waveforms with additive noise at a fixed SNR."""
    if kind == "file" and noise_file is None:
        raise click.UsageError("--kind file requires --noise-file")
    recorded: Optional[Waveform] = read_wav(noise_file) if kind == "file" and noise_file else None
    manifest = read_manifest(wavs)
    rng = derive_rng(_with_seed(obj.config, seed).seed, 0)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in manifest.entries:
        speech = read_wav(wavs.parent / entry.path)
        noise = recorded if recorded is not None else gen_noise(
            kind, speech.samples.size, speech.sample_rate, rng
        )
        if mct:
            clean = f"wav/{entry.utterance_id}.wav"
            write_wav(out_dir / clean, speech)
            entries.append(ManifestEntry(entry.utterance_id, clean, entry.label))
        noisy_id = f"{entry.utterance_id}_snr{snr_db:g}" if mct else entry.utterance_id
        noisy = f"wav/{noisy_id}.wav"
        write_wav(out_dir / noisy, mix_noise(speech, noise, snr_db, rng))
        entries.append(ManifestEntry(noisy_id, noisy, entry.label))
    write_manifest(out_dir / wavs.name, Manifest(manifest.labels, entries))
    logger.info(f"Wrote {len(entries)} waveforms at {snr_db:g} dB SNR to {out_dir}")


# ---------------------------------------------------------------------------
# synth


@cli.group()
def synth() -> None:
    """Synthetic corpora."""


@synth.command("make")
@click.option("--preset", type=click.Choice(["desk", "tones"]), default="desk", show_default=True)
@click.option("--out", "out_dir", required=True, type=OUTPUT_DIR)
@seed_option
@click.pass_obj
def synth_make(obj: CliState, preset: str, out_dir: Path, seed: Optional[int]) -> None:
    """Sample a synthetic benchmark corpus."""
    config = _with_seed(obj.config, seed)
    if preset == "desk":
        corpus, _ = make_desk_corpus(config.seed, jobs=config.jobs)
        write_corpus(out_dir, corpus)
    else:
        write_wave_corpus(out_dir, make_tone_corpus(config.seed, jobs=config.jobs))


@synth.command("warp")
@click.option("--in", "in_dir", required=True,
              type=EXISTING_DIR)
@click.option("--out", "out_dir", required=True, type=OUTPUT_DIR)
@click.option("--strength", type=click.FloatRange(min=0.0), default=0.3, show_default=True)
def synth_warp(in_dir: Path, out_dir: Path, strength: float) -> None:
    """Apply the elementwise cubic warp to a feature corpus."""
    warp = CubicWarp(strength)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        manifest, dataset = load_dataset(in_dir / f"{split}.lst")
        archive = f"{split}.arc"
        write_features(out_dir / archive, [(u, warp.forward(feat)) for u, feat, _ in dataset])
        entries = [ManifestEntry(u, archive, label) for u, _, label in dataset]
        write_manifest(out_dir / f"{split}.lst", Manifest(manifest.labels, entries))
    logger.info(f"Warped corpus written to {out_dir}")


# ---------------------------------------------------------------------------
# train / classify / fuse / eval


def _class_dir(index: int) -> str:
    return f"class{index:03d}"


def _checkpoint_writer(root: Path) -> Callable[[int, str], CheckpointFn]:
    def factory(index: int, label: str) -> CheckpointFn:
        return lambda state: save_checkpoint(root / _class_dir(index), state)

    return factory


def _checkpoint_reader(root: Path) -> Callable[[int, str], Optional[TrainingState]]:
    def resume(index: int, label: str) -> Optional[TrainingState]:
        path = root / _class_dir(index)
        if not (path / STATE_JSON).exists():
            return None
        logger.info(f"[{label}] resuming from {path}")
        return load_checkpoint(path)

    return resume


@cli.command()
@click.option("--data", required=True, type=EXISTING_FILE,
              help="Training manifest")
@click.option("--out", "out_dir", required=True, type=OUTPUT_DIR)
@click.option("--model", "kind", type=click.Choice(["gmm", "nvp", "glow"]), default=None)
@click.option("--states", type=click.IntRange(min=1), default=None)
@click.option("--nmix", type=click.IntRange(min=1), default=None)
@click.option("--lr", type=click.FloatRange(min=0.0, min_open=True), default=None)
@click.option("--batch", type=click.IntRange(min=1), default=None)
@click.option("--delta", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True),
              default=None, help="Relative convergence threshold")
@click.option("--streak", type=click.IntRange(min=1), default=None)
@click.option("--inner-max", type=click.IntRange(min=0), default=None)
@click.option("--outer-iters", type=click.IntRange(min=0), default=None)
@click.option("--coupling-layers", type=click.IntRange(min=2), default=None)
@click.option("--flow-steps", type=click.IntRange(min=1), default=None)
@click.option("--metrics-file", type=OUTPUT_FILE,
              help="Write Prometheus metrics in text format")
@click.option("--checkpoint-dir", type=OUTPUT_DIR,
              help="Checkpoint every outer iteration; resume from existing checkpoints")
@seed_option
@click.pass_obj
def train(
    obj: CliState,
    data: Path,
    out_dir: Path,
    kind: Optional[str],
    states: Optional[int],
    nmix: Optional[int],
    lr: Optional[float],
    batch: Optional[int],
    delta: Optional[float],
    streak: Optional[int],
    inner_max: Optional[int],
    outer_iters: Optional[int],
    coupling_layers: Optional[int],
    flow_steps: Optional[int],
    metrics_file: Optional[Path],
    checkpoint_dir: Optional[Path],
    seed: Optional[int],
) -> None:
    """Train one model per class of a labeled manifest."""
    config = _override(
        _with_seed(obj.config, seed), "model", kind=kind, num_states=states, num_mix=nmix
    )
    config = _override(
        config,
        "train",
        learning_rate=lr,
        batch_size=batch,
        convergence_threshold=delta,
        convergence_streak=streak,
        max_inner_iters=inner_max,
        outer_iters=outer_iters,
    )
    config = _override(config, "flow", coupling_layers=coupling_layers, flow_steps=flow_steps)

    manifest, dataset = load_dataset(data)
    labels = manifest.labels
    datasets = [[feat for _, feat, label in dataset if label == c] for c in labels]

    metrics = TrainingMetrics() if metrics_file is not None else None
    if metrics is not None:
        metrics.set_run_info(__version__, config.model.kind)

    results = train_class_set(
        datasets,
        labels,
        config,
        metrics,
        checkpoint_factory=_checkpoint_writer(checkpoint_dir) if checkpoint_dir else None,
        resume_fn=_checkpoint_reader(checkpoint_dir) if checkpoint_dir else None,
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    for index, (model, _) in enumerate(results):
        save_model(model, out_dir / _class_dir(index))
    (out_dir / CLASSES_FILE).write_text(
        "".join(f"{_class_dir(i)}\n" for i in range(len(results))), encoding="utf-8"
    )
    write_train_log(out_dir / TRAIN_LOG_FILE, [log for _, log in results])
    if metrics is not None and metrics_file is not None:
        metrics.write_textfile(metrics_file)
    logger.info(f"Saved {len(results)} class models to {out_dir}")


def load_bank(paths: Sequence[Path]) -> ClassifierBank:
    """
    Build a classifier bank from model directories.

    A directory holding ``classes.txt`` (the output of ``train``) expands to its class
    models; any other directory is a single saved model.
    """
    models: List[HmmModel] = []
    for path in paths:
        classes = path / CLASSES_FILE
        if classes.exists():
            names = [line.strip() for line in classes.read_text(encoding="utf-8").splitlines()]
            models += [load_model(path / name) for name in names if name]
        else:
            models.append(load_model(path))
    return ClassifierBank.from_models(models)


@cli.command("classify")
@click.option("--models", required=True, help="Comma-separated model directories")
@click.option("--data", required=True, type=EXISTING_FILE)
@click.option("--out", "out_path", required=True, type=OUTPUT_FILE)
@click.pass_obj
def classify_command(obj: CliState, models: str, data: Path, out_path: Path) -> None:
    """Label every utterance with its most likely class model."""
    bank = load_bank([Path(p) for p in _split(models)])
    _, dataset = load_dataset(data)
    predictions = classify_all(
        bank, [(utt, feat) for utt, feat, _ in dataset], jobs=obj.config.jobs
    )
    write_predictions(out_path, bank.class_labels, predictions)
    logger.info(f"Classified {len(predictions)} utterances with {len(bank.models)} models")


@cli.command("fuse")
@click.option("--preds", required=True, help="Comma-separated prediction files")
@click.option("--out", "out_path", required=True, type=OUTPUT_FILE)
@seed_option
@click.pass_obj
def fuse_command(obj: CliState, preds: str, out_path: Path, seed: Optional[int]) -> None:
    """Majority-vote fusion of prediction files from different model families."""
    loaded = [read_predictions(p) for p in _split(preds)]
    labels = loaded[0][0]
    for other, _ in loaded[1:]:
        if sorted(other) != sorted(labels):
            raise DataError(f"Prediction files disagree on the class set: {labels} vs {other}")
    fused = fuse([p for _, p in loaded], derive_rng(_with_seed(obj.config, seed).seed, 0))
    write_predictions(out_path, labels, fused)
    logger.info(f"Fused {len(loaded)} prediction files into {out_path}")


def _read_categories(path: Path) -> Dict[str, str]:
    mapping = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            label, _, category = line.partition("\t")
            mapping[label.strip()] = category.strip()
    return mapping


@cli.command("eval")
@click.option("--pred", required=True, type=EXISTING_FILE)
@click.option("--truth", required=True, type=EXISTING_FILE,
              help="Manifest with the reference labels")
@click.option("--report", "report_path", type=OUTPUT_FILE)
@click.option("--by-class", is_flag=True, help="Per-class accuracy table")
@click.option("--categories", type=EXISTING_FILE,
              help="label<TAB>category lines")
@click.option("--train-manifest", type=EXISTING_FILE,
              help="Training manifest for the sample-ratio column")
def eval_command(
    pred: Path,
    truth: Path,
    report_path: Optional[Path],
    by_class: bool,
    categories: Optional[Path],
    train_manifest: Optional[Path],
) -> None:
    """Accuracy, weighted precision/recall/F1 and confusion matrix."""
    labels, predictions = read_predictions(pred)
    reference = {e.utterance_id: e.label for e in read_manifest(truth).entries}
    missing = [p.utterance_id for p in predictions if p.utterance_id not in reference]
    if missing:
        raise DataError(f"{len(missing)} predicted utterances are not in {truth}: {missing[:5]}")
    report = evaluate(
        [p.label for p in predictions],
        [reference[p.utterance_id] for p in predictions],
        labels=labels,
        train_counts=read_manifest(train_manifest).counts() if train_manifest else None,
        categories=_read_categories(categories) if categories else None,
    )
    text = report.render(by_class=by_class)
    click.echo(text, nl=False)
    if report_path is not None:
        write_report(report_path, text, report.to_dict())


# ---------------------------------------------------------------------------
# selftest / experiment


@cli.command()
@click.option("--fast", is_flag=True, help="Smaller instances")
@click.pass_obj
def selftest(obj: CliState, fast: bool) -> int:
    """Run the built-in correctness oracles."""
    results = run_selftest(fast=fast, seed=obj.config.seed)
    for result in results:
        click.echo(f"{'PASS' if result.passed else 'FAIL'}  {result.name}: {result.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        click.echo(f"{len(failed)} of {len(results)} suites failed", err=True)
        return 1
    return 0


@cli.group()
def experiment() -> None:
    """Desk-scale experiments."""


@experiment.command("compare")
@click.option("--kinds", default="gmm,nvp", show_default=True)
@click.option("--nmix", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--strength", type=click.FloatRange(min=0.0), default=0.3, show_default=True)
@click.option("--out", "out_path", type=OUTPUT_FILE)
@click.pass_obj
def experiment_compare(
    obj: CliState, kinds: str, nmix: int, strength: float, out_path: Optional[Path]
) -> None:
    """Compare model families with equal mixture sizes on the warped desk corpus."""
    results = run_comparison(obj.config, _split(kinds), num_mix=nmix, warp_strength=strength)
    lines = ["kind     accuracy  heldout_ll"]
    lines += [f"{r.kind:<8} {100 * r.accuracy:8.2f}  {r.heldout_ll:10.4f}" for r in results]
    text = "\n".join(lines) + "\n"
    click.echo(text, nl=False)
    if out_path is not None:
        write_report(out_path, text, {"results": [asdict(r) for r in results]})


@experiment.command("robustness")
@click.option("--kinds", default="gmm,nvp,glow", show_default=True)
@click.option("--snrs", default="25,20,15,10", show_default=True, help="Test SNRs in dB")
@click.option("--noise", "noise_kind", type=click.Choice(["white", "pink"]), default="white",
              show_default=True)
@click.option("--mct", is_flag=True, help="Multi-condition training")
@click.option("--out", "out_path", type=OUTPUT_FILE)
@click.pass_obj
def experiment_robustness(
    obj: CliState, kinds: str, snrs: str, noise_kind: str, mct: bool, out_path: Optional[Path]
) -> None:
    """Accuracy per test SNR for each model family and their voting fusion."""
    try:
        levels = [float(x) for x in _split(snrs)]
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="--snrs") from e
    result = run_robustness(
        obj.config, _split(kinds), levels, noise_kind=noise_kind, multi_condition=mct
    )
    text = result.render()
    click.echo(text, nl=False)
    if out_path is not None:
        write_report(out_path, text, {"conditions": result.conditions, "accuracy": result.accuracy})


# ---------------------------------------------------------------------------
# Entry points


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Execute the CLI and map outcomes to exit codes.

    Returns:
        0 on success, 1 on a flowhmm or I/O error, 2 on a usage error or no arguments
    """
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        with click.Context(cli, info_name="flowhmm") as ctx:
            click.echo(ctx.get_help(), err=True)
        return 2
    try:
        result = cli.main(args=args, prog_name="flowhmm", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except ValidationError as e:
        click.echo(f"Error: invalid configuration\n{e}", err=True)
        return 1
    except FlowHmmError as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"Error: {e}", err=True)
        return 1
    except OSError as e:
        click.echo(f"Error: {e}", err=True)
        return 1
    return result if isinstance(result, int) else 0


def main() -> None:
    """Console-script entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
