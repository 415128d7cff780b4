"""Command-line entry point: ``asrdefense <command> [--config ...]``.

Artifacts live under the output directory::

    config.resolved.yaml   corpus/   models/   attacks/   results/

Exit codes: 0 ok, 2 invalid config or missing artifact, 3 runtime failure,
4 evaluation finished but some cells had failed attacks.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import yaml

from .asr import AsrConfig, AsrModel, train
from .attacks import AttackSpec, ModelChain
from .config import SYSTEMS, VARIANT_SYSTEM, ConfigError, ExperimentConfig, load_config
from .corpus import (Corpus, assign_target, generate_offline_attacks, load_corpus, save_corpus,
                     synthesize_corpus, AttackDataset)
from .defenses import FinetuneConfig, finetune
from .denoiser import FULL_SHAPE, DenoiserConfig, DenoiserModel, train_offline
from .metrics import CellResult, boxplot_csv, evaluate_cell, results_csv, summarize_boxplot
from .parallel import default_workers
from .signal import StftConfig

log = logging.getLogger("asrdefense")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_PARTIAL = 0, 2, 3, 4
SNAPSHOT = "config.resolved.yaml"


class MissingArtifact(FileNotFoundError):
    pass


# keys that do not change any artifact
_RUN_ONLY = ("out", "workers")


def same_experiment(a: str, b: str) -> bool:
    da, db = yaml.safe_load(a) or {}, yaml.safe_load(b) or {}
    for key in _RUN_ONLY:
        da.pop(key, None)
        db.pop(key, None)
    return da == db


class Run:
    """Resolved config plus the paths every stage reads and writes."""

    def __init__(self, cfg: ExperimentConfig, overwrite: bool = False):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.overwrite = overwrite
        self.workers = cfg.workers or default_workers()

    corpus_dir = property(lambda self: self.root / "corpus")
    asr_dir = property(lambda self: self.root / "models" / "asr")
    attacks_dir = property(lambda self: self.root / "attacks" / "train")
    denoiser_dir = property(lambda self: self.root / "models" / "denoiser")
    results_dir = property(lambda self: self.root / "results")

    def variant_dir(self, variant: str) -> Path:
        return self.root / "models" / f"finetune_{variant}"

    def snapshot(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        text = self.cfg.dump()
        path = self.root / SNAPSHOT
        if path.exists() and not self.overwrite and not same_experiment(path.read_text(), text):
            raise ConfigError(f"{self.root} holds artifacts from a different config; "
                              "pass --overwrite or choose another --out")
        path.write_text(text)

    def done(self, marker: Path, what: str) -> bool:
        """True if ``marker`` exists and we should skip; clears it under --overwrite."""
        if not marker.exists():
            return False
        if self.overwrite:
            target = marker if marker.is_dir() else marker.parent
            shutil.rmtree(target, ignore_errors=True)
            return False
        log.info("%s already present at %s; skipping (use --overwrite to redo)", what, marker)
        return True

    # loaders ----------------------------------------------------------

    def _require(self, path: Path, what: str, cmd: str) -> None:
        if not path.exists():
            raise MissingArtifact(f"missing {what} at {path}; run `asrdefense {cmd}` first")

    def corpus(self) -> Corpus:
        self._require(self.corpus_dir / "corpus.json", "corpus", "synth-corpus")
        return load_corpus(self.corpus_dir)

    def asr(self) -> AsrModel:
        self._require(self.asr_dir / "meta.json", "recognizer checkpoint", "train-asr")
        return AsrModel.load(self.asr_dir)

    def denoiser(self) -> DenoiserModel:
        self._require(self.denoiser_dir / "meta.json", "denoiser checkpoint", "train-denoiser")
        return DenoiserModel.load(self.denoiser_dir)

    def attacks(self) -> AttackDataset:
        self._require(self.attacks_dir / "manifest.jsonl", "attack dataset", "gen-attacks")
        return AttackDataset.load(self.attacks_dir)

    def finetuned(self, variant: str) -> tuple[AsrModel, DenoiserModel | None]:
        d = self.variant_dir(variant)
        self._require(d / "asr" / "meta.json", f"{variant} checkpoint", f"finetune --variant {variant}")
        den = DenoiserModel.load(d / "denoiser") if (d / "denoiser" / "meta.json").exists() else None
        return AsrModel.load(d / "asr"), den


# ----------------------------------------------------------------------
# stages


def cmd_synth_corpus(run: Run) -> int:
    if run.done(run.corpus_dir / "corpus.json", "corpus"):
        return EXIT_OK
    corpus = synthesize_corpus(run.cfg.corpus)
    save_corpus(corpus, run.corpus_dir)
    log.info("corpus: %d train / %d test utterances", len(corpus.train), len(corpus.test))
    return EXIT_OK


def cmd_train_asr(run: Run) -> int:
    if run.done(run.asr_dir / "meta.json", "recognizer"):
        return EXIT_OK
    corpus = run.corpus()
    a = run.cfg.asr
    model = AsrModel(corpus.vocab, AsrConfig(StftConfig(a.frame_len, a.frame_shift, a.window),
                                             a.channels, a.kernel, a.layers, a.smooth_frames),
                     seed=run.cfg.seed)
    hist = train(model, corpus.train, epochs=a.epochs, lr=a.lr, seed=run.cfg.seed,
                 batch_size=a.batch_size, average_last=a.average_last, out_dir=run.asr_dir)
    log.info("recognizer trained, final loss %.4f", hist[-1])
    return EXIT_OK


def cmd_gen_attacks(run: Run) -> int:
    if run.done(run.attacks_dir / "manifest.jsonl", "attack dataset"):
        return EXIT_OK
    corpus, asr = run.corpus(), run.asr()
    ds = generate_offline_attacks(ModelChain(asr), corpus, run.attacks_dir, seed=run.cfg.seed,
                                  workers=run.workers, grids=run.cfg.attacks)
    log.info("attack dataset: %d rows", len(ds.rows))
    return EXIT_OK


def cmd_train_denoiser(run: Run) -> int:
    if run.done(run.denoiser_dir / "meta.json", "denoiser"):
        return EXIT_OK
    corpus, ds = run.corpus(), run.attacks()
    benign, attacked = ds.pairs({u.utt_id: u for u in corpus.train})
    d = run.cfg.denoiser
    model = DenoiserModel(FULL_SHAPE if d.preset == "full" else DenoiserConfig(), seed=run.cfg.seed)
    hist = train_offline(model, benign, attacked, epochs=d.epochs, lr=d.lr, seed=run.cfg.seed,
                         batch_size=d.batch_size, out_dir=run.denoiser_dir)
    log.info("denoiser MRSTFT loss %.4f -> %.4f", hist[0], hist[-1])
    return EXIT_OK


def cmd_finetune(run: Run, variants=None) -> int:
    f = run.cfg.finetune
    for variant in variants or f.variants:
        out = run.variant_dir(variant)
        if run.done(out / "asr" / "meta.json", f"{variant} fine-tune"):
            continue
        corpus = run.corpus()
        asr = run.asr()
        den = None if variant == "asr_only" else run.denoiser()
        cfg = FinetuneConfig(variant=variant, iterations=f.iterations, eps_low=f.eps_low,
                             eps_high=f.eps_high, base_lr=f.base_lr, lr_scale=f.lr_scale,
                             epochs=f.epochs, batch_size=f.batch_size, seed=run.cfg.seed)
        hist = finetune(variant, asr, den, corpus.train, cfg)
        asr.save(out / "asr", epoch=f.epochs)
        if den is not None:
            den.save(out / "denoiser", epoch=f.epochs)
        log.info("%s fine-tuned, adversarial loss %.4f -> %.4f", variant, hist[0], hist[-1])
    return EXIT_OK


def build_systems(run: Run) -> dict[str, ModelChain]:
    wanted = run.cfg.evaluation.systems
    asr = run.asr()
    # every defended system also carries the smoothing noise stage
    sigma = run.cfg.smoothing.sigma
    chains: dict[str, ModelChain] = {}
    for name in SYSTEMS:
        if name not in wanted:
            continue
        if name == "Baseline":
            chains[name] = ModelChain(asr)
        elif name == "RS0.001":
            chains[name] = ModelChain(asr, sigma=sigma)
        elif name == "DENOISER":
            chains[name] = ModelChain(asr, run.denoiser(), sigma=sigma)
        else:
            variant = next(v for v, s in VARIANT_SYSTEM.items() if s == name)
            chains[name] = ModelChain(*run.finetuned(variant), sigma=sigma)
    return chains


def grid_specs(run: Run) -> list[AttackSpec]:
    ev = run.cfg.evaluation
    specs = []
    for iters in ev.iterations:
        for eps in ev.epsilons:
            if iters == 1:
                specs.append(AttackSpec(norm=ev.norm, epsilon=eps, iterations=1, step=eps, mode=ev.mode))
            else:
                specs.append(AttackSpec(norm=ev.norm, epsilon=eps, iterations=iters, mode=ev.mode))
    return specs


def cmd_evaluate(run: Run) -> int:
    out = run.results_dir
    if run.done(out / "results.csv", "results"):
        return EXIT_OK
    corpus = run.corpus()
    pool = [u.words for u in corpus.train]
    targets = {u.utt_id: assign_target(u, pool, run.cfg.seed) for u in corpus.test}
    cells: list[CellResult] = []
    failures: dict[str, list[str]] = {}
    for system, chain in build_systems(run).items():
        for spec in grid_specs(run):
            t0 = time.perf_counter()
            report, _ = evaluate_cell(chain, corpus.test, spec, targets, run.cfg.seed, corpus.render_labels,
                                      chunk_size=run.cfg.evaluation.chunk_size, workers=run.workers)
            cell = CellResult(system, spec.norm, spec.epsilon, spec.iterations, report)
            cells.append(cell)
            if report.failed:
                failures[f"{system}/{cell.attack}/{spec.epsilon:g}"] = list(report.failed)
            log.info("%-28s %-7s eps=%-7g GT %6.2f TGT %6.2f (%.0fs)", system, cell.attack, spec.epsilon,
                     report.gt_wer, report.tgt_wer if report.tgt_wer is not None else float("nan"),
                     time.perf_counter() - t0)
    out.mkdir(parents=True, exist_ok=True)
    (out / "boxplot.csv").write_text(boxplot_csv(
        summarize_boxplot(cells, exclude_eps=run.cfg.evaluation.boxplot_exclude)))
    (out / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    # results.csv last: it is the completion marker
    (out / "results.csv").write_text(results_csv(cells))
    if failures:
        log.warning("%d cell(s) had failed attacks; see %s", len(failures), out / "failures.json")
        return EXIT_PARTIAL
    return EXIT_OK


TIMING = "timing.json"


def cmd_pipeline(run: Run) -> int:
    """Run every stage in order; wall-clock seconds per stage go to timing.json.

    Stages skipped because their outputs exist keep their earlier timing.
    """
    status = EXIT_OK
    path = run.root / TIMING
    timing = json.loads(path.read_text()) if path.exists() else {}
    for stage in (cmd_synth_corpus, cmd_train_asr, cmd_gen_attacks, cmd_train_denoiser,
                  cmd_finetune, cmd_evaluate):
        name = stage.__name__.removeprefix("cmd_").replace("_", "-")
        log.info("== %s", name)
        t0 = time.perf_counter()
        status = max(status, stage(run))
        elapsed = time.perf_counter() - t0
        if elapsed > 1.0 or name not in timing:
            timing[name] = round(elapsed, 1)
        path.write_text(json.dumps(timing, indent=2) + "\n")
    return status


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "train-asr": cmd_train_asr,
    "gen-attacks": cmd_gen_attacks,
    "train-denoiser": cmd_train_denoiser,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int,
                        help="worker threads for per-utterance stages (default: $ASRDEFENSE_WORKERS or 1)")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--overwrite", action="store_true", help="redo stages whose outputs exist")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="asrdefense", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "finetune":
            p.add_argument("--variant", action="append", choices=["asr_only", "joint", "joint_frozen"],
                           help="variant(s) to train; default: all in the config")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.workers is not None:
        overrides["workers"] = args.workers
    return replace(cfg, **overrides).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "show-config":
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        run = Run(cfg, overwrite=args.overwrite)
        run.snapshot()
        if args.command == "finetune":
            return cmd_finetune(run, args.variant)
        return COMMANDS[args.command](run)
    except (ConfigError, MissingArtifact) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001  (any other failure is a runtime failure)
        log.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
