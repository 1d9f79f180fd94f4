# dccrn_kws/routers/simulate.py
import logging
from pathlib import Path
from typing import Optional

import orjson
import pandas as pd
import typer

from dccrn_kws.audio_dsp import write_wav
from dccrn_kws.errors import SimulationError
from dccrn_kws.routers.common import console, required, run_config
from dccrn_kws.simulate import Simulator, UtteranceType, load_manifest
from dccrn_kws.toy_corpus import ToyCorpusSpec, make_toy_corpus

logger = logging.getLogger(__name__)

router = typer.Typer()


@router.command("simulate")
def simulate(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run config file"),
    manifest: Optional[Path] = typer.Option(None, help="Manifest to mix from (default: train_manifest)"),
    output_dir: Path = typer.Option(Path("runs/simulated"), help="Where mixtures are written"),
    count: int = typer.Option(10, min=1, help="Number of mixtures"),
    seed: Optional[int] = typer.Option(None, help="Override the run seed"),
    snr_db: Optional[float] = typer.Option(None, help="Fixed SNR instead of the sampled range"),
    kind: Optional[UtteranceType] = typer.Option(None, help="Only mix keyword or negative entries"),
):
    """Write noisy/target WAV pairs with a frame label sidecar per mixture."""
    run_cfg = run_config(config, seed=seed, output_dir=output_dir)
    entries = load_manifest(required(manifest or run_cfg.paths.train_manifest, "manifest"))
    simulator = Simulator(entries, run_cfg.simulation, run_cfg.spectro, seed=run_cfg.train.seed)
    pool = simulator.keywords + simulator.negatives
    if kind is not None:
        pool = [e for e in pool if e.type == kind]
    if not pool:
        raise SimulationError("manifest has no keyword or negative entries to mix")

    output_dir.mkdir(parents=True, exist_ok=True)
    run_cfg.write_resolved(output_dir)
    written, skipped = [], 0
    with open(output_dir / "mixtures.jsonl", "wb") as meta_fh:
        for index in range(count):
            entry = pool[index % len(pool)]
            utt = simulator.generate(entry, index, snr_db=snr_db)
            if utt is None:
                skipped += 1
                continue
            stem = f"{index:05d}_{entry.id}"
            write_wav(output_dir / f"{stem}_noisy.wav", utt.pair.noisy)
            write_wav(output_dir / f"{stem}_target.wav", utt.pair.target)
            labels = pd.DataFrame({"frame": range(len(utt.labels)), "label": utt.labels.labels.astype(int)})
            labels.to_csv(output_dir / f"{stem}.labels.tsv", sep="\t", index=False)
            record = {"stem": stem, **utt.pair.meta.model_dump(mode="json"), **utt.labels.counts()}
            meta_fh.write(orjson.dumps(record, option=orjson.OPT_SORT_KEYS) + b"\n")
            written.append(stem)
    logger.info(f"✅ Wrote {len(written)} mixtures to {output_dir} ({skipped} skipped)")
    console.print(f"{len(written)} mixtures written to {output_dir}")


@router.command("make-toy-corpus")
def make_toy_corpus_command(
    output_dir: Path = typer.Option(Path("data/toy"), help="Corpus directory"),
    train_speakers: int = typer.Option(10, min=1),
    test_speakers: int = typer.Option(4, min=1),
    keywords_per_speaker: int = typer.Option(2, min=1),
    negatives_per_speaker: int = typer.Option(2, min=1),
    seed: int = typer.Option(0),
):
    """Synthesize the desk-scale corpus and its train/test manifests."""
    spec = ToyCorpusSpec(
        train_speakers=train_speakers,
        test_speakers=test_speakers,
        keywords_per_speaker=keywords_per_speaker,
        negatives_per_speaker=negatives_per_speaker,
        seed=seed,
    )
    manifests = make_toy_corpus(output_dir, spec)
    for split, path in manifests.items():
        console.print(f"{split}: {path}")
