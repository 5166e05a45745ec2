"""Command line entry point: ``train``, ``detect``, ``eval`` and ``synth``.

Exit codes: 0 success, 1 internal error, 2 bad user input.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline
from .config import ConfigError, dump_config, load_config
from .dataio import SynthConfig, save_descriptors, save_ground_truth, synth_sequence

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2


def plant_loops(n_images: int, n_loops: int, seed: int = 0) -> list[tuple[int, int]]:
    """Pick ``n_loops`` (revisit, original) pairs; revisits come from the second half."""
    if n_loops == 0:
        return []
    half = n_images // 2
    if n_loops > n_images - half or n_loops > half:
        raise ValueError(f"cannot plant {n_loops} loops in {n_images} images")
    rng = np.random.default_rng(seed)
    revisits = np.sort(rng.choice(np.arange(half, n_images), size=n_loops, replace=False))
    originals = np.sort(rng.choice(np.arange(half), size=n_loops, replace=False))
    return [(int(r), int(o)) for r, o in zip(revisits, originals)]


def write_synth(
    out: Path,
    n_images: int = 40,
    n_loops: int = 5,
    features: int = 8,
    dim: int = 16,
    noise: float = 0.05,
    landmarks: int | None = 64,
    seed: int = 0,
    epochs: int = 300,
) -> Path:
    """Write descriptors, ground truth and a ready-to-run config; returns the config path."""
    loops = plant_loops(n_images, n_loops, seed)
    scfg = SynthConfig(
        n_images=n_images, features_per_image=features, dim=dim, loop_spec=loops,
        noise_sigma=noise, rng_seed=seed, n_landmarks=landmarks,
    )
    ds, gt = synth_sequence(scfg)
    out.mkdir(parents=True, exist_ok=True)
    save_descriptors(ds, out / "descriptors.ldsc")
    save_ground_truth(gt, out / "ground_truth.txt")
    n_words = landmarks if landmarks is not None else scfg.n_places * features
    values = {
        "paths.train": "descriptors.ldsc",
        "paths.test": "descriptors.ldsc",
        "paths.ground_truth": "ground_truth.txt",
        "paths.output": "run",
        "pca.n_components": min(dim, 20),
        "hgcn.classes": n_words,
        "hgcn.epochs": epochs,
    }
    cfg_path = out / "config.txt"
    cfg_path.write_text(dump_config(values), encoding="ascii")
    with open(out / "loops.txt", "w", encoding="ascii") as fh:
        for r, o in loops:
            fh.write(f"{r} {o}\n")
    return cfg_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgcn-fabmap", description="Loop-closure detection with a learned visual vocabulary.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", "-c", type=Path, help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    with_config(sub.add_parser("train", help="fit PCA, the HGCN clusterer, the vocabulary and the Chow-Liu tree"))
    det = sub.add_parser("detect", help="run loop-closure detection over the test sequence")
    with_config(det)
    det.add_argument("--method", choices=("fabmap", "bow"), default="fabmap")
    with_config(sub.add_parser("eval", help="recall/accuracy sweep of the confusion matrix"))

    syn = sub.add_parser("synth", help="generate a synthetic sequence with planted revisits")
    syn.add_argument("--out", type=Path, required=True)
    syn.add_argument("--images", type=int, default=40)
    syn.add_argument("--loops", type=int, default=5)
    syn.add_argument("--features", type=int, default=8)
    syn.add_argument("--dim", type=int, default=16)
    syn.add_argument("--noise", type=float, default=0.05)
    syn.add_argument("--landmarks", type=int, default=64)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--epochs", type=int, default=300, help="hgcn.epochs written to the generated config")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            try:
                path = write_synth(args.out, args.images, args.loops, args.features, args.dim, args.noise, args.landmarks, args.seed, args.epochs)
            except ValueError as exc:
                raise pipeline.StageError("synth", str(exc)) from exc
            print(f"synth: wrote {path}")
            return EXIT_OK
        cfg = load_config(args.config, args.overrides)
        if args.command == "train":
            pipeline.run_train(cfg)
        elif args.command == "detect":
            pipeline.run_detect(cfg, args.method)
        elif args.command == "eval":
            pipeline.run_eval(cfg)
    except ConfigError as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return EXIT_USER
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
