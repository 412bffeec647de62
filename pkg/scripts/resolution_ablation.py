"""Resolution ablation on synthetic survival data with the tiny encoder.

Each study is finetuned at several input resolutions with shared folds; only
the image size (and hence the token count and segment schedule) changes.
The signal here is global brightness, so it survives downsampling; the
script exercises the harness rather than showing a resolution effect.

    python scripts/resolution_ablation.py --resolutions 64,128,256
"""
from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

from longvit.encoder import EncoderConfig
from longvit.image import ImageConfig
from longvit.synthetic import make_survival_dataset
from longvit.tasks import FinetuneConfig, format_ablation, resolution_ablation


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--studies", type=int, default=40)
    p.add_argument("--resolutions", default="64,128,256")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    args = p.parse_args(argv)
    resolutions = [int(v) for v in args.resolutions.split(",")]

    cfg = FinetuneConfig(task="survival", folds=args.folds, epochs=args.epochs, batch_size=4, lr=1e-3,
                         seed=args.seed, encoder=EncoderConfig.tiny(), image=ImageConfig(patch_size=32))
    with tempfile.TemporaryDirectory() as tmp:
        records = make_survival_dataset(tmp, args.studies, size=max(resolutions), seed=args.seed)
        results = resolution_ablation(records, cfg, resolutions, progress=lambda m: print(m, file=sys.stderr))
    text = format_ablation(results, patch_size=32)
    print(text)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
