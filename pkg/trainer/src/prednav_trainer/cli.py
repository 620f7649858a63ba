"""Trainer command line: gen / train / finetune / export / eval."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .export import export_weights, reference_scores
from .gridio import load_pairs, save_grid
from .train import TrainConfig, fine_tune, pixel_accuracy, train
from .worlds import RESOLUTION, TrainSample, generate_dataset


def _load_dataset(path):
    pairs = load_pairs(path)
    if not pairs:
        raise SystemExit(f"no training pairs under {path}")
    return [TrainSample(input=a, target=b) for a, b in pairs]


def _cfg_from_args(args):
    return TrainConfig(
        occupied_weight=args.occupied_weight,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        augment=not args.no_augment,
        seed=args.seed,
        effective_number_beta=args.effective_number_beta,
    )


def _cmd_gen(args):
    samples = generate_dataset(args.count, seed=args.seed)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_grid(s.input, RESOLUTION, (0.0, 0.0), out / f"pair_{i:05d}_input.og")
        save_grid(s.target, RESOLUTION, (0.0, 0.0), out / f"pair_{i:05d}_target.og")
    print(f"wrote {len(samples)} pairs to {out}")
    return 0


def _train_log(epoch, loss):
    print(f"epoch {epoch:4d}  loss {loss:.6f}")


def _cmd_train(args):
    dataset = _load_dataset(args.dataset)
    ckpt = train(dataset, _cfg_from_args(args), log=_train_log)
    torch.save(ckpt, args.checkpoint)
    print(f"checkpoint saved to {args.checkpoint}")
    return 0


def _cmd_finetune(args):
    dataset = _load_dataset(args.dataset)
    ckpt = torch.load(args.init, weights_only=False)
    ckpt = fine_tune(ckpt, dataset, _cfg_from_args(args), log=_train_log)
    torch.save(ckpt, args.checkpoint)
    print(f"checkpoint saved to {args.checkpoint}")
    return 0


def _cmd_export(args):
    ckpt = torch.load(args.checkpoint, weights_only=False)
    export_weights(ckpt, args.out)
    print(f"weights exported to {args.out}")
    return 0


def _cmd_eval(args):
    dataset = _load_dataset(args.dataset)
    ckpt = torch.load(args.checkpoint, weights_only=False)
    acc = pixel_accuracy(ckpt, dataset)
    print(f"pixel accuracy over {len(dataset)} samples: {acc:.4f}")
    if args.dump_scores:
        rng = np.random.default_rng(args.seed)
        idx = rng.integers(0, len(dataset), size=min(10, len(dataset)))
        batch = np.stack([dataset[i].input for i in idx])
        scores = reference_scores(ckpt, batch)
        np.savez(args.dump_scores, inputs=batch, scores=scores)
        print(f"reference scores dumped to {args.dump_scores}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="prednav-trainer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a procedural dataset")
    gen.add_argument("--count", type=int, default=200)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--outdir", default="dataset")
    gen.set_defaults(fn=_cmd_gen)

    def train_args(sp):
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--checkpoint", default="checkpoint.pt")
        sp.add_argument("--epochs", type=int, default=100)
        sp.add_argument("--lr", type=float, default=2e-4)
        sp.add_argument("--batch-size", type=int, default=10)
        sp.add_argument("--occupied-weight", type=float, default=5.0)
        sp.add_argument("--effective-number-beta", type=float, default=None)
        sp.add_argument("--no-augment", action="store_true")
        sp.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="train from scratch")
    train_args(tr)
    tr.set_defaults(fn=_cmd_train)

    ft = sub.add_parser("finetune", help="continue training from a checkpoint")
    train_args(ft)
    ft.add_argument("--init", required=True)
    ft.set_defaults(fn=_cmd_finetune)

    ex = sub.add_parser("export", help="export OMPW weights")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--out", default="weights.ompw")
    ex.set_defaults(fn=_cmd_export)

    ev = sub.add_parser("eval", help="pixel accuracy on a dataset")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--dump-scores", default=None)
    ev.set_defaults(fn=_cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
