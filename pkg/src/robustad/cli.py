"""Command-line entry points: train, evaluate, sweep, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import yaml

from . import data as data_mod
from . import evaluation, trainer
from .heads import AnomalyDetector
from .noise_synth import PseudoAnomalySynthesizer
from .reweighting import DivergenceSpec

logger = logging.getLogger(__name__)


def _add_train_args(p):
    p.add_argument("--dataset", choices=["mvtec", "visa"], required=True)
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--category", required=True)
    p.add_argument("--epsilon", type=float, default=0.1, help="contamination ratio")
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--divergence", choices=["kl", "rkl", "alpha"], default="alpha")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--burn-in", type=int, default=2)
    p.add_argument("--gamma", type=float, default=5.0)
    p.add_argument("--k-fraction", type=float, default=0.1)
    p.add_argument("--m-reference", type=int, default=5000)
    p.add_argument("--pseudo-ratio", type=float, default=0.5)
    p.add_argument("--texture-dir", default=None)
    p.add_argument("--backbone", default="resnet18")
    p.add_argument("--stages", type=int, nargs="+", default=[2, 3, 4])
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--no-pretrained", action="store_true")
    p.add_argument("--no-finetune", action="store_true")
    p.add_argument("--variant", default="Proposed", choices=sorted(trainer.VARIANTS))
    p.add_argument("--device", default="cpu")
    p.add_argument("--out", required=True, help="run directory")


def _cmd_train(args):
    resize = round(args.resolution * 256 / 224)
    cat = data_mod.load_category(args.root, args.dataset, args.category, resize=resize, crop=args.resolution)
    spec = data_mod.ContaminationSpec(epsilon=args.epsilon, noise_sigma=args.noise_sigma, seed=args.seed)
    contaminated, manifest = data_mod.inject_contamination(cat.train_normals, cat.test_anomalies, spec)

    config = trainer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        burn_in=args.burn_in,
        divergence=DivergenceSpec(kind=args.divergence, alpha=args.alpha, lam=args.lam),
        gamma=args.gamma,
        k_fraction=args.k_fraction,
        m_reference=args.m_reference,
        seed=args.seed,
        pseudo_ratio=args.pseudo_ratio,
        variant=args.variant,
        backbone=args.backbone,
        stages=tuple(args.stages),
        input_resolution=args.resolution,
        pretrained=not args.no_pretrained,
        finetune=not args.no_finetune,
        texture_dir=args.texture_dir,
        device=args.device,
        out_dir=args.out,
    )
    os.makedirs(args.out, exist_ok=True)
    data_mod.write_manifest(manifest, os.path.join(args.out, "contamination_manifest.json"))
    with open(os.path.join(args.out, "dataset.json"), "w") as fh:
        json.dump(
            {"dataset": args.dataset, "root": args.root, "category": args.category,
             "epsilon": args.epsilon},
            fh,
        )

    synth = PseudoAnomalySynthesizer(texture_dir=args.texture_dir)
    result = trainer.train(config, contaminated, synth=synth)

    report = evaluation.evaluate_model(
        result.model, cat, args.dataset, args.category, args.epsilon, args.seed,
        variant=args.variant, device=args.device,
    )
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(report.__dict__, fh, indent=2)
    print(f"{args.dataset}/{args.category} eps={args.epsilon:g} seed={args.seed}: "
          f"AUC-ROC={report.auc_roc:.4f} AUC-PR={report.auc_pr:.4f}")
    return 0


def _cmd_evaluate(args):
    with open(os.path.join(args.run, "dataset.json")) as fh:
        ds = json.load(fh)
    with open(os.path.join(args.run, "config.json")) as fh:
        cfg = json.load(fh)
    ckpt = os.path.join(args.run, "best.pt")
    if not os.path.isfile(ckpt):
        ckpt = os.path.join(args.run, "last.pt")
    model = AnomalyDetector.load(ckpt, map_location=args.device)
    crop = cfg.get("input_resolution", 224)
    cat = data_mod.load_category(
        ds["root"], ds["dataset"], ds["category"], resize=round(crop * 256 / 224), crop=crop
    )
    report = evaluation.evaluate_model(
        model, cat, ds["dataset"], ds["category"],
        epsilon=ds.get("epsilon", float("nan")), seed=cfg.get("seed", 0),
        variant=cfg.get("variant", "Proposed"), device=args.device,
    )
    with open(os.path.join(args.run, "metrics.json"), "w") as fh:
        json.dump(report.__dict__, fh, indent=2)
    print(f"{ds['dataset']}/{ds['category']}: AUC-ROC={report.auc_roc:.4f} AUC-PR={report.auc_pr:.4f}")
    return 0


def _load_sweep_spec(path):
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return evaluation.SweepSpec(**raw)


def _cmd_sweep(args):
    spec = _load_sweep_spec(args.spec)
    rows = evaluation.run_sweep(spec, args.out, device=args.device)
    failed = sum(1 for r in rows if r.error)
    print(f"sweep finished: {len(rows)} cells, {failed} failed; results in {args.out}")
    return 0 if failed == 0 else 1


def _cmd_ablate(args):
    spec = _load_sweep_spec(args.spec)
    if spec.variants == ["Proposed"]:
        spec.variants = sorted(trainer.VARIANTS)
    rows = evaluation.run_ablation(spec, args.out, device=args.device)
    failed = sum(1 for r in rows if r.error)
    print(f"ablation finished: {len(rows)} cells, {failed} failed; results in {args.out}")
    return 0 if failed == 0 else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="robustad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one category with injected contamination")
    _add_train_args(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="re-score a finished run's test set")
    p_eval.add_argument("--run", required=True)
    p_eval.add_argument("--device", default="cpu")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="contamination / sensitivity sweep from a YAML spec")
    p_sweep.add_argument("--spec", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--device", default="cpu")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_abl = sub.add_parser("ablate", help="run the named training variants from a YAML spec")
    p_abl.add_argument("--spec", required=True)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--device", default="cpu")
    p_abl.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
