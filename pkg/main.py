#!/usr/bin/env python3
"""
Alignement de visages par cascade d'U-nets à têtes multi-markups
Commandes: train, eval, infer, synth, gradcheck, experiment
"""

import argparse
import os
import sys
from typing import Optional, Sequence, Tuple

import numpy as np

from autodiff.tensor import Tensor, no_grad
from config import Config, ConfigError, RunConfig
from dataset.annotations import (
    AnnotationFile, AnnotationRecord, load_dataset, write_annotation_file, write_tags,
)
from dataset.synthetic import builtin_registry, generate_dataset
from evaluation.evaluator import CascadeEvaluator
from evaluation.experiments import EXPERIMENTS, run_seeds, win_count
from evaluation.export import ced_export, export_cascade_attention, render_overlay
from evaluation.metrics import NormSpec
from network.cascade import CascadeConfig, CascadeModel
from network.checkpoint import load_checkpoint
from network.gradient_suite import SCOPES, run_suite
from network.heads import MarkupRegistry
from training.trainer import CascadeTrainer, TrainConfig
from utils.image_io import read_grayscale, resize_bilinear, write_image
from utils.logger import CascadeLogger

EXIT_OK = 0
EXIT_ERROR = 1


def load_registry(markup_file: str) -> MarkupRegistry:
    """Registre du fichier de markups (ou de MARKUP_FILE), sinon registre synthétique"""
    markup_file = markup_file or Config.MARKUP_FILE
    if markup_file:
        return MarkupRegistry.load(markup_file)
    return builtin_registry()


def restore_model(checkpoint_path: str, markup_file: Optional[str] = None,
                  expected_config: Optional[str] = None
                  ) -> Tuple[CascadeModel, RunConfig, str, MarkupRegistry]:
    """Reconstruit la cascade depuis la configuration et le registre embarqués dans le
    checkpoint (--markups remplace le registre embarqué)"""
    checkpoint = load_checkpoint(checkpoint_path)
    run = RunConfig.from_text(checkpoint.config_text)
    if expected_config:
        supplied = RunConfig.load(expected_config)
        if supplied.digest != checkpoint.digest:
            raise ConfigError(f"Empreinte de configuration différente: checkpoint "
                              f"{checkpoint.digest[:12]}, {expected_config} {supplied.digest[:12]}")
    if markup_file:
        registry = MarkupRegistry.load(markup_file)
    elif checkpoint.markup_text:
        registry = MarkupRegistry.parse(checkpoint.markup_text)
    else:
        registry = load_registry(run.markup_file)
    model = CascadeModel(CascadeConfig.from_run_config(run, registry), seed=run.seed)
    model.load_state_dict(checkpoint.state)
    model.eval()
    return model, run, checkpoint.digest, registry


def cmd_train(args) -> int:
    logger = CascadeLogger()
    run = RunConfig.load(args.config)
    registry = load_registry(run.resolve_path(run.markup_file))
    if not run.datasets:
        raise ConfigError("DATASETS est vide: au moins un fichier d'annotations est requis")
    datasets = [load_dataset(run.resolve_path(path), None, registry, run.resolution)
                for path in run.datasets]

    evaluate = None
    if run.eval_dataset and run.eval_every:
        held_out = load_dataset(run.resolve_path(run.eval_dataset), None, registry,
                                run.resolution)

        def evaluate(model, step):
            logger.info(f"Évaluation intermédiaire au pas {step}")
            CascadeEvaluator(model, config_digest=run.digest).evaluate(held_out)

    model = CascadeModel(CascadeConfig.from_run_config(run, registry), seed=run.seed)
    os.makedirs(run.output_dir, exist_ok=True)
    with open(os.path.join(run.output_dir, 'config.env'), 'w', encoding='utf-8') as handle:
        handle.write(run.canonical_text())
    trainer = CascadeTrainer(model, TrainConfig.from_run_config(run), datasets,
                             config_text=run.canonical_text(), evaluate=evaluate,
                             markup_text=registry.dump())
    result = trainer.train()
    logger.info(f"Checkpoint final: {result.checkpoint_path} | journal: {result.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    logger = CascadeLogger()
    model, run, digest, registry = restore_model(args.checkpoint, args.markups, args.config)
    dataset = load_dataset(args.dataset, args.image_dir, registry, run.resolution)
    evaluator = CascadeEvaluator(model, norm=NormSpec.parse(args.norm), config_digest=digest)
    report = evaluator.evaluate(dataset, stages_used=args.stages_used, tag=args.tag)

    os.makedirs(args.output, exist_ok=True)
    report.write(os.path.join(args.output, 'report.json'))
    report.errors.to_csv(os.path.join(args.output, 'errors.csv'), index=False,
                         float_format='%.17g')
    for markup in report.errors['markup'].unique():
        ced_export(report.stage_errors(markup), os.path.join(args.output, f"ced_{markup}.csv"))
    logger.info(f"📊 Rapport écrit dans {args.output} (config {digest[:12]})")
    return EXIT_OK


def cmd_infer(args) -> int:
    logger = CascadeLogger()
    model, run, _, _ = restore_model(args.checkpoint, args.markups)
    os.makedirs(args.output, exist_ok=True)

    records = {markup.name: [] for markup in model.config.markups}
    for path in args.images:
        gray = read_grayscale(path)
        height, width = gray.shape
        image = resize_bilinear(gray, run.resolution, run.resolution)[None, None]
        with no_grad():
            output = model(Tensor(image), stages_used=args.stages_used)
        predictions = output.predictions()
        base = os.path.splitext(os.path.basename(path))[0]
        scale = np.array([width - 1, height - 1], dtype=np.float64)
        for name, coords in predictions.items():
            records[name].append(AnnotationRecord(os.path.basename(path), coords[0] * scale))
            if args.overlay:
                render_overlay(image[0], coords[0],
                               os.path.join(args.output, f"{base}_{name}_overlay.ppm"))
        if args.attention:
            export_cascade_attention(output, os.path.join(args.output, 'attention', base))

    for markup in model.config.markups:
        write_annotation_file(os.path.join(args.output, f"{markup.name}.txt"),
                              AnnotationFile(markup.name, markup.num_landmarks,
                                             records[markup.name]))
    logger.info(f"🔍 {len(args.images)} image(s) traitée(s), résultats dans {args.output}")
    return EXIT_OK


def cmd_synth(args) -> int:
    logger = CascadeLogger()
    if args.count < 0:
        raise ValueError(f"--count doit être positif ou nul, reçu {args.count}")
    registry = builtin_registry()
    markups = tuple(registry.markups)
    dataset = generate_dataset(args.count, args.seed, args.resolution, markups)
    image_dir = os.path.join(args.output, 'images')
    os.makedirs(image_dir, exist_ok=True)

    scale = args.resolution - 1
    annotations = {name: AnnotationFile(name, registry.get(name).num_landmarks)
                   for name in markups}
    tags = {}
    for sample in dataset:
        relative = f"images/{sample.name}"
        write_image(os.path.join(args.output, relative), sample.image[0])
        for name, coords in sample.annotations.items():
            annotations[name].records.append(AnnotationRecord(relative, coords * scale))
        tags[relative] = sample.tags
    for name, annotation in annotations.items():
        write_annotation_file(os.path.join(args.output, f"{name}.txt"), annotation)
    write_tags(args.output, tags)
    registry.save(os.path.join(args.output, 'markups.txt'))
    logger.info(f"🧪 {len(dataset)} visage(s) synthétique(s) écrit(s) dans {args.output}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.scope, seed=args.seed)
    return EXIT_OK if all(result.passed for result in results) else EXIT_ERROR


def cmd_experiment(args) -> int:
    logger = CascadeLogger()
    seeds = [int(seed) for seed in args.seeds.split(',') if seed.strip()]
    kwargs = {'updates': args.updates} if args.updates is not None else {}
    results = run_seeds(args.name, seeds, args.output, **kwargs)
    wins = win_count(results)
    logger.info(f"{args.name}: {wins}/{len(results)} exécution(s) conforme(s)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Cascade d'U-nets pour l'alignement de visages")
    commands = parser.add_subparsers(dest='command', required=True)

    train = commands.add_parser('train', help="Entraîne une cascade depuis un fichier de config")
    train.add_argument('--config', required=True, help="Fichier KEY=valeur de l'exécution")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser('eval', help="Évalue un checkpoint sur un jeu annoté")
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--dataset', required=True, help="Fichier d'annotations (v1)")
    evaluate.add_argument('--image-dir', default=None,
                          help="Dossier des images (défaut: celui du fichier d'annotations)")
    evaluate.add_argument('--config', default=None,
                          help="Config attendue: son empreinte doit correspondre au checkpoint")
    evaluate.add_argument('--markups', default=None, help="Fichier de markups")
    evaluate.add_argument('--stages-used', type=int, default=None)
    evaluate.add_argument('--tag', default=None, help="Restreint l'évaluation à une étiquette")
    evaluate.add_argument('--norm', default='interocular',
                          help="interocular | pupil | custom:i,j | custom:i,j/k,l")
    evaluate.add_argument('--output', default=os.path.join(Config.OUTPUT_DIR, 'eval'))
    evaluate.set_defaults(handler=cmd_eval)

    infer = commands.add_parser('infer', help="Prédit les landmarks d'images")
    infer.add_argument('--checkpoint', required=True)
    infer.add_argument('--images', nargs='+', required=True)
    infer.add_argument('--markups', default=None, help="Fichier de markups")
    infer.add_argument('--stages-used', type=int, default=None)
    infer.add_argument('--overlay', action='store_true', help="Écrit les superpositions PPM")
    infer.add_argument('--attention', action='store_true', help="Exporte les cartes en PGM")
    infer.add_argument('--output', default=os.path.join(Config.OUTPUT_DIR, 'infer'))
    infer.set_defaults(handler=cmd_infer)

    synth = commands.add_parser('synth', help="Génère un jeu de visages synthétiques")
    synth.add_argument('--count', type=int, required=True)
    synth.add_argument('--seed', type=int, default=Config.SEED)
    synth.add_argument('--resolution', type=int, default=128)
    synth.add_argument('--output', required=True)
    synth.set_defaults(handler=cmd_synth)

    gradcheck = commands.add_parser('gradcheck', help="Vérifie les gradients analytiques")
    gradcheck.add_argument('--scope', choices=SCOPES, default='all')
    gradcheck.add_argument('--seed', type=int, default=Config.SEED)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    experiment = commands.add_parser('experiment', help="Expériences directionnelles")
    experiment.add_argument('--name', choices=sorted(EXPERIMENTS), required=True)
    experiment.add_argument('--seeds', default='0,1,2,3,4')
    experiment.add_argument('--updates', type=int, default=None)
    experiment.add_argument('--output', default=os.path.join(Config.OUTPUT_DIR, 'experiments'))
    experiment.set_defaults(handler=cmd_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Point d'entrée principal"""
    args = build_parser().parse_args(argv)
    logger = CascadeLogger()
    try:
        return args.handler(args)
    except KeyboardInterrupt:
        logger.info("🛑 Arrêt demandé par l'utilisateur")
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"❌ Erreur {args.command}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
