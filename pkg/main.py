"""
HMAE Pipeline

Orchestrates corpus generation, masked-autoencoder pretraining, frozen-embedding
extraction, probe evaluation, attention heatmaps and t-SNE projection, and
exposes each stage as a subcommand.
"""

import os
import sys
import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from components.checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from components.corpus import (
    CorpusManifest, fit_size_distribution, generate_corpus, load_slides, read_roi_sizes, resize_bilinear, slide_files,
)
from components.embedding_store import export_embeddings_csv, read_embeddings, write_embeddings
from components.errors import ConfigError, DegenerateInputError, HmaeError, ParameterError, ValidationError
from components.metrics import export_report, repeated_runs
from components.probe import coarsen_labels, embed_manifest, load_mapping, probe_experiment
from components.tsne import export_projection, tsne
from components.vit_mae import MaeModel, Pretrainer, attention_maps, export_attention
from utils import rng as rngs
from utils.config import TASKS, RunConfig, load_config
from utils.image_io import read_rgb, to_unit

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class HmaePipeline:
    """Runs the pipeline stages against one validated RunConfig."""

    def __init__(self, config: RunConfig):
        """
        Initialize the pipeline.

        Args:
            config: Validated run configuration
        """
        self.config = config
        self.seed = config.seed
        self.threads = config.threads
        logger.info(f"Pipeline ready (seed {self.seed}, {self.threads} threads, config {config.digest()[:12]})")

    def _path(self, path: Optional[str], key: str) -> str:
        """An explicit path, else paths.<key> from the config."""
        path = path or getattr(self.config.paths, key)
        if not path:
            raise ParameterError(f"no {key} given (pass it or set paths.{key} in the config)")
        return path

    def _require(self, path: Optional[str], what: str, key: Optional[str] = None) -> Path:
        """Resolve an input path and check that it exists."""
        if key is not None:
            path = self._path(path, key)
        elif not path:
            raise ParameterError(f"no {what} given")
        path = Path(path)
        if not path.exists():
            raise ParameterError(f"{what} not found: {path}")
        return path

    def _load_images(self, manifest: CorpusManifest) -> List[np.ndarray]:
        size = self.config.model.input_size
        images = []
        for row in manifest.rows:
            pixels = read_rgb(manifest.resolve(row))
            if pixels.shape[:2] != (size, size):
                pixels = resize_bilinear(pixels, size)
            images.append(to_unit(pixels))
        return images

    def cmd_generate(self, slides_dir: Optional[str] = None, out_dir: Optional[str] = None,
                     roi_sizes: Optional[str] = None) -> Path:
        """
        Sample a quality-filtered crop corpus.

        Each path left out falls back to paths.slides_dir, paths.corpus_dir and paths.roi_sizes.

        Args:
            slides_dir: Directory of slide images
            out_dir: Output directory (images/ and manifest.csv)
            roi_sizes: Optional CSV of annotated ROI sides to fit the size distribution

        Returns:
            Path of the written manifest
        """
        corpus = self.config.corpus
        slides_dir, out_dir = self._path(slides_dir, 'slides_dir'), self._path(out_dir, 'corpus_dir')
        roi_sizes = roi_sizes or self.config.paths.roi_sizes
        logger.info(f"Step 1: Generating {corpus.count} crops from {slides_dir}")
        slides = load_slides(slides_dir)
        if roi_sizes:
            dist = fit_size_distribution(read_roi_sizes(self._require(roi_sizes, 'ROI size list')),
                                         self.config.model.patch_size)
        else:
            dist = corpus.size_distribution()
        manifest = generate_corpus(slides, dist, corpus.count, corpus.threshold, self.seed, out_dir,
                                   self.config.model.input_size, workers=self.threads,
                                   label_from_slide=corpus.label_from_slide, budget_factor=corpus.budget_factor)
        path = manifest.write(Path(out_dir) / 'manifest.csv')
        print(f"acceptance rate: {manifest.stats['acceptance_rate']:.4f} "
              f"({manifest.stats['accepted']}/{manifest.stats['candidates']} candidates)")
        logger.info(f"Manifest written to {path}")
        return path

    def cmd_pretrain(self, manifest_path: Optional[str] = None, checkpoint_path: Optional[str] = None, resume: bool = False,
                     steps: Optional[int] = None) -> Optional[float]:
        """
        Pretrain the MAE on a manifest's images.

        Args:
            manifest_path: Corpus manifest (default paths.manifest)
            checkpoint_path: Output checkpoint, also the resume source (default paths.checkpoint)
            resume: Continue from checkpoint_path when it exists
            steps: Run only this many steps now (default: the rest of the schedule)

        Returns:
            Loss of the last step run, or None if the schedule was already complete
        """
        training = self.config.training
        manifest = CorpusManifest.read(self._require(manifest_path, 'manifest', 'manifest'))
        if not manifest.rows:
            raise DegenerateInputError(f"manifest {manifest_path} has no rows")
        logger.info(f"Step 2: Pretraining on {len(manifest.rows)} images")
        images = self._load_images(manifest)

        checkpoint_path = Path(self._path(checkpoint_path, 'checkpoint'))
        loss_log = checkpoint_path.with_name(checkpoint_path.name + '.loss.csv')
        ckpt = None
        if resume and checkpoint_path.exists():
            model, ckpt = load_checkpoint(checkpoint_path, self.config.model)
            if ckpt.seed != self.seed:
                logger.warning(f"resuming a run seeded {ckpt.seed} with seed {self.seed}")
        else:
            model = MaeModel(self.config.model, seed=self.seed)
            if loss_log.exists():
                loss_log.unlink()

        trainer = Pretrainer(model, lr=training.lr, betas=(training.beta1, training.beta2), eps=training.eps,
                             weight_decay=training.weight_decay, warmup_steps=training.warmup_steps,
                             total_steps=training.steps, min_lr=training.min_lr, batch_size=training.batch_size,
                             seed=self.seed, log_every=training.log_every)
        if ckpt is not None:
            trainer.step = ckpt.step
            restore_optimizer(trainer.optimizer, ckpt)
            logger.info(f"Resumed from step {ckpt.step}")

        end = training.steps if steps is None else min(training.steps, trainer.step + steps)
        chunk = training.checkpoint_every or max(1, end - trainer.step)
        losses: List[float] = []
        while trainer.step < end:
            losses += trainer.train(images, steps=min(chunk, end - trainer.step), loss_log=loss_log)
            save_checkpoint(checkpoint_path, model, step=trainer.step, seed=self.seed, optimizer=trainer.optimizer)
        if not losses:
            logger.info(f"Schedule already complete at step {trainer.step}")
            return None
        logger.info(f"Pretraining finished at step {trainer.step}: loss {losses[0]:.5f} -> {losses[-1]:.5f}")
        return losses[-1]

    def cmd_embed(self, checkpoint_path: Optional[str] = None, manifest_path: Optional[str] = None,
                  out_path: Optional[str] = None, csv_path: Optional[str] = None) -> int:
        """
        Embed every manifest region with the frozen encoder.

        Paths left out fall back to paths.checkpoint, paths.manifest and paths.embeddings.

        Returns:
            Number of records written
        """
        out_path = self._path(out_path, 'embeddings')
        model, _ = load_checkpoint(self._require(checkpoint_path, 'checkpoint', 'checkpoint'), self.config.model)
        manifest = CorpusManifest.read(self._require(manifest_path, 'manifest', 'manifest'), allow_duplicates=True)
        mapping = self.config.eval.mapping()
        logger.info(f"Step 3: Embedding {len(manifest.rows)} regions")
        records = embed_manifest(model, manifest, mapping, mode=self.config.eval.embed_mode, workers=self.threads)
        write_embeddings(out_path, records, dim=self.config.model.encoder_dim)
        if csv_path:
            export_embeddings_csv(csv_path, records, mapping)
        return len(records)

    def cmd_probe_eval(self, embeddings_path: Optional[str] = None, report_path: Optional[str] = None,
                       mapping_path: Optional[str] = None) -> Path:
        """
        Repeated split/train/evaluate runs of the probe; writes the JSON report.

        Returns:
            Report path
        """
        report_path = self._path(report_path, 'report')
        evaluation = self.config.eval
        records = read_embeddings(self._require(embeddings_path, 'embeddings', 'embeddings'))
        mapping_path = mapping_path or self.config.paths.mapping
        mapping = load_mapping(self._require(mapping_path, 'label mapping')) if mapping_path else evaluation.mapping()
        coarsen, headline, _ = TASKS[evaluation.task]
        if coarsen:
            records = coarsen_labels(records, mapping)
            classes = mapping.coarse().classes
        else:
            classes = mapping.classes
        probe_config = self.config.probe_config()
        if headline != probe_config.selection_metric and headline in ('f1_macro', 'f1_weighted'):
            probe_config = type(probe_config)(**{**probe_config.to_dict(), 'selection_metric': headline})
        logger.info(f"Step 4: {evaluation.runs} probe runs for task '{evaluation.task}' "
                    f"({len(records)} records, {len(classes)} classes)")

        def experiment(seed: int):
            return probe_experiment(records, classes, probe_config, seed, evaluation.fractions, evaluation.resplit)

        report = repeated_runs(experiment, evaluation.runs, base_seed=self.seed, workers=self.threads,
                               task=evaluation.task, classes=classes, headline=headline,
                               config_digest=self.config.digest())
        path = export_report(report, report_path)
        print(f"{headline}: {report.summary(headline).format()}")
        return path

    def cmd_attend(self, checkpoint_path: Optional[str], image_path: str,
                   out_dir: Optional[str] = None) -> List[Path]:
        """Write per-head and mean CLS attention heatmaps for one image (out_dir defaults to paths.attention_dir)."""
        out_dir = self._path(out_dir, 'attention_dir')
        model, _ = load_checkpoint(self._require(checkpoint_path, 'checkpoint', 'checkpoint'), self.config.model)
        size = model.config.input_size
        pixels = read_rgb(self._require(image_path, 'image'))
        if pixels.shape[:2] != (size, size):
            pixels = resize_bilinear(pixels, size)
        logger.info(f"Step 5: Attention maps for {image_path}")
        return export_attention(attention_maps(model, pixels), out_dir, size,
                                fmt=self.config.eval.heatmap_format)

    def cmd_project(self, embeddings_path: Optional[str] = None, out_csv: Optional[str] = None,
                    png_path: Optional[str] = None) -> Path:
        """t-SNE of stored embeddings to `id,x,y,label` CSV (plus optional scatter PNG)."""
        out_csv = self._path(out_csv, 'projection')
        evaluation = self.config.eval
        records = read_embeddings(self._require(embeddings_path, 'embeddings', 'embeddings'))
        if not records:
            raise DegenerateInputError(f"{embeddings_path} holds no embeddings")
        classes = evaluation.classes
        labels = [None if r.label is None else (classes[r.label] if r.label < len(classes) else str(r.label))
                  for r in records]
        logger.info(f"Step 6: Projecting {len(records)} embeddings")
        proj = tsne(np.stack([r.vector for r in records]), perplexity=evaluation.perplexity,
                    iterations=evaluation.tsne_iterations, rng=rngs.stream(self.seed, rngs.TSNE),
                    learning_rate=evaluation.tsne_learning_rate, exaggeration=evaluation.exaggeration)
        if png_path is None and evaluation.scatter_png:
            png_path = str(Path(out_csv).with_suffix('.png'))
        export_projection(proj, [r.region_id for r in records], labels, out_csv, png_path, classes)
        return Path(out_csv)

    def _check_slide_labels(self, slides_dir: str):
        if not self.config.corpus.label_from_slide:
            raise ConfigError("run evaluates probes on slide-labelled crops: set corpus.label_from_slide=true "
                              "and eval.classes to the slide ids")
        slide_ids = [p.stem for p in slide_files(slides_dir)]
        missing = [s for s in slide_ids if s not in self.config.eval.classes]
        if missing:
            raise ConfigError(f"eval.classes {self.config.eval.classes} does not name slide ids {missing}")

    def run(self, slides_dir: Optional[str] = None, out_dir: Optional[str] = None) -> Dict[str, Any]:
        """
        Run generate -> pretrain -> embed -> probe-eval -> project into one directory.

        The probe needs labelled crops, so corpus.label_from_slide must be set and eval.classes must
        name every slide id. Both are checked before any work starts.

        Returns:
            Paths and headline values of each stage
        """
        slides_dir = self._path(slides_dir, 'slides_dir')
        out = Path(self._path(out_dir, 'out_dir'))
        self._check_slide_labels(slides_dir)
        logger.info("Starting HMAE pipeline")
        manifest = self.cmd_generate(slides_dir, str(out / 'corpus'))
        checkpoint = out / 'model.hmae'
        final_loss = self.cmd_pretrain(str(manifest), str(checkpoint))
        embeddings = out / 'embeddings.hmeb'
        count = self.cmd_embed(str(checkpoint), str(manifest), str(embeddings))
        report = self.cmd_probe_eval(str(embeddings), str(out / 'report.json'))
        projection = self.cmd_project(str(embeddings), str(out / 'projection.csv'))
        results = {
            'manifest': str(manifest),
            'checkpoint': str(checkpoint),
            'final_loss': final_loss,
            'embeddings': str(embeddings),
            'embedded': count,
            'report': str(report),
            'projection': str(projection),
        }
        logger.info(f"Pipeline completed: {results}")
        return results


def configure_logging():
    level = os.getenv('HMAE_LOG_LEVEL', 'DEBUG' if os.getenv('DEBUG') == '1' else 'INFO').upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file merged over the preset (env HMAE_CONFIG)')
    common.add_argument('--preset', help='preset name in configs/ (env HMAE_PRESET, default tiny)')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config value, e.g. --set training.steps=500 (repeatable)')
    common.add_argument('--seed', type=int, help='run seed')
    common.add_argument('--threads', type=int, help='worker threads')

    parser = argparse.ArgumentParser(prog='hmae', description='Masked-autoencoder histopathology pipeline')
    sub = parser.add_subparsers(dest='command', required=True)

    # positionals left out fall back to paths.* in the config
    p = sub.add_parser('generate', parents=[common], help='sample a crop corpus from slides')
    p.add_argument('slides_dir', nargs='?')
    p.add_argument('out_dir', nargs='?', help='corpus directory (paths.corpus_dir)')
    p.add_argument('--roi-sizes', help='CSV of annotated ROI side lengths to fit the crop-size distribution')

    p = sub.add_parser('pretrain', parents=[common], help='MAE pretraining')
    p.add_argument('manifest', nargs='?')
    p.add_argument('checkpoint', nargs='?')
    p.add_argument('--resume', action='store_true', help='continue from the checkpoint if it exists')
    p.add_argument('--steps', type=int, help='run at most this many steps now')

    p = sub.add_parser('embed', parents=[common], help='frozen-encoder region embeddings')
    p.add_argument('checkpoint', nargs='?')
    p.add_argument('manifest', nargs='?')
    p.add_argument('out', nargs='?', help='embeddings file (paths.embeddings)')
    p.add_argument('--csv', help='also export embeddings as CSV')

    p = sub.add_parser('probe-eval', parents=[common], help='repeated probe evaluation report')
    p.add_argument('embeddings', nargs='?')
    p.add_argument('report', nargs='?')
    p.add_argument('--mapping', help='label mapping JSON (classes, coarse_map)')

    p = sub.add_parser('attend', parents=[common], help='CLS attention heatmaps')
    p.add_argument('checkpoint')
    p.add_argument('image')
    p.add_argument('out_dir', nargs='?', help='heatmap directory (paths.attention_dir)')

    p = sub.add_parser('project', parents=[common], help='t-SNE projection of embeddings')
    p.add_argument('embeddings', nargs='?')
    p.add_argument('out_csv', nargs='?', help='projection CSV (paths.projection)')
    p.add_argument('--png', help='scatter plot path (default: next to the CSV when eval.scatter_png)')

    p = sub.add_parser('run', parents=[common],
                       help='generate, pretrain, embed, probe-eval and project; needs '
                            'corpus.label_from_slide=true and eval.classes listing the slide ids')
    p.add_argument('slides_dir', nargs='?')
    p.add_argument('out_dir', nargs='?', help='run directory (paths.out_dir)')
    return parser


def dispatch(pipeline: HmaePipeline, args: argparse.Namespace) -> Any:
    if args.command == 'generate':
        return pipeline.cmd_generate(args.slides_dir, args.out_dir, args.roi_sizes)
    if args.command == 'pretrain':
        return pipeline.cmd_pretrain(args.manifest, args.checkpoint, args.resume, args.steps)
    if args.command == 'embed':
        return pipeline.cmd_embed(args.checkpoint, args.manifest, args.out, args.csv)
    if args.command == 'probe-eval':
        return pipeline.cmd_probe_eval(args.embeddings, args.report, args.mapping)
    if args.command == 'attend':
        return pipeline.cmd_attend(args.checkpoint, args.image, args.out_dir)
    if args.command == 'project':
        return pipeline.cmd_project(args.embeddings, args.out_csv, args.png)
    return pipeline.run(args.slides_dir, args.out_dir)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point. Returns 0 on success, 2 on validation errors, 1 on other failures."""
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        config = load_config(preset=args.preset or os.getenv('HMAE_PRESET', 'tiny'),
                             config_path=args.config or os.getenv('HMAE_CONFIG'),
                             overrides=args.overrides, seed=args.seed, threads=args.threads)
        dispatch(HmaePipeline(config), args)
        return 0
    except ValidationError as e:
        logger.error(f"{args.command}: {e}")
        return 2
    except (HmaeError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
