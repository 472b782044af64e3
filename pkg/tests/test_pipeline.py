"""
Tests for the main HmaePipeline and the command-line entry point.
"""

import unittest
from unittest.mock import patch
import io
import os
import sys
import csv
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add the parent directory to the path so we can import components
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from main import HmaePipeline, build_parser, main
from components.checkpoint import read_checkpoint
from components.corpus import CorpusManifest
from components.embedding_store import read_embeddings, write_embeddings
from components.errors import ConfigError, CorpusError, ParameterError
from components.metrics import read_report
from utils.config import load_config
from utils.image_io import read_gray
from tests.fixtures import noise_slide, write_slides

SLIDE_CLASSES = '["slide_0","slide_1","slide_2"]'

# Small enough to run every stage in a few seconds
FAST_OVERRIDES = [
    'training.steps=4',
    'training.warmup_steps=1',
    'training.log_every=0',
    'corpus.count=30',
    'corpus.label_from_slide=true',
    f'eval.classes={SLIDE_CLASSES}',
    'eval.coarse_map=null',
    'eval.task=fine',
    'eval.runs=2',
    'eval.perplexity=2',
    'eval.tsne_iterations=50',
    'probe.epochs=3',
    'probe.hidden_dim=8',
]


class TestHmaePipeline(unittest.TestCase):
    """Test cases for HmaePipeline stages."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.root = Path(self.temp_dir)
        self.slides = self.root / 'slides'
        write_slides(self.slides, [noise_slide(128, 128, seed=i) for i in range(3)])
        self.pipeline = HmaePipeline(load_config('tiny', overrides=FAST_OVERRIDES, seed=0))
        self.stdout_patcher = patch('sys.stdout', new_callable=io.StringIO)
        self.stdout = self.stdout_patcher.start()

    def tearDown(self):
        self.stdout_patcher.stop()
        shutil.rmtree(self.temp_dir)

    def generate(self, name='corpus') -> Path:
        return self.pipeline.cmd_generate(str(self.slides), str(self.root / name))

    def pretrain(self, manifest: Path, name='model.hmae', **kwargs):
        return self.pipeline.cmd_pretrain(str(manifest), str(self.root / name), **kwargs)

    def test_generate(self):
        manifest_path = self.generate()
        manifest = CorpusManifest.read(manifest_path)
        self.assertEqual(len(manifest.rows), 30)
        self.assertTrue(all(manifest.resolve(row).exists() for row in manifest.rows))
        self.assertIn('acceptance rate', self.stdout.getvalue())
        self.assertEqual(self.generate('again').read_bytes(), manifest_path.read_bytes())

    def test_generate_empty_slides_dir(self):
        empty = self.root / 'empty'
        empty.mkdir()
        with self.assertRaises(CorpusError) as ctx:
            self.pipeline.cmd_generate(str(empty), str(self.root / 'out'))
        self.assertIn(str(empty), str(ctx.exception))

    def test_pretrain_and_resume(self):
        manifest = self.generate()
        first = self.pretrain(manifest, steps=2)
        self.assertTrue(np.isfinite(first))
        self.assertEqual(read_checkpoint(self.root / 'model.hmae').step, 2)
        self.pretrain(manifest, resume=True)
        self.assertEqual(read_checkpoint(self.root / 'model.hmae').step, 4)
        self.assertIsNone(self.pretrain(manifest, resume=True))
        with open(self.root / 'model.hmae.loss.csv', encoding='utf-8') as f:
            steps = [int(row['step']) for row in csv.DictReader(f)]
        self.assertEqual(steps, [0, 1, 2, 3])

    def test_equal_seeds_byte_identical_checkpoints(self):
        manifest = self.generate()
        self.pretrain(manifest, 'a.hmae')
        self.pretrain(manifest, 'b.hmae')
        self.assertEqual((self.root / 'a.hmae').read_bytes(), (self.root / 'b.hmae').read_bytes())

    def test_missing_inputs(self):
        with self.assertRaises(ParameterError):
            self.pretrain(self.root / 'missing.csv')
        with self.assertRaises(ParameterError):
            self.pipeline.cmd_probe_eval('', str(self.root / 'report.json'))

    def test_embed_probe_attend_project(self):
        manifest_path = self.generate()
        self.pretrain(manifest_path)
        checkpoint = str(self.root / 'model.hmae')

        # a repeated row must embed to the same vector
        manifest = CorpusManifest.read(manifest_path)
        manifest.rows.append(manifest.rows[0])
        with open(manifest_path, 'a', encoding='utf-8') as f:
            row = manifest.rows[0]
            f.write(f"{row.region_id},{row.path},{row.slide},{row.x},{row.y},{row.side},{row.cv!r},{row.label},\n")

        embeddings = self.root / 'emb.hmeb'
        count = self.pipeline.cmd_embed(checkpoint, str(manifest_path), str(embeddings), str(self.root / 'emb.csv'))
        self.assertEqual(count, 31)
        records = read_embeddings(embeddings)
        np.testing.assert_array_equal(records[0].vector, records[-1].vector)
        copy = write_embeddings(self.root / 'copy.hmeb', records)
        self.assertEqual(copy.read_bytes(), embeddings.read_bytes())

        report = read_report(self.pipeline.cmd_probe_eval(str(embeddings), str(self.root / 'report.json')))
        self.assertTrue({'task', 'classes', 'runs', 'metrics', 'confusion_last_run', 'config_digest'} <= set(report))
        self.assertEqual(report['classes'], ['slide_0', 'slide_1', 'slide_2'])
        self.assertEqual(set(report['metrics']), {'f1_per_class', 'f1_macro', 'f1_weighted', 'auc_ovr'})
        self.assertIn('std', report['metrics']['f1_weighted'])

        heatmaps = self.pipeline.cmd_attend(checkpoint, str(manifest.resolve(manifest.rows[0])),
                                            str(self.root / 'attn'))
        self.assertEqual(len(heatmaps), 4 + 1)
        for path in heatmaps:
            pixels = read_gray(path)
            self.assertEqual(pixels.shape, (32, 32))

        out_csv = self.pipeline.cmd_project(str(embeddings), str(self.root / 'proj.csv'))
        with open(out_csv, encoding='utf-8') as f:
            self.assertEqual(len(list(csv.DictReader(f))), 31)
        self.assertTrue((self.root / 'proj.png').exists())

    def test_paths_from_config(self):
        paths = {
            'slides_dir': self.slides,
            'corpus_dir': self.root / 'cfg' / 'corpus',
            'manifest': self.root / 'cfg' / 'corpus' / 'manifest.csv',
            'checkpoint': self.root / 'cfg' / 'model.hmae',
            'embeddings': self.root / 'cfg' / 'emb.hmeb',
            'report': self.root / 'cfg' / 'report.json',
            'projection': self.root / 'cfg' / 'proj.csv',
        }
        overrides = FAST_OVERRIDES + [f'paths.{key}={value}' for key, value in paths.items()]
        pipeline = HmaePipeline(load_config('tiny', overrides=overrides, seed=0))
        self.assertEqual(pipeline.cmd_generate(), paths['manifest'])
        self.assertTrue(np.isfinite(pipeline.cmd_pretrain()))
        self.assertEqual(pipeline.cmd_embed(), 30)
        self.assertEqual(pipeline.cmd_probe_eval(), paths['report'])
        self.assertEqual(pipeline.cmd_project(), paths['projection'])
        for key in ('checkpoint', 'embeddings', 'report', 'projection'):
            with self.subTest(path=key):
                self.assertTrue(paths[key].exists())

    def test_explicit_path_beats_config(self):
        overrides = FAST_OVERRIDES + [f'paths.corpus_dir={self.root / "unused"}']
        pipeline = HmaePipeline(load_config('tiny', overrides=overrides, seed=0))
        pipeline.cmd_generate(str(self.slides), str(self.root / 'explicit'))
        self.assertTrue((self.root / 'explicit' / 'manifest.csv').exists())
        self.assertFalse((self.root / 'unused').exists())

    def test_missing_path_names_config_key(self):
        with self.assertRaises(ParameterError) as ctx:
            self.pipeline.cmd_pretrain()
        self.assertIn('paths.manifest', str(ctx.exception))

    def test_run_requires_slide_labels(self):
        pipeline = HmaePipeline(load_config('tiny', overrides=['corpus.count=5'], seed=0))
        with self.assertRaises(ConfigError) as ctx:
            pipeline.run(str(self.slides), str(self.root / 'out'))
        self.assertIn('label_from_slide', str(ctx.exception))
        pipeline = HmaePipeline(load_config('tiny', overrides=['corpus.label_from_slide=true'], seed=0))
        with self.assertRaises(ConfigError) as ctx:
            pipeline.run(str(self.slides), str(self.root / 'out'))
        self.assertIn('slide_0', str(ctx.exception))
        self.assertFalse((self.root / 'out').exists())

    def test_single_run_report_has_no_std(self):
        pipeline = HmaePipeline(load_config('tiny', overrides=FAST_OVERRIDES + ['eval.runs=1'], seed=0))
        manifest = pipeline.cmd_generate(str(self.slides), str(self.root / 'corpus'))
        pipeline.cmd_pretrain(str(manifest), str(self.root / 'm.hmae'))
        pipeline.cmd_embed(str(self.root / 'm.hmae'), str(manifest), str(self.root / 'e.hmeb'))
        report = read_report(pipeline.cmd_probe_eval(str(self.root / 'e.hmeb'), str(self.root / 'r.json')))
        self.assertEqual(report['runs'], 1)
        self.assertNotIn('std', report['metrics']['f1_macro'])

    def test_run_is_reproducible(self):
        first = self.pipeline.run(str(self.slides), str(self.root / 'one'))
        second = self.pipeline.run(str(self.slides), str(self.root / 'two'))
        for key in ('checkpoint', 'embeddings', 'report', 'projection'):
            with self.subTest(artifact=key):
                self.assertEqual(Path(first[key]).read_bytes(), Path(second[key]).read_bytes())
        self.assertEqual(first['embedded'], 30)


class TestMain(unittest.TestCase):
    """Exit codes of the command-line entry point."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.root = Path(self.temp_dir)
        write_slides(self.root / 'slides', [noise_slide(96, 96)])
        self.stdout_patcher = patch('sys.stdout', new_callable=io.StringIO)
        self.stdout_patcher.start()

    def tearDown(self):
        self.stdout_patcher.stop()
        shutil.rmtree(self.temp_dir)

    def test_success(self):
        code = main(['generate', str(self.root / 'slides'), str(self.root / 'out'), '--set', 'corpus.count=5'])
        self.assertEqual(code, 0)
        self.assertTrue((self.root / 'out' / 'manifest.csv').exists())

    def test_validation_error_exit_code(self):
        self.assertEqual(main(['generate', str(self.root / 'slides'), str(self.root / 'out'),
                               '--set', 'training.steps=0']), 2)
        self.assertEqual(main(['pretrain', str(self.root / 'missing.csv'), str(self.root / 'x.hmae')]), 2)

    def test_runtime_error_exit_code(self):
        self.assertEqual(main(['generate', str(self.root / 'nowhere'), str(self.root / 'out')]), 1)
        with patch('main.HmaePipeline.cmd_generate', side_effect=RuntimeError('boom')):
            self.assertEqual(main(['generate', str(self.root / 'slides'), str(self.root / 'out')]), 1)

    def test_seed_flag(self):
        with patch('main.dispatch') as mock_dispatch:
            self.assertEqual(main(['project', 'e.hmeb', 'p.csv', '--seed', '7', '--threads', '2']), 0)
        pipeline = mock_dispatch.call_args[0][0]
        self.assertEqual((pipeline.seed, pipeline.threads), (7, 2))

    def test_config_paths_on_command_line(self):
        code = main(['generate', '--set', f'paths.slides_dir={self.root / "slides"}',
                     '--set', f'paths.corpus_dir={self.root / "cfg"}', '--set', 'corpus.count=5'])
        self.assertEqual(code, 0)
        self.assertTrue((self.root / 'cfg' / 'manifest.csv').exists())
        self.assertEqual(main(['pretrain']), 2)

    def test_run_help_names_label_requirement(self):
        self.assertIn('corpus.label_from_slide=true', build_parser().format_help())

    def test_parser_requires_command(self):
        with patch('sys.stderr', new_callable=io.StringIO):
            with self.assertRaises(SystemExit):
                build_parser().parse_args([])


@pytest.mark.slow
class TestEndToEnd(unittest.TestCase):
    """Full synthetic pipeline at acceptance scale."""

    def test_full_pipeline_byte_reproducible(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            write_slides(root / 'slides', [noise_slide(256, 256, seed=i) for i in range(3)])
            overrides = ['training.steps=500', 'corpus.label_from_slide=true', f'eval.classes={SLIDE_CLASSES}',
                         'eval.coarse_map=null', 'eval.task=fine', 'eval.runs=10', 'eval.perplexity=30']
            outputs = []
            for name in ('a', 'b'):
                pipeline = HmaePipeline(load_config('tiny', overrides=overrides, seed=1, threads=4))
                with patch('sys.stdout', new_callable=io.StringIO):
                    outputs.append(pipeline.run(str(root / 'slides'), str(root / name)))
            for key in ('manifest', 'checkpoint', 'embeddings', 'report', 'projection'):
                self.assertEqual(Path(outputs[0][key]).read_bytes(), Path(outputs[1][key]).read_bytes())


if __name__ == '__main__':
    unittest.main()
