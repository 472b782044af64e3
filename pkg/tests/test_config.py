"""
Tests for presets and run configuration.
"""

import unittest
import os
import sys
import json
import shutil
import tempfile
from pathlib import Path

# Add the parent directory to the path so we can import utils
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from components.errors import ConfigError
from utils.config import RunConfig, load_config, parse_override, save_config
from utils.preset_loader import PresetLoader


class TestPresetLoader(unittest.TestCase):
    """Test cases for PresetLoader functionality."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.preset_loader = PresetLoader(self.temp_dir)
        with open(Path(self.temp_dir) / "small.json", 'w') as f:
            json.dump({"training": {"steps": 5}}, f)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_load_preset_success(self):
        self.assertEqual(self.preset_loader.load_preset('small'), {"training": {"steps": 5}})

    def test_load_preset_not_found(self):
        with self.assertRaises(ConfigError):
            self.preset_loader.load_preset('nonexistent_preset')

    def test_preset_caching_returns_copies(self):
        first = self.preset_loader.load_preset('small')
        first['training']['steps'] = 999
        self.assertIn('small', self.preset_loader._preset_cache)
        self.assertEqual(self.preset_loader.load_preset('small')['training']['steps'], 5)

    def test_reload_preset(self):
        self.preset_loader.load_preset('small')
        with open(Path(self.temp_dir) / "small.json", 'w') as f:
            json.dump({"training": {"steps": 7}}, f)
        self.assertEqual(self.preset_loader.load_preset('small')['training']['steps'], 5)
        self.assertEqual(self.preset_loader.reload_preset('small')['training']['steps'], 7)

    def test_list_and_clear(self):
        with open(Path(self.temp_dir) / "other.json", 'w') as f:
            f.write('{}')
        self.assertEqual(self.preset_loader.list_available_presets(), ['other', 'small'])
        self.preset_loader.load_preset('small')
        self.preset_loader.clear_cache()
        self.assertEqual(len(self.preset_loader._preset_cache), 0)

    def test_invalid_files(self):
        with open(Path(self.temp_dir) / "list.json", 'w') as f:
            f.write('[1, 2]')
        with open(Path(self.temp_dir) / "broken.json", 'w') as f:
            f.write('{"training": ')
        for name in ('list', 'broken'):
            with self.subTest(preset=name):
                with self.assertRaises(ConfigError):
                    self.preset_loader.load_preset(name)


class TestRunConfig(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_shipped_presets_validate(self):
        for preset in ('tiny', 'desk', 'vit_s16'):
            with self.subTest(preset=preset):
                self.assertIsInstance(load_config(preset), RunConfig)

    def test_training_defaults(self):
        training = RunConfig().training
        self.assertEqual(training.lr, 1.5e-4)
        self.assertEqual((training.beta1, training.beta2, training.weight_decay), (0.9, 0.95, 0.05))
        self.assertEqual(load_config('vit_s16').training.lr, training.lr)

    def test_tiny_preset(self):
        config = load_config('tiny')
        self.assertEqual((config.model.input_size, config.model.patch_size), (32, 8))
        self.assertEqual((config.model.encoder_dim, config.model.encoder_depth), (64, 2))
        self.assertEqual(config.eval.headline, 'f1_macro')

    def test_overrides_and_flags(self):
        config = load_config('tiny', overrides=['training.steps=10', 'eval.task=fine', 'probe.standardize=false'],
                             seed=9, threads=3)
        self.assertEqual(config.training.steps, 10)
        self.assertEqual(config.eval.task, 'fine')
        self.assertEqual(config.eval.headline, 'f1_weighted')
        self.assertFalse(config.probe.standardize)
        self.assertEqual((config.seed, config.threads), (9, 3))

    def test_parse_override(self):
        self.assertEqual(parse_override('eval.fractions=[0.8,0.1,0.1]'), {'eval': {'fractions': [0.8, 0.1, 0.1]}})
        self.assertEqual(parse_override('seed=4'), {'seed': 4})
        with self.assertRaises(ConfigError):
            parse_override('training.steps')
        with self.assertRaises(ConfigError):
            parse_override('=3')

    def test_unknown_keys_rejected(self):
        with self.assertRaises(ConfigError):
            load_config('tiny', overrides=['training.epochs=3'])
        with self.assertRaises(ConfigError):
            load_config('tiny', overrides=['logging.level=1'])

    def test_invalid_values_rejected(self):
        for override in ('model.encoder_heads=3', 'eval.fractions=[0.5,0.5,0.5]', 'eval.task="both"',
                         'corpus.clamp_min=8', 'training.warmup_steps=5000', 'threads=0'):
            with self.subTest(override=override):
                with self.assertRaises(ConfigError):
                    load_config('tiny', overrides=[override])

    def test_config_file_and_coarse_map_replacement(self):
        path = Path(self.temp_dir) / 'run.json'
        coarse_map = {name: 'any' for name in ['Normal', 'Benign', 'UDH', 'ADH', 'FEA', 'DCIS', 'Invasive']}
        path.write_text(json.dumps({'eval': {'coarse_map': coarse_map, 'coarse_classes': ['any']}}))
        config = load_config('tiny', config_path=path)
        self.assertEqual(config.eval.coarse_map, coarse_map)
        self.assertEqual(config.eval.mapping().coarse().classes, ['any'])

    def test_transfer_task_forces_linear_probe(self):
        config = load_config('tiny', overrides=['eval.task=transfer'])
        self.assertEqual(config.probe.kind, 'mlp')
        self.assertEqual(config.probe_config().kind, 'linear')

    def test_digest(self):
        self.assertEqual(load_config('tiny').digest(), load_config('tiny').digest())
        self.assertNotEqual(load_config('tiny').digest(), load_config('tiny', seed=1).digest())

    def test_save_and_reload(self):
        config = load_config('desk', seed=3)
        path = save_config(config, Path(self.temp_dir) / 'saved' / 'config.json')
        self.assertEqual(load_config(None, config_path=path), config)


if __name__ == '__main__':
    unittest.main()
