"""
Tests for region sampling, quality filtering, resizing and splitting.
"""

import unittest
import os
import sys
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np
from scipy import stats

# Add the parent directory to the path so we can import components
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from components.corpus import (
    CorpusManifest, ManifestRow, SizeDistribution, SlideImage, fit_size_distribution, generate_corpus,
    largest_remainder, load_slides, quality_check, read_roi_sizes, resize_bilinear, sample_crop,
    stratified_assign, stratified_split,
)
from components.errors import CorpusError, DegenerateInputError, GeometryError, ParameterError, SplitError
from utils.image_io import read_rgb
from tests.fixtures import constant_image, mostly_blank_slide, noise_slide, write_slides


def in_memory(pixels: np.ndarray, slide_id: str = 's0') -> SlideImage:
    return SlideImage(pixels, f"{slide_id}.png", slide_id)


class TestSizeDistribution(unittest.TestCase):

    def test_constant_sides(self):
        dist = fit_size_distribution([100, 100, 100])
        self.assertEqual((dist.mu, dist.sigma), (100.0, 0.0))

    def test_two_sides(self):
        dist = fit_size_distribution([100, 200])
        self.assertEqual(dist.mu, 150.0)
        self.assertAlmostEqual(dist.sigma, 70.7107, places=4)
        self.assertLessEqual(dist.clamp_min, dist.mu)
        self.assertGreaterEqual(dist.clamp_max, dist.mu)

    def test_fit_recovers_parameters(self):
        sides = np.random.default_rng(0).normal(256, 64, size=10_000)
        dist = fit_size_distribution(sides)
        self.assertAlmostEqual(dist.mu, 256, delta=0.02 * 256)
        self.assertAlmostEqual(dist.sigma, 64, delta=0.02 * 64)

    def test_draws_match_truncated_normal(self):
        dist = SizeDistribution(256, 64, 64, 512)
        rng = np.random.default_rng(1)
        draws = np.array([dist.draw(rng) for _ in range(10_000)])
        a, b = (64 - 256) / 64, (512 - 256) / 64
        self.assertAlmostEqual(draws.mean(), 256, delta=0.02 * 256)
        self.assertAlmostEqual(draws.std(), stats.truncnorm.std(a, b, 256, 64), delta=0.02 * 64)

    def test_fit_errors(self):
        with self.assertRaises(DegenerateInputError):
            fit_size_distribution([100])
        with self.assertRaises(GeometryError):
            fit_size_distribution([10, 12, 14], patch_size=16)
        with self.assertRaises(ParameterError):
            SizeDistribution(10, 5, 64, 512).validate()

    def test_read_roi_sizes(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'roi.csv'
            path.write_text('side\n120\n\n256.5\n')
            self.assertEqual(read_roi_sizes(path), [120.0, 256.5])
            path.write_text('120\nwide\n')
            with self.assertRaises(ParameterError):
                read_roi_sizes(path)


class TestSampleCrop(unittest.TestCase):

    def test_zero_sigma_gives_mu(self):
        dist = SizeDistribution(100, 0, 64, 512)
        slide = in_memory(np.zeros((300, 300, 3), np.uint8))
        rng = np.random.default_rng(0)
        self.assertEqual({sample_crop(slide, dist, rng).side for _ in range(50)}, {100})

    def test_exact_fit_forces_origin(self):
        dist = SizeDistribution(100, 0, 64, 512)
        crop = sample_crop(in_memory(np.zeros((100, 100, 3), np.uint8)), dist, np.random.default_rng(0))
        self.assertEqual((crop.x, crop.y, crop.side), (0, 0, 100))

    def test_small_slide(self):
        with self.assertRaises(GeometryError):
            sample_crop(in_memory(np.zeros((50, 400, 3), np.uint8)), SizeDistribution(), np.random.default_rng(0))

    def test_side_histogram_is_truncated_normal(self):
        dist = SizeDistribution(256, 64, 64, 512)
        slide = in_memory(np.zeros((600, 600, 3), np.uint8))
        rng = np.random.default_rng(2)
        sides = np.array([sample_crop(slide, dist, rng).side for _ in range(10_000)], dtype=np.float64)
        self.assertTrue(np.all((sides >= 64) & (sides <= 512)))
        # integer sides, dequantized before comparing continuous CDFs
        jittered = sides + np.random.default_rng(3).uniform(-0.5, 0.5, sides.size)
        a, b = (64 - 256) / 64, (512 - 256) / 64
        result = stats.kstest(jittered, stats.truncnorm(a, b, loc=256, scale=64).cdf)
        self.assertGreater(result.pvalue, 0.01)

    def test_geometry_always_in_bounds(self):
        rng = np.random.default_rng(4)
        dist = SizeDistribution(48, 20, 24, 96)
        for _ in range(100):
            h, w = rng.integers(24, 200, size=2)
            slide = in_memory(np.zeros((h, w, 3), np.uint8))
            for _ in range(1000):
                crop = sample_crop(slide, dist, rng)
                self.assertTrue(0 <= crop.x and crop.x + crop.side <= w and 0 <= crop.y and crop.y + crop.side <= h)
                self.assertGreaterEqual(crop.side, 24)


class TestQualityCheck(unittest.TestCase):

    def test_constant_white_rejected(self):
        result = quality_check(constant_image(16, 255), 0.1)
        self.assertEqual(result.cv, 0.0)
        self.assertFalse(result.accepted)

    def test_checkerboard_cv_is_one(self):
        board = np.zeros((8, 8, 3), np.uint8)
        board[(np.indices((8, 8)).sum(axis=0) % 2) == 0] = 255
        result = quality_check(board, 0.1)
        self.assertAlmostEqual(result.cv, 1.0, places=12)
        self.assertTrue(result.accepted)

    def test_loop_oracle(self):
        crop = noise_slide(12, 12, seed=5)
        values = [0.299 * float(p[0]) + 0.587 * float(p[1]) + 0.114 * float(p[2]) for row in crop for p in row]
        mean = sum(values) / len(values)
        var = sum((v - mean) ** 2 for v in values) / len(values)
        self.assertAlmostEqual(quality_check(crop, 0.0).cv, var ** 0.5 / mean, delta=1e-9)

    def test_black_is_degenerate(self):
        result = quality_check(constant_image(8, 0), 0.1)
        self.assertFalse(result.accepted)
        self.assertTrue(result.degenerate)
        self.assertEqual(result.cv, float('inf'))

    def test_empty(self):
        with self.assertRaises(DegenerateInputError):
            quality_check(np.zeros((0, 0, 3), np.uint8), 0.1)


class TestResize(unittest.TestCase):

    def test_identity(self):
        image = noise_slide(16, 16)
        out = resize_bilinear(image, 16)
        np.testing.assert_array_equal(out, image)
        self.assertIsNot(out, image)

    def test_constant_stays_constant(self):
        out = resize_bilinear(constant_image(10, 77), 23)
        self.assertEqual(out.shape, (23, 23, 3))
        self.assertTrue(np.all(out == 77))

    def test_gradient_formula(self):
        image = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = resize_bilinear(image, 4)

        def coord(i):
            return min(max((i + 0.5) * 0.5 - 0.5, 0.0), 1.0)

        for r in range(4):
            for c in range(4):
                y, x = coord(r), coord(c)
                expected = (image[0, 0] * (1 - y) * (1 - x) + image[0, 1] * (1 - y) * x
                            + image[1, 0] * y * (1 - x) + image[1, 1] * y * x)
                self.assertAlmostEqual(out[r, c], expected, delta=1e-6)

    def test_non_square_target(self):
        self.assertEqual(resize_bilinear(noise_slide(20, 30), (8, 12)).shape, (8, 12, 3))

    def test_size_errors(self):
        with self.assertRaises(ParameterError):
            resize_bilinear(noise_slide(8, 8), 1)
        with self.assertRaises(GeometryError):
            resize_bilinear(noise_slide(1, 8), 4)


class TestGenerateCorpus(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.dist = SizeDistribution(48, 12, 24, 96)

    def tearDown(self):
        self.tmp.cleanup()

    def test_count_must_be_positive(self):
        with self.assertRaises(ParameterError):
            generate_corpus([in_memory(noise_slide())], self.dist, 0, 0.05, 0, self.root, 32)

    def test_noise_slide_nearly_always_accepted(self):
        manifest = generate_corpus([in_memory(noise_slide())], self.dist, 50, 0.05, 0, self.root / 'a', 32)
        self.assertGreater(manifest.stats['acceptance_rate'], 0.99)
        self.assertEqual(len(manifest.rows), 50)
        for row in manifest.rows:
            self.assertGreater(row.cv, 0.05)
            self.assertEqual(read_rgb(manifest.resolve(row)).shape, (32, 32, 3))
            self.assertFalse(Path(row.path).is_absolute())

    def test_accepted_crops_cover_texture(self):
        dist = SizeDistribution(64, 16, 32, 128)
        slide = in_memory(mostly_blank_slide(400, 126))
        manifest = generate_corpus([slide], dist, 20, 0.1, 0, self.root, 32)
        overlapping = [row for row in manifest.rows if row.x < 126 and row.y < 126]
        self.assertGreaterEqual(len(overlapping), 0.8 * len(manifest.rows))

    def test_worker_count_does_not_change_output(self):
        slides = [in_memory(noise_slide(seed=0), 'a'), in_memory(mostly_blank_slide(seed=1), 'b')]
        single = generate_corpus(slides, self.dist, 30, 0.05, 7, self.root / 'one', 32)
        pooled = generate_corpus(slides, self.dist, 30, 0.05, 7, self.root / 'four', 32, workers=4)
        self.assertEqual(single.rows, pooled.rows)

    def test_repeat_runs_are_byte_identical(self):
        slides = [in_memory(noise_slide(seed=3))]
        paths = []
        for name in ('x', 'y'):
            manifest = generate_corpus(slides, self.dist, 10, 0.05, 11, self.root / name, 32, label_from_slide=True)
            paths.append(manifest.write(self.root / name / 'manifest.csv'))
        self.assertEqual(paths[0].read_bytes(), paths[1].read_bytes())
        self.assertEqual(CorpusManifest.read(paths[0]).labels(), ['s0'] * 10)

    def test_budget_exhaustion_reports_rate(self):
        with self.assertRaises(CorpusError) as ctx:
            generate_corpus([in_memory(constant_image(128, 200))], self.dist, 5, 0.1, 0, self.root, 32,
                            budget_factor=2)
        self.assertIn('acceptance rate 0.000', str(ctx.exception))


class TestManifest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.rows = [
            ManifestRow('crop_00000001', 'images/crop_00000001.png', 's0', 1, 2, 40, 0.123456789, 'DCIS', 'train'),
            ManifestRow('crop_00000002', 'images/crop_00000002.png', 's0', 3, 4, 50, 0.5),
        ]

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_read(self):
        path = CorpusManifest(self.rows).write(self.root / 'm.csv')
        lines = path.read_text(encoding='utf-8').split('\n')
        self.assertEqual(lines[0], 'id,path,slide,x,y,side,cv,label,split')
        self.assertTrue(lines[2].endswith(',,'))
        loaded = CorpusManifest.read(path)
        self.assertEqual(loaded.rows, self.rows)
        self.assertEqual(loaded.resolve(loaded.rows[0]), self.root / 'images/crop_00000001.png')

    def test_duplicates_rejected(self):
        with self.assertRaises(CorpusError):
            CorpusManifest([self.rows[0], self.rows[0]]).write(self.root / 'dup.csv')

    def test_bad_header(self):
        path = self.root / 'bad.csv'
        path.write_text('id,path\nx,y\n')
        with self.assertRaises(CorpusError):
            CorpusManifest.read(path)

    def test_load_slides(self):
        with self.assertRaises(CorpusError):
            load_slides(self.root / 'missing')
        (self.root / 'empty').mkdir()
        with self.assertRaises(CorpusError):
            load_slides(self.root / 'empty')
        write_slides(self.root / 'slides', [noise_slide(32, 32, seed=i) for i in range(3)])
        self.assertEqual([s.slide_id for s in load_slides(self.root / 'slides')], ['slide_0', 'slide_1', 'slide_2'])


class TestStratifiedSplit(unittest.TestCase):

    def test_largest_remainder(self):
        self.assertEqual(largest_remainder(10, [0.7, 0.1, 0.2]), [7, 1, 2])
        self.assertEqual(largest_remainder(100, [0.7, 0.1, 0.2]), [70, 10, 20])
        self.assertEqual(largest_remainder(7, [0.5, 0.5]), [4, 3])

    def test_single_class(self):
        tags = stratified_assign(['a'] * 100, (0.7, 0.1, 0.2), np.random.default_rng(0))
        self.assertEqual(Counter(tags), {'train': 70, 'val': 10, 'test': 20})

    def test_per_class_counts(self):
        labels = ['a'] * 10 + ['b'] * 10 + ['c'] * 10
        tags = stratified_assign(labels, (0.7, 0.1, 0.2), np.random.default_rng(0))
        for cls in 'abc':
            counts = Counter(t for t, l in zip(tags, labels) if l == cls)
            self.assertEqual(counts, {'train': 7, 'val': 1, 'test': 2})

    def test_partition_over_random_labels(self):
        rng = np.random.default_rng(1)
        fractions = (0.7, 0.1, 0.2)
        for _ in range(1000):
            classes = int(rng.integers(1, 5))
            labels = list(np.repeat(np.arange(classes), rng.integers(3, 30, size=classes)))
            tags = stratified_assign(labels, fractions, rng)
            self.assertEqual(len(tags), len(labels))
            self.assertTrue(all(t in ('train', 'val', 'test') for t in tags))
            for cls in range(classes):
                members = [t for t, l in zip(tags, labels) if l == cls]
                for name, f in zip(('train', 'val', 'test'), fractions):
                    self.assertLess(abs(members.count(name) - f * len(members)), 1.0)

    def test_errors(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(SplitError):
            stratified_assign(['a', 'a', 'b', 'b', 'b'], (0.7, 0.1, 0.2), rng)
        with self.assertRaises(SplitError):
            stratified_assign(['a', None, 'a', 'a'], (0.7, 0.1, 0.2), rng)
        with self.assertRaises(ParameterError):
            stratified_assign(['a'] * 5, (0.5, 0.5, 0.5), rng)

    def test_split_rows_is_deterministic(self):
        rows = [ManifestRow(f"r{i}", f"r{i}.png", 's', 0, 0, 10, 0.5, 'ab'[i % 2]) for i in range(20)]
        first, second = stratified_split(rows, seed=3), stratified_split(rows, seed=3)
        self.assertEqual([r.split for r in first], [r.split for r in second])
        self.assertIsNone(rows[0].split)


if __name__ == '__main__':
    unittest.main()
