"""
Test suite for run-config validators.
"""

import tempfile
from pathlib import Path

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from symploc.validators import (
    build_run_config,
    load_run_config,
    parse_bool,
    parse_list,
    parse_overrides,
    validate_value,
)


class ParserTests(SimpleTestCase):
    """Tests for the value parsers."""

    def test_booleans(self):
        """Common spellings of true and false parse."""
        for text in ('true', 'True', '1', 'yes', 'on'):
            self.assertTrue(parse_bool(text))
        for text in ('false', 'FALSE', '0', 'no', 'off'):
            self.assertFalse(parse_bool(text))

    def test_bad_boolean(self):
        with self.assertRaises(ValueError):
            parse_bool('maybe')

    def test_lists_skip_blanks(self):
        self.assertEqual(parse_list(int)('1, 3,,5'), [1, 3, 5])
        self.assertEqual(parse_list(float)([5, '10']), [5.0, 10.0])


class ValidateValueTests(SimpleTestCase):
    """Tests for validating a single setting."""

    def test_valid_values_are_coerced(self):
        """Strings are converted to the schema type."""
        self.assertEqual(validate_value('seed', ' 7 '), 7)
        self.assertEqual(validate_value('gamma', '0.5'), 0.5)
        self.assertEqual(validate_value('branches', 'instance,global'), ['instance', 'global'])
        self.assertIs(validate_value('use_rie', 'false'), False)

    def test_unknown_key(self):
        with self.assertRaises(ValidationError) as ctx:
            validate_value('learning_rate', '0.1')
        self.assertEqual(ctx.exception.code, 'unknown_key')

    def test_unparsable_value(self):
        with self.assertRaises(ValidationError) as ctx:
            validate_value('dim', 'eight')
        self.assertEqual(ctx.exception.code, 'invalid_value')

    def test_missing_value(self):
        with self.assertRaises(ValidationError) as ctx:
            validate_value('dim', None)
        self.assertEqual(ctx.exception.code, 'invalid_value')

    def test_out_of_range(self):
        with self.assertRaises(ValidationError) as ctx:
            validate_value('shared_multiset_fraction', '1.5')
        self.assertEqual(ctx.exception.code, 'out_of_range')

    def test_open_lower_bound(self):
        """gamma must be strictly positive."""
        with self.assertRaises(ValidationError):
            validate_value('gamma', '0')

    def test_invalid_choice(self):
        with self.assertRaises(ValidationError) as ctx:
            validate_value('geometry_mode', 'lorentz')
        self.assertEqual(ctx.exception.code, 'invalid_choice')

    def test_unknown_branch_in_list(self):
        with self.assertRaises(ValidationError) as ctx:
            validate_value('branches', 'instance,fine')
        self.assertEqual(ctx.exception.code, 'invalid_choice')

    def test_empty_k_list(self):
        with self.assertRaises(ValidationError):
            validate_value('k_list', ' , ')

    def test_non_positive_k(self):
        with self.assertRaises(ValidationError):
            validate_value('k_list', '0,1')


class OverrideTests(SimpleTestCase):
    """Tests for --set parsing."""

    def test_pairs(self):
        self.assertEqual(parse_overrides(['seed=3', ' dim = 8 ', 'k_list=1,5']),
                         {'seed': '3', 'dim': '8', 'k_list': '1,5'})

    def test_value_may_contain_equals(self):
        self.assertEqual(parse_overrides(['dataset_path=a=b.jsonl']), {'dataset_path': 'a=b.jsonl'})

    def test_missing_equals(self):
        with self.assertRaises(ValidationError) as ctx:
            parse_overrides(['seed'])
        self.assertEqual(ctx.exception.code, 'invalid_override')

    def test_none(self):
        self.assertEqual(parse_overrides(None), {})


class RunConfigTests(SimpleTestCase):
    """Tests for merging and loading run configs."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def _config_file(self, text):
        path = self.dir / 'run.env'
        path.write_text(text, encoding='utf-8')
        return path

    def test_precedence(self):
        """--set beats the file, which beats the defaults."""
        path = self._config_file("seed=5\ndim=16\n")
        config = load_run_config(path, {'seed': '9'})
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.dim, 16)
        self.assertEqual(config.overrides, {'seed': '9'})
        self.assertEqual(config.source, str(path))

    def test_file_with_comments(self):
        config = load_run_config(self._config_file("# toy run\nbranches=relation\n"))
        self.assertEqual(config.branches, ['relation'])

    def test_missing_file(self):
        with self.assertRaises(ValidationError) as ctx:
            load_run_config(self.dir / 'absent.env')
        self.assertEqual(ctx.exception.code, 'missing_config')

    def test_unknown_key_in_file(self):
        with self.assertRaises(ValidationError) as ctx:
            load_run_config(self._config_file("epochs=3\n"))
        self.assertEqual(ctx.exception.code, 'unknown_key')

    def test_several_errors_are_collected(self):
        with self.assertRaises(ValidationError) as ctx:
            build_run_config({'dim': 'x'}, {'seed': '-1'})
        self.assertEqual(ctx.exception.code, 'invalid_config')
        self.assertIn('dim', ctx.exception.message)
        self.assertIn('seed', ctx.exception.message)

    def test_cross_key_checks(self):
        with self.assertRaises(ValidationError):
            build_run_config(overrides={'min_hints': '5', 'max_hints': '2'})
        with self.assertRaises(ValidationError):
            build_run_config(overrides={'dim': '10'})
        with self.assertRaises(ValidationError):
            build_run_config(overrides={'d_features': '7'})

    def test_unknown_attribute(self):
        with self.assertRaises(AttributeError):
            build_run_config().epochs

    def test_derived_configs(self):
        config = build_run_config(overrides={
            'd_features': '8', 'dim': '8', 'tau_init': '0', 'coarse_steps': '3', 'branches': 'global',
        })
        self.assertEqual(config.dataset_config().d_features, 8)
        model_config = config.model_config(d_features=8, d_hints=16)
        self.assertIsNone(model_config.tau_init)
        self.assertEqual(model_config.branches, ('global',))
        self.assertEqual(config.train_config().coarse_steps, 3)

    def test_relative_paths_resolve_against_output_dir(self):
        config = build_run_config(overrides={'dataset_path': 'data/toy.jsonl'})
        with override_settings(SYMPLOC_OUTPUT_DIR=self.dir):
            self.assertEqual(config.path('dataset_path'), self.dir / 'data' / 'toy.jsonl')
        absolute = self.dir / 'elsewhere.jsonl'
        config = build_run_config(overrides={'dataset_path': str(absolute)})
        self.assertEqual(config.path('dataset_path'), absolute)
