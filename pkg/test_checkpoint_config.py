"""
PA-EWC Desk Lab - Checkpoint and Config Test Suite
Tests the binary checkpoint format and experiment YAML loading
"""

import json
import logging
import os
import tempfile
import unittest
from collections import OrderedDict
from pathlib import Path
from unittest.mock import patch

import numpy as np

from checkpoint_io import (
    FORMAT_VERSION, PREAMBLE, decode_arrays, encode_arrays, load_checkpoint, load_snapshot, restore_checkpoint,
    save_checkpoint, save_snapshot,
)
from errors import (
    CheckpointFormatError, ConfigError, NumericError, ShapeMismatchError, TruncatedPayloadError,
    VersionMismatchError,
)
from experiment_config import OUTPUT_ROOT_ENV, RunCell, load_config, parse_config
from fisher_adaptive import ActivationStats, FisherSnapshot
from toy_model import GROUPS, ModelConfig, build_model

logging.basicConfig(level=logging.WARNING)

SMALL = ModelConfig(image_size=8, channels=3, patch_size=4, embed_dim=4, vocab_size=128, n_heads=2)


def _rewrite_header(data: bytes, edit) -> bytes:
    """Apply edit(header dict) and repack, keeping the payload"""
    _, length = PREAMBLE.unpack(data[:PREAMBLE.size])
    header = json.loads(data[PREAMBLE.size:PREAMBLE.size + length])
    edit(header)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREAMBLE.pack(b"PAEW", len(raw)) + raw + data[PREAMBLE.size + length:]


def _encoded() -> bytes:
    arrays = OrderedDict([("a", (np.arange(6.0).reshape(2, 3), "visual")), ("b", (np.array([0.5]), "medical"))])
    return encode_arrays("params", arrays, {"step": 3})


class TestCheckpointFormat(unittest.TestCase):
    """Encoding, decoding and corruption detection"""

    def test_decode_encoded(self):
        kind, arrays, meta = decode_arrays(_encoded())
        self.assertEqual(kind, "params")
        self.assertEqual(list(arrays), ["a", "b"])
        np.testing.assert_array_equal(arrays["a"][0], np.arange(6.0).reshape(2, 3))
        self.assertEqual(arrays["b"][1], "medical")
        self.assertEqual(meta, {"step": 3})

    def test_save_load_save_is_byte_identical(self):
        params = build_model(SMALL, 2)
        params.assign_groups({name: GROUPS[i % 3] for i, name in enumerate(params.names)})
        with tempfile.TemporaryDirectory() as tmp:
            first = save_checkpoint(Path(tmp) / "a.bin", params, {"task": 1})
            values, groups, meta = load_checkpoint(first)
            copy = params.copy()
            copy.load_values(values)
            copy.assign_groups(groups)
            second = save_checkpoint(Path(tmp) / "b.bin", copy, meta)
            self.assertEqual(first.read_bytes(), second.read_bytes())
        self.assertEqual(groups, params.group_of)

    def test_truncated_payload(self):
        data = _encoded()
        with self.assertRaises(TruncatedPayloadError):
            decode_arrays(data[:-8])
        with self.assertRaises(TruncatedPayloadError):
            decode_arrays(data[:5])
        with self.assertRaises(TruncatedPayloadError):
            decode_arrays(data[:PREAMBLE.size + 3])

    def test_bad_magic(self):
        with self.assertRaises(CheckpointFormatError):
            decode_arrays(b"NOPE" + _encoded()[4:])

    def test_version_mismatch(self):
        data = _rewrite_header(_encoded(), lambda h: h.update(version=FORMAT_VERSION + 1))
        with self.assertRaises(VersionMismatchError):
            decode_arrays(data)

    def test_missing_offset(self):
        data = _rewrite_header(_encoded(), lambda h: h["blocks"][0].pop("offset"))
        with self.assertRaises(CheckpointFormatError):
            decode_arrays(data)

    def test_nbytes_disagree_with_shape(self):
        def edit(header):
            header["blocks"][0]["shape"] = [3, 3]
        with self.assertRaises(ShapeMismatchError):
            decode_arrays(_rewrite_header(_encoded(), edit))

    def test_trailing_bytes(self):
        with self.assertRaises(CheckpointFormatError):
            decode_arrays(_encoded() + b"\x00" * 8)

    def test_non_finite_refused(self):
        with self.assertRaises(NumericError):
            encode_arrays("params", OrderedDict([("a", (np.array([np.nan]), "visual"))]))

    def test_restore_into_other_architecture(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "ck.bin", build_model(SMALL, 0))
            other = build_model(ModelConfig(image_size=8, patch_size=4, embed_dim=8, n_heads=2), 0)
            with self.assertRaises(ShapeMismatchError):
                restore_checkpoint(path, other)
            target = build_model(SMALL, 5)
            restore_checkpoint(path, target)
            np.testing.assert_array_equal(target["decoder.fc2.weight"].data,
                                          build_model(SMALL, 0)["decoder.fc2.weight"].data)


class TestSnapshotFiles(unittest.TestCase):
    """Fisher snapshot persistence"""

    def setUp(self):
        self.snapshot = FisherSnapshot(
            task_id=2,
            per_block_fisher={"w": np.array([1.0, 2.0]), "b": np.array([0.25])},
            anchor={"w": np.array([0.1, -0.2]), "b": np.array([3.0])},
            group_of={"w": "visual", "b": "spatial"},
            group_weight={"visual": 1.5, "spatial": 0.75},
            stability={"visual": 0.4, "spatial": 0.5, "medical": 0.3},
            similarity=0.8,
            complexity=12.0,
            activation=ActivationStats(per_layer=((0.1, 0.2), (0.3, 0.4)), layers=("x", "y")),
        )

    def test_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            loaded = load_snapshot(save_snapshot(Path(tmp) / "s" / "task2.bin", self.snapshot))
        self.assertEqual(loaded.task_id, 2)
        self.assertEqual(loaded.group_of, self.snapshot.group_of)
        self.assertEqual(loaded.group_weight, self.snapshot.group_weight)
        self.assertEqual(loaded.stability, self.snapshot.stability)
        self.assertEqual(loaded.activation, self.snapshot.activation)
        for name in ("w", "b"):
            np.testing.assert_array_equal(loaded.per_block_fisher[name], self.snapshot.per_block_fisher[name])
            np.testing.assert_array_equal(loaded.anchor[name], self.snapshot.anchor[name])

    def test_kinds_not_interchangeable(self):
        with tempfile.TemporaryDirectory() as tmp:
            snapshot_path = save_snapshot(Path(tmp) / "s.bin", self.snapshot)
            checkpoint_path = save_checkpoint(Path(tmp) / "c.bin", build_model(SMALL, 0))
            with self.assertRaises(CheckpointFormatError):
                load_checkpoint(snapshot_path)
            with self.assertRaises(CheckpointFormatError):
                load_snapshot(checkpoint_path)


MINIMAL_YAML = """\
methods: [sequential, pa_ewc]
orders: [order_A]
prompt_tiers: [comprehensive]
seeds: [43]
output_dir: runs/minimal
model:
  image_size: 16
  embed_dim: 8
trainer:
  epochs_per_task: 2
  batch_size: 4
  loss:
    w_ewc: 5.0
tasks:
  n_train: 8
  n_val: 4
  n_test: 4
"""


class TestExperimentConfig(unittest.TestCase):
    """YAML parsing, validation and hashing"""

    def test_parse_minimal(self):
        config = parse_config(MINIMAL_YAML)
        self.assertEqual(config.model.image_size, 16)
        self.assertEqual(config.trainer.loss.w_ewc, 5.0)
        self.assertEqual(config.trainer.loss.w_dice, 0.3)
        self.assertEqual(config.tasks.n_train, 8)
        cells = list(config.grid())
        self.assertEqual(len(cells), 2)
        self.assertEqual(cells[1].run_id, "pa_ewc__order_A__comprehensive__seed43")

    def test_empty_document_uses_defaults(self):
        config = parse_config("")
        self.assertEqual(config.seeds, [43])

    def test_unknown_key_reports_line(self):
        text = "methods: [sequential]\ntrainer:\n  epochs_per_task: 2\n  epoch: 3\n"
        with self.assertRaises(ConfigError) as ctx:
            parse_config(text)
        self.assertEqual(ctx.exception.line, 4)
        self.assertIn("trainer.epoch", str(ctx.exception))

    def test_unknown_top_level_key(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("methods: [sequential]\n\nruns: 3\n")
        self.assertEqual(ctx.exception.line, 3)

    def test_syntax_error_reports_line(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("methods: [sequential\norders: [order_A]\n")
        self.assertIsNotNone(ctx.exception.line)

    def test_grid_owned_keys_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("methods: [pa_ewc]\ntrainer:\n  method: sequential\n")
        self.assertEqual(ctx.exception.line, 3)

    def test_bad_values(self):
        for text in ("methods: [ewc]\n", "orders: [order_Q]\n", "prompt_tiers: [verbose]\n",
                     "seeds: [-1]\n", "trainer:\n  learning_rate: fast\n", "trainer:\n  batch_size: 2.5\n",
                     "model:\n  image_size: 30\n", "methods: [pa_ewc, pa_ewc]\n"):
            with self.assertRaises(ConfigError, msg=text):
                parse_config(text)

    def test_invalid_value_points_at_section(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("seeds: [43]\nmodel:\n  image_size: 30\n")
        self.assertEqual(ctx.exception.line, 2)

    def test_scalar_lists_accepted(self):
        config = parse_config("methods: pa_ewc\nseeds: 7\n")
        self.assertEqual(config.methods, ["pa_ewc"])
        self.assertEqual(config.seeds, [7])

    def test_missing_lexicon_file(self):
        with self.assertRaises(ConfigError):
            parse_config("lexicon: /nonexistent/lexicon.txt\n")

    def test_output_root_env(self):
        config = parse_config(MINIMAL_YAML)
        with patch.dict(os.environ, {OUTPUT_ROOT_ENV: "/tmp/paewc"}):
            self.assertEqual(config.resolved_output_dir(), Path("/tmp/paewc/runs/minimal"))
        with patch.dict(os.environ, {}, clear=True):
            self.assertEqual(config.resolved_output_dir(), Path("runs/minimal"))

    def test_config_hash(self):
        a = parse_config(MINIMAL_YAML)
        b = parse_config(MINIMAL_YAML)
        cell = RunCell("pa_ewc", "order_A", "comprehensive", 43)
        self.assertEqual(a.config_hash(cell), b.config_hash(cell))
        self.assertEqual(len(a.config_hash(cell)), 64)
        self.assertNotEqual(a.config_hash(cell), a.config_hash(RunCell("pa_ewc", "order_A", "comprehensive", 44)))
        changed = parse_config(MINIMAL_YAML.replace("w_ewc: 5.0", "w_ewc: 6.0"))
        self.assertNotEqual(a.config_hash(cell), changed.config_hash(cell))

    def test_trainer_for_cell(self):
        config = parse_config(MINIMAL_YAML)
        trainer = config.trainer_for(RunCell("sequential", "order_A", "basic", 9))
        self.assertEqual((trainer.method, trainer.seed), ("sequential", 9))
        self.assertEqual(trainer.epochs_per_task, 2)

    def test_load_config_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config("/nonexistent/experiment.yaml")

    def test_shipped_configs_parse(self):
        root = Path(__file__).resolve().parent / "configs"
        for path in sorted(root.glob("*.yaml")):
            with self.subTest(config=path.name):
                load_config(path)


if __name__ == "__main__":
    unittest.main()
