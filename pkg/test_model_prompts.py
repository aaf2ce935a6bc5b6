"""
PA-EWC Desk Lab - Toy Model and Prompt Test Suite
Tests the prompt-conditioned model, the prompt taxonomy and the vocabulary
"""

import logging
import tempfile
import unittest
from pathlib import Path

import numpy as np

from errors import ConfigError, InputError
from prompt_taxonomy import (
    ADAPTIVE_TIER, ROLE_CODES, TIERS, Lexicon, PromptAttributes, Vocabulary, category_phrases, complexity,
    generate_prompt, position_phrase, resolve_tier, tokenize, without_category,
)
from tensor_autodiff import Tape, finite_diff_check
from toy_model import (
    ACTIVATION_LAYERS, ARCHITECTURE, EXPECTED_GROUP_BY_PREFIX, ModelConfig, architecture_table, build_model, forward,
)

logging.basicConfig(level=logging.WARNING)

SMALL = ModelConfig(image_size=8, channels=3, patch_size=4, embed_dim=4, vocab_size=128, n_heads=2)


def _batch(cfg, seed=0, prompts=(("polyp",), ("pink", "round", "polyp", "located", "in", "center"))):
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.default()
    images = rng.uniform(size=(len(prompts), cfg.channels, cfg.image_size, cfg.image_size))
    return images, [vocab.encode(p) for p in prompts]


class TestToyModel(unittest.TestCase):
    """Parameter blocks, forward shapes and determinism"""

    def test_build_is_deterministic(self):
        a = build_model(SMALL, 7)
        b = build_model(SMALL, 7)
        for name in a.names:
            np.testing.assert_array_equal(a[name].data, b[name].data)
        self.assertFalse(np.array_equal(build_model(SMALL, 8)["decoder.fc1.weight"].data,
                                        a["decoder.fc1.weight"].data))

    def test_all_blocks_start_unassigned(self):
        params = build_model(SMALL, 0)
        self.assertEqual(len(params), len(ARCHITECTURE))
        self.assertEqual(set(params.group_of.values()), {"unassigned"})

    def test_forward_shape(self):
        params = build_model(SMALL, 0)
        images, tokens = _batch(SMALL)
        logits = forward(params, images, tokens)
        self.assertEqual(logits.shape, (2, 2, 8, 8))

    def test_prompt_changes_output(self):
        params = build_model(SMALL, 0)
        images, tokens = _batch(SMALL)
        same_image = np.repeat(images[:1], 2, axis=0)
        logits = forward(params, same_image, tokens).values.data
        self.assertFalse(np.allclose(logits[0], logits[1]))

    def test_padding_does_not_leak(self):
        params = build_model(SMALL, 0)
        images, tokens = _batch(SMALL)
        alone = forward(params, images[:1], tokens[:1]).values.data
        padded = forward(params, images, tokens).values.data[:1]
        np.testing.assert_allclose(alone, padded, atol=1e-12)

    def test_activation_layers_filled(self):
        params = build_model(SMALL, 0)
        images, tokens = _batch(SMALL)
        outputs = {}
        forward(params, images, tokens, activations=outputs)
        self.assertEqual(set(outputs), set(ACTIVATION_LAYERS))

    def test_wrong_image_shape(self):
        params = build_model(SMALL, 0)
        with self.assertRaises(InputError):
            forward(params, np.zeros((1, 3, 16, 16)), [[2]])

    def test_empty_prompt_rejected(self):
        params = build_model(SMALL, 0)
        with self.assertRaises(InputError):
            forward(params, np.zeros((1, 3, 8, 8)), [[]])

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            ModelConfig(image_size=30, patch_size=4).validate()
        with self.assertRaises(ConfigError):
            ModelConfig(embed_dim=6, n_heads=4).validate()

    def test_gradients_match_finite_differences(self):
        params = build_model(SMALL, 3)
        images, tokens = _batch(SMALL, seed=3)

        def objective(p):
            return forward(p, images, tokens).values.log_softmax(axis=1).mean()

        error = finite_diff_check(objective, params, abs_floor=1e-4, max_coords=64, rng=np.random.default_rng(3))
        self.assertLess(error, 1e-6)

    def test_every_block_gets_gradient(self):
        params = build_model(SMALL, 1)
        images, tokens = _batch(SMALL, seed=1)
        with Tape() as tape:
            loss = (forward(params, images, tokens).values * 1.0).sum()
        grads = tape.backward(loss, params)
        self.assertEqual(set(grads), set(params.names))

    def test_forward_is_pure(self):
        params = build_model(SMALL, 5)
        images, tokens = _batch(SMALL, seed=5)
        before = params.snapshot_values()
        with Tape() as tape:
            forward(params, images, tokens)
        recorded = len(tape)
        first = forward(params, images, tokens).values.data
        second = forward(params, images, tokens).values.data
        np.testing.assert_array_equal(first, second)
        self.assertEqual(len(tape), recorded)
        for name, value in before.items():
            np.testing.assert_array_equal(params[name].data, value)

    def test_visual_words_feed_vision_path(self):
        params = build_model(SMALL, 2)
        images, tokens = _batch(SMALL, seed=2, prompts=(("polyp", "located", "in", "center"),))
        with Tape() as tape:
            loss = forward(params, images, tokens).values.sum()
        self.assertEqual(np.abs(tape.backward(loss, params)["vision.attr_embed"]).max(), 0.0)
        images, tokens = _batch(SMALL, seed=2, prompts=(("large", "round", "polyp"),))
        with Tape() as tape:
            loss = forward(params, images, tokens).values.sum()
        self.assertGreater(np.abs(tape.backward(loss, params)["vision.attr_embed"]).max(), 0.0)

    def test_prompt_without_spatial_words_attends_null_slot(self):
        params = build_model(SMALL, 2)
        images, tokens = _batch(SMALL, seed=2, prompts=(("large", "round", "polyp"),))
        outputs = {}
        with Tape() as tape:
            loss = forward(params, images, tokens, activations=outputs).values.sum()
        grads = tape.backward(loss, params)
        np.testing.assert_allclose(outputs["cross_attention"],
                                   np.broadcast_to(params["xattn.out.bias"].data, outputs["cross_attention"].shape))
        for name in ("xattn.query.weight", "xattn.key.weight", "xattn.value.weight", "xattn.token_embed"):
            self.assertEqual(np.abs(grads[name]).max(), 0.0, name)

    def test_token_roles_follow_lexicon(self):
        params = build_model(SMALL, 0)
        vocab = Vocabulary.default()
        roles = params.token_roles
        self.assertEqual(roles[vocab.encode(["round"])[0]], ROLE_CODES["visual"])
        self.assertEqual(roles[vocab.encode(["located"])[0]], ROLE_CODES["spatial"])
        self.assertEqual(roles[vocab.encode(["polyp"])[0]], ROLE_CODES["medical"])
        self.assertEqual(roles[vocab.encode(["which"])[0]], 0)
        with self.assertRaises(InputError):
            params.set_token_roles(np.zeros(3))
        with self.assertRaises(InputError):
            params.set_token_roles(np.full(SMALL.vocab_size, 9))

    def test_architecture_table_regions(self):
        rows = architecture_table()
        self.assertEqual(len(rows), len(ARCHITECTURE))
        self.assertEqual({row["region"] for row in rows}, {"vision", "text", "xattn", "decoder"})
        for prefix in EXPECTED_GROUP_BY_PREFIX:
            self.assertTrue(any(row["block"].startswith(prefix) for row in rows))


class TestComplexity(unittest.TestCase):
    """Weighted prompt complexity"""

    def test_reference_scores(self):
        self.assertEqual(complexity(["polyp"]).value, 4.0)
        self.assertEqual(complexity(["the image"]).value, 2.0)
        self.assertEqual(complexity(["pink round polyp located in center"]).value, 18.0)

    def test_mean_over_prompt_set(self):
        self.assertEqual(complexity(["polyp", "the image"]).value, 3.0)

    def test_empty_inputs(self):
        with self.assertRaises(InputError):
            complexity([])
        with self.assertRaises(InputError):
            complexity(["  ...  "])

    def test_richer_tiers_score_higher(self):
        attributes = PromptAttributes(size="small", color="pink", position=(0, 2))
        basic = complexity([generate_prompt("basic", 1, attributes=attributes)]).value
        full = complexity([generate_prompt("comprehensive", 1, attributes=attributes)]).value
        self.assertGreater(full, basic)


class TestLexicon(unittest.TestCase):
    """Lexicon parsing and validation"""

    def test_overlapping_sections_rejected(self):
        with self.assertRaises(ConfigError):
            Lexicon.from_text("[visual]\nround\n[spatial]\nround\n[medical]\npolyp\n")

    def test_empty_section_rejected(self):
        with self.assertRaises(ConfigError):
            Lexicon.from_text("[visual]\nround\n[spatial]\nleft\n")

    def test_unknown_section_has_line(self):
        with self.assertRaises(ConfigError) as ctx:
            Lexicon.from_text("[visual]\nround\n[colour]\nred\n")
        self.assertEqual(ctx.exception.line, 3)

    def test_from_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "lexicon.txt"
            path.write_text("# custom\n[visual]\nRed\n[spatial]\nabove\n[medical]\ncyst\n", encoding="utf-8")
            lexicon = Lexicon.from_file(path)
        self.assertEqual(lexicon.counts(["red", "above", "cyst", "x"]), (1, 1, 1))

    def test_tokenize_keeps_hyphens(self):
        self.assertEqual(tokenize("A Four-Chamber view, located!"), ["a", "four-chamber", "view", "located"])


class TestPromptGeneration(unittest.TestCase):
    """Prompt tiers and the vocabulary"""

    def setUp(self):
        self.attributes = PromptAttributes(size="large", color="red", position=(1, 1))

    def test_tier_patterns(self):
        self.assertEqual(generate_prompt("basic", 1, attributes=self.attributes).sentence, "polyp")
        self.assertEqual(generate_prompt("visual", 1, attributes=self.attributes).sentence, "large red round polyp")
        self.assertEqual(generate_prompt("spatial", 1, attributes=self.attributes).sentence,
                         "polyp located in center")
        self.assertEqual(generate_prompt("medical", 1, attributes=self.attributes).sentence,
                         "polyp which is a small lump in colon")

    def test_comprehensive_and_leave_one_out(self):
        full = generate_prompt("comprehensive", 1, attributes=self.attributes)
        self.assertEqual(full.sentence, "large red round polyp which is a small lump in colon located in center")
        self.assertEqual(without_category("medical", 1, self.attributes).sentence,
                         "large red round polyp located in center")
        self.assertEqual(without_category("spatial", 1, self.attributes).sentence,
                         "large red round polyp which is a small lump in colon")
        self.assertEqual(category_phrases(1, self.attributes)["visual"], "large red round")
        with self.assertRaises(InputError):
            without_category("texture", 1, self.attributes)

    def test_position_phrases(self):
        self.assertEqual(position_phrase((0, 0)), "top left")
        self.assertEqual(position_phrase((2, 1)), "bottom center")

    def test_adaptive_tier_resolves(self):
        self.assertEqual(resolve_tier(ADAPTIVE_TIER, 1), "visual")
        self.assertEqual(resolve_tier(ADAPTIVE_TIER, 4), "medical")
        self.assertEqual(generate_prompt(ADAPTIVE_TIER, 3, attributes=self.attributes).tier, "spatial")

    def test_unknown_task_and_tier(self):
        with self.assertRaises(InputError):
            generate_prompt("basic", 9)
        with self.assertRaises(InputError):
            generate_prompt("verbose", 1)

    def test_vocabulary_covers_every_prompt(self):
        vocab = Vocabulary.default()
        rng = np.random.default_rng(0)
        for task_id in range(1, 6):
            for tier in TIERS:
                ids = vocab.encode(generate_prompt(tier, task_id, rng=rng).text)
                self.assertNotIn(1, ids)
        self.assertEqual(vocab.encode(["never-seen"]), [1])
        vocab.check_fits(ModelConfig().vocab_size)

    def test_vocabulary_too_large_for_model(self):
        with self.assertRaises(ConfigError):
            Vocabulary.default().check_fits(10)


if __name__ == "__main__":
    unittest.main()
