import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fusegraph.executor import run  # noqa: E402
from fusegraph.recipes import ModelRecipe, generate, relative_positional_table  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def only_output(graph, feeds, workers=1):
    outputs, _ = run(graph, feeds, workers)
    (value,) = outputs.values()
    return value


def encoder_feeds(recipe, length, rng):
    feeds = {"feats": rng.standard_normal((length, recipe.d_model)).astype(np.float32)}
    if recipe.architecture == "conformer_encoder":
        feeds["pos_emb"] = relative_positional_table(length, recipe.d_model)
    return feeds


def build(architecture, **kw):
    recipe = ModelRecipe(architecture=architecture, **kw)
    return recipe, generate(recipe)
