import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from eventgen.backbone import Backbone, BackboneConfig
from eventgen.schedule import build_schedule
from eventgen.switching import EntitySpec
from eventgen import toydata


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(1000, 1e-4, 0.02, 50)


@pytest.fixture(scope="session")
def backbone():
    """Random-weight backbone: all parameters (including normally zero-initialized
    output projections) filled from a seeded generator so every pathway is live."""
    bb = Backbone(BackboneConfig(), init_seed=0)
    bb.randomize_weights(seed=1, scale=0.08)
    return bb


@pytest.fixture(scope="session")
def reference_scene():
    """Deterministic 2-entity reference: image, masks, color ids."""
    rng = np.random.default_rng(7)
    image, masks, color_ids = toydata.render_reference(0, 16, rng)
    return image, masks, color_ids


@pytest.fixture(scope="session")
def reference_image(reference_scene):
    return reference_scene[0]


@pytest.fixture(scope="session")
def entities(reference_scene):
    _, masks, _ = reference_scene
    return [EntitySpec(i + 1, (i + 1, i + 1), m) for i, m in enumerate(masks)]


@pytest.fixture(scope="session")
def prompt_tokens(reference_scene):
    return toydata.prompt_for_colors(reference_scene[2])
