from __future__ import annotations

import pytest

from storypipe.composer import find_encoder
from storypipe.config import build_config
from storypipe.schema import StorySetting

SMALL = {
    "image_width": 64,
    "image_height": 64,
    "sound_duration_s": 1.5,
    "music_duration_s": 2.0,
    "video": {"width": 64, "height": 64, "fps": 12},
    "render": False,
}


def small_config(**overrides):
    data = {**SMALL, **overrides}
    return build_config(data)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def setting():
    return StorySetting(topic="a rainy day in the garden", topic_type="environments", num_pages=3,
                        requirements=("Use simple words.",))


@pytest.fixture(scope="session")
def encoder():
    binary = find_encoder()
    if binary is None:
        pytest.skip("no media encoder installed")
    return binary
