"""Shared fixtures.

The expensive session artifacts (trained victims, long crafting runs)
are cached on disk keyed by their configuration so repeated local runs
are fast; everything is deterministic, so cache hits equal fresh
computation. Set GDUAP_TEST_CACHE=0 to force recomputation.
"""
import os
import pickle
from pathlib import Path

import numpy as np
import pytest

from gduap.crafting import CraftConfig, craft, random_baseline
from gduap.datasets import make_desk10, make_deskblob, make_deskseg
from gduap.priors import (build_data_prior, build_none_prior,
                          build_range_prior)
from gduap.training import VictimSpec, train_victim
from gduap.adapter import load_weights

CACHE_VERSION = "v4"  # bump when generators/architectures change


def _cache_dir():
    if os.environ.get("GDUAP_TEST_CACHE", "1") == "0":
        return None
    d = Path(os.environ.get("GDUAP_TEST_CACHE_DIR",
                            "/tmp/gduap_test_cache")) / CACHE_VERSION
    d.mkdir(parents=True, exist_ok=True)
    return d


@pytest.fixture(scope="session")
def desk_train():
    return make_desk10(2000, 0)


@pytest.fixture(scope="session")
def desk_test():
    return make_desk10(400, 1)


@pytest.fixture(scope="session")
def substitute_images():
    return make_deskblob(200, 5).images


@pytest.fixture(scope="session")
def seg_corpus():
    return make_deskseg(120, 7)


def _victim(arch, seed, train, model_id, epochs):
    cache = _cache_dir()
    path = cache / f"{model_id}.uapw" if cache else None
    if path and path.exists():
        return load_weights(path)
    adapter = train_victim(VictimSpec(arch, 10, "desk10", seed=seed), train,
                           epochs=epochs, model_id=model_id)
    if path:
        adapter.save(path)
    return adapter


@pytest.fixture(scope="session")
def victim_a(desk_train):
    return _victim("small_conv_a", 0, desk_train, "victim_a", 6)


@pytest.fixture(scope="session")
def victim_b(desk_train):
    return _victim("small_conv_b", 1, desk_train, "victim_b", 8)


def _craft_cached(tag, adapter, config, prior, substitute):
    cache = _cache_dir()
    path = cache / f"craft_{tag}.pkl" if cache else None
    if path and path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    result = craft(adapter, config, prior, substitute)
    if path:
        with open(path, "wb") as fh:
            pickle.dump(result, fh)
    return result


@pytest.fixture(scope="session")
def craft_none(victim_a, substitute_images):
    config = CraftConfig(prior_mode="none", max_iterations=10000, seed=0)
    prior = build_none_prior(victim_a.input_shape)
    return _craft_cached("none", victim_a, config, prior, substitute_images)


@pytest.fixture(scope="session")
def craft_range(victim_a, desk_train, substitute_images):
    # patience disabled: this run doubles as the full-length norm-safety
    # and correlation-trace subject
    config = CraftConfig(prior_mode="range", max_iterations=10000, seed=0,
                         patience_H=10000)
    mean = desk_train.images.mean(axis=(0, 1, 2))
    prior = build_range_prior(mean, victim_a.input_shape, 0)
    return _craft_cached("range", victim_a, config, prior, substitute_images)


@pytest.fixture(scope="session")
def craft_data(victim_a, desk_train, substitute_images):
    # patience disabled to give every prior the same optimization budget
    # in the ordering comparison
    config = CraftConfig(prior_mode="data", max_iterations=10000, seed=0,
                         patience_H=10000)
    prior = build_data_prior(desk_train, victim_a.input_shape)
    return _craft_cached("data", victim_a, config, prior, substitute_images)


@pytest.fixture(scope="session")
def baseline_perturbation(victim_a):
    return random_baseline(victim_a.input_shape, 10.0, 0)


@pytest.fixture(scope="session")
def clean_test_labels(victim_a, desk_test):
    return victim_a.forward(desk_test.images)
