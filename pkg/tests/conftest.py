"""Shared fixtures: the default toy world and a converged S2ST model."""

from types import SimpleNamespace

import numpy as np
import pytest

import tinys2st.tensor as T
from tinys2st import datagen as dg
from tinys2st import models as M
from tinys2st.optim import Adam, inverse_sqrt_lr


@pytest.fixture(scope="session")
def world():
    return dg.build_world(dg.WorldConfig(), seed=0)


@pytest.fixture(scope="session")
def data(world):
    return dg.build_datasets(world, seed=0)


@pytest.fixture(scope="session")
def trained_s2st():
    """An S2ST model trained to convergence on one high-resource pair.

    Uses a wider corpus than the default world so the held-out translation
    quality has real headroom (toy BLEU in the 70s, not scraping 60).
    Training takes about 90 seconds, so the run is shared per session;
    treat the model as read-only.
    """
    cfg = dg.WorldConfig(high_size=480)
    world = dg.build_world(cfg, seed=0)
    data = dg.build_datasets(world, seed=0)
    lang = world.languages[0].name
    pool = data.s2st[lang]["train"]
    model = M.S2stModel(M.PRESETS["base"], cfg.mel_bins, world.phoneme_vocab,
                        seed=0, dropout=0.1, dec_dropout=0.3)
    opt = Adam(model.named_parameters())
    rng = dg.rng_for(0, 9, 0)
    for step in range(1, 4001):
        idx = rng.integers(0, len(pool), size=8)
        opt.zero_grad()
        bundle = model.step_loss([pool[i] for i in idx], rng)
        T.backward(bundle.total)
        opt.step(inverse_sqrt_lr(step, 3e-3, 100))
    model.eval()
    return SimpleNamespace(model=model, world=world, data=data, lang=lang)
