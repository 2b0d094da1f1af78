"""Shared fixtures: datasets and trained artifacts reused across the suite.

Everything is session-scoped and deterministic; training budgets are sized for a
single CPU core. Two profiles exist:

* desk  — the default configuration (32x32 frames, K=256, width-128 decoder),
* smoke — a reduced configuration (16x16 frames, K=16, width-64 decoder, lattice
  spawn positions) used by the trained-direction acceptance criteria so the suite
  stays fast.
"""

import numpy as np
import pytest

from movla import world as w
from movla.acttok import ActTokConfig, dataset_chunks, train_action_tokenizer
from movla.lme import LatentMotionExtractor, LmeConfig, dataset_clips, train_lme
from movla.vq import VqConfig, dataset_frames, train_vq

DESK_WORLD = w.WorldConfig()
DESK_FAMILY = w.TaskFamily()
SMOKE_WORLD = w.WorldConfig(frame_hw=16, pickup_radius=0.13, goal_radius=0.18, gripper_radius=0.09)
SMOKE_FAMILY = w.TaskFamily(lattice=5)
CHUNKING = w.ChunkingConfig(l_a=4, n_chunks=2)
SMOKE_VQ_CONFIG = VqConfig(image_hw=16, codebook_size=16, d_code=24, channels=(24, 48), steps=700)
SMOKE_LME_CONFIG = LmeConfig(
    frame_hw=16, steps=1000, enc_channels=(24, 48), motion_channels=24, d_dec=24,
    dec_channels=(32, 24),
)


@pytest.fixture(scope="session")
def artifact_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("artifacts")


@pytest.fixture(scope="session")
def desk_dataset(artifact_dir):
    out = artifact_dir / "desk_data"
    w.generate_dataset(DESK_FAMILY, count=120, seed=100, out_dir=out, cfg=DESK_WORLD,
                       min_window=CHUNKING.window)
    return w.Dataset(out)


@pytest.fixture(scope="session")
def lme_train_dataset(artifact_dir):
    """Cluttered desk scenes: richer static content for the extractor's training."""
    out = artifact_dir / "lme_data"
    fam = w.TaskFamily(n_objects=4)
    w.generate_dataset(fam, count=160, seed=150, out_dir=out, cfg=DESK_WORLD,
                       min_window=CHUNKING.window)
    return w.Dataset(out)


@pytest.fixture(scope="session")
def push_dataset(artifact_dir):
    """Two scripted motion archetypes (push left vs push right) for clustering."""
    out = artifact_dir / "push_data"
    fam = w.TaskFamily(kinds=("push",), directions=("left", "right"))
    w.generate_dataset(fam, count=60, seed=200, out_dir=out, cfg=DESK_WORLD,
                       min_window=CHUNKING.window)
    return w.Dataset(out)


@pytest.fixture(scope="session")
def smoke_dataset(artifact_dir):
    out = artifact_dir / "smoke_data"
    w.generate_dataset(SMOKE_FAMILY, count=500, seed=300, out_dir=out, cfg=SMOKE_WORLD,
                       min_window=CHUNKING.window)
    return w.Dataset(out)


@pytest.fixture(scope="session")
def desk_vq(desk_dataset, artifact_dir):
    frames = dataset_frames(desk_dataset, limit=1400)
    model, _ = train_vq(frames[:-100], VqConfig(steps=900))
    path = artifact_dir / "desk_vq.mvc"
    model.save(path)
    model.heldout_frames = frames[-100:]
    model.train_frames = frames[:-100]
    model.path = path
    return model


@pytest.fixture(scope="session")
def smoke_vq(smoke_dataset, artifact_dir):
    frames = dataset_frames(smoke_dataset, limit=2000)
    model, _ = train_vq(frames, SMOKE_VQ_CONFIG)
    path = artifact_dir / "smoke_vq.mvc"
    model.save(path)
    model.path = path
    return model


@pytest.fixture(scope="session")
def desk_acttok(desk_dataset, artifact_dir):
    chunks = dataset_chunks(desk_dataset, CHUNKING)
    tok = train_action_tokenizer(chunks, ActTokConfig(l_a=CHUNKING.l_a))
    path = artifact_dir / "desk_acttok.mvc"
    tok.save(path)
    tok.path = path
    return tok


@pytest.fixture(scope="session")
def smoke_acttok(smoke_dataset, artifact_dir):
    chunks = dataset_chunks(smoke_dataset, CHUNKING)
    tok = train_action_tokenizer(chunks, ActTokConfig(l_a=CHUNKING.l_a))
    path = artifact_dir / "smoke_acttok.mvc"
    tok.save(path)
    tok.path = path
    return tok


@pytest.fixture(scope="session")
def desk_lme(lme_train_dataset, artifact_dir):
    clips = dataset_clips(lme_train_dataset, window=CHUNKING.window, f=8)
    model, history = train_lme(clips, LmeConfig(steps=2500))
    path = artifact_dir / "desk_lme.mvc"
    model.save(path)
    model.path = path
    model.history = history
    return model


@pytest.fixture(scope="session")
def smoke_lme(smoke_dataset, artifact_dir):
    clips = dataset_clips(smoke_dataset, window=CHUNKING.window, f=8, limit=3000)
    model, _ = train_lme(clips, SMOKE_LME_CONFIG)
    path = artifact_dir / "smoke_lme.mvc"
    model.save(path)
    model.path = path
    return model


@pytest.fixture(scope="session")
def micro_world(artifact_dir):
    """A 40-episode bundle (dataset + quickly trained artifacts) for structural tests."""
    from movla.acttok import ActionTokenizer

    out = artifact_dir / "micro_data"
    w.generate_dataset(SMOKE_FAMILY, count=40, seed=900, out_dir=out, cfg=SMOKE_WORLD,
                       min_window=CHUNKING.window)
    ds = w.Dataset(out)
    frames = dataset_frames(ds, limit=500)
    vq_cfg = VqConfig(image_hw=16, codebook_size=16, d_code=16, channels=(16, 32), steps=200)
    vq, _ = train_vq(frames, vq_cfg)
    vq_path = artifact_dir / "micro_vq.mvc"
    vq.save(vq_path)
    tok = train_action_tokenizer(dataset_chunks(ds, CHUNKING), ActTokConfig(l_a=CHUNKING.l_a))
    tok_path = artifact_dir / "micro_acttok.mvc"
    tok.save(tok_path)
    lme_cfg = LmeConfig(frame_hw=16, steps=150, enc_channels=(16, 32), motion_channels=16,
                        d_dec=16, dec_channels=(16, 16), val_interval=50)
    clips = dataset_clips(ds, window=CHUNKING.window, f=8, limit=400)
    lme, _ = train_lme(clips, lme_cfg)
    lme_path = artifact_dir / "micro_lme.mvc"
    lme.save(lme_path)
    return {
        "dataset": ds,
        "dataset_dir": out,
        "vq": vq,
        "vq_path": vq_path,
        "acttok": tok,
        "acttok_path": tok_path,
        "lme": lme,
        "lme_path": lme_path,
    }
