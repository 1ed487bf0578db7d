import numpy as np
import pytest

from dinp.checkpoint import load_checkpoint
from dinp.diffusion import make_schedule
from dinp.engine import InpaintEngine
from dinp.phantom import PhantomSpec, generate_dataset, save_split, split_dataset
from dinp.training import SliceDataset, TrainConfig, fit
from dinp.unet import UNetConfig

TINY_UNET = UNetConfig(
    base_width=8, channel_mults=(1, 2), res_blocks=1, attention_levels=(1,),
    time_width=16, code_width=4, cond_width=32, image_size=32,
)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Small saved phantom corpus (32x32) with a split, shared across tests."""
    root = tmp_path_factory.mktemp("tinydata")
    spec = PhantomSpec(image_size=32, tumor_probability=0.8, seed=100)
    records = generate_dataset(spec, root, n_studies=8, slices_per_study=7)
    assignment = split_dataset(records, seed=0)
    save_split(root, assignment)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return SliceDataset.from_directory(tiny_dataset_dir)


@pytest.fixture(scope="session")
def tiny_schedule():
    return make_schedule("cosine", 20)


@pytest.fixture()
def tiny_unet_config():
    return TINY_UNET


@pytest.fixture(scope="session")
def tiny_checkpoint_path(tiny_dataset, tiny_schedule, tmp_path_factory):
    """A briefly trained tiny model; enough for the guidance/sweep mechanics
    without being a quality claim."""
    out = tmp_path_factory.mktemp("tinyrun")
    cfg = TrainConfig(total_steps=80, batch_size=4, val_samples=8, validate_every=80,
                      checkpoint_every=0, log_every=40, seed=3)
    result = fit(cfg, TINY_UNET, tiny_schedule, tiny_dataset, out, log=lambda *_: None)
    return result.checkpoint_paths[-1]


@pytest.fixture(scope="session")
def tiny_engine(tiny_checkpoint_path):
    return InpaintEngine(load_checkpoint(tiny_checkpoint_path), ref=tiny_checkpoint_path.stem)


@pytest.fixture(scope="session")
def acceptance():
    """The desk-scale reference run: dataset, checkpoint, engine. Trains on
    first use (cached under .cache/acceptance afterwards)."""
    from types import SimpleNamespace

    import acceptance_support as acc

    acc.ensure_run()
    cfg = acc.acceptance_config()
    ckpt = load_checkpoint(acc.FINAL_CKPT)
    dataset = SliceDataset.from_directory(acc.DATA_DIR)
    engine = InpaintEngine(ckpt, ref="acceptance-final")
    return SimpleNamespace(
        cfg=cfg, ckpt=ckpt, dataset=dataset, engine=engine,
        data_dir=acc.DATA_DIR, run_dir=acc.RUN_DIR, final_ckpt=acc.FINAL_CKPT,
    )
