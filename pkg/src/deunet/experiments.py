"""Desk-scale experiment presets shared by scripts, the CLI defaults and the acceptance tests."""
from .network import NetConfig
from .phantom import PhantomSpec, generate_phantom
from .training import TrainConfig

DESK_PHANTOM = PhantomSpec(size=64, n_clips=50, clips_per_subject=5)
DESK_NET = NetConfig(r=1, S=3, tdam_channels=8, offset_depth=2, offset_base_channels=8, depth=2, base_channels=8)


def desk_train_config(seed=0, **overrides):
    # CPU-sized protocol: smaller batches and a larger step than the GPU setting
    kw = dict(lr=2e-3, weight_decay=1e-4, batch_size=4, patience_epochs=20, max_epochs=60, folds=5, fold=0,
              seed=seed)
    kw.update(overrides)
    return TrainConfig(**kw)


def desk_phantom(seed=0, spec=DESK_PHANTOM):
    return generate_phantom(spec, seed=seed)
