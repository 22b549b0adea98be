import pytest

from srstack import dataset as ds
from srstack import scene as sc
from srstack import stack as st


def tiny_dataset_config(**kw):
    base = dict(
        n_examples=6,
        master_seed=7,
        scene=sc.SceneConfig(extent_m=120.0, count_range=(1, 8)),
        stack=st.StackSimConfig(),
        stored_frames=8,
        raw_frames=12,
    )
    base.update(kw)
    return ds.DatasetConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinyset")
    ds.write_dataset(out, tiny_dataset_config())
    return ds.load_dataset(out)
