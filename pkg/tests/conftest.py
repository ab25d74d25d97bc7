import os
import pathlib

import numpy as np
import pytest
import yaml

from healsim.config import ExperimentConfig, _deep_merge
from healsim.datasets import generate_synthetic
from healsim.models import ModelParams, ModelSpec

SPAMBASE_FILE = 'spambase.data'

TINY = {
    'name': 'tiny',
    'n_nodes': 10,
    'cycles': 5,
    'repetitions': 1,
    'diameter_every': 0,
    'overlay_warmup': 5,
    'topology': {'degree': 4, 'cache_size': 6},
    'h': 2,
    'dataset': {'n_samples': 300, 'n_features': 6, 'n_classes': 2, 'separation': 4.0},
}


@pytest.fixture
def blobs():
    return generate_synthetic(200, 5, 2, 4.0, seed=1)


@pytest.fixture
def multiclass_blobs():
    return generate_synthetic(300, 8, 4, 5.0, seed=2)


@pytest.fixture
def make_config():
    def factory(**overrides) -> ExperimentConfig:
        return ExperimentConfig.from_dict(_deep_merge(TINY, overrides)).validate()
    return factory


@pytest.fixture
def write_config(tmp_path):
    def factory(experiments: dict, name: str = 'experiments.yaml') -> pathlib.Path:
        path = tmp_path / name
        document = {'defaults': TINY, 'experiments': experiments}
        path.write_text(yaml.safe_dump(document), encoding='utf-8')
        return path
    return factory


@pytest.fixture
def random_params():
    def factory(spec: ModelSpec, rng: np.random.Generator, scale: float = 1.0) -> ModelParams:
        return ModelParams(spec, rng.uniform(-scale, scale, size=spec.param_count))
    return factory


@pytest.fixture
def spambase_path() -> pathlib.Path:
    data_dir = os.environ.get('HEALSIM_DATA_DIR')
    if not data_dir or not (pathlib.Path(data_dir) / SPAMBASE_FILE).exists():
        pytest.skip(f'{SPAMBASE_FILE} not found under HEALSIM_DATA_DIR')
    return pathlib.Path(data_dir) / SPAMBASE_FILE
