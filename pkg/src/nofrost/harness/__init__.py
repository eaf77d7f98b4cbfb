from .config import (ConfigError, EvalConfig, ExperimentConfig, ManifestError,
                     RunManifest, config_from_dict, config_hash, config_to_dict,
                     from_yaml, load_config, load_manifest, save_manifest, to_yaml)
from .data import (DATASETS, DataSplit, DatasetBundle, DatasetUnavailableError,
                   load_dataset, make_moons_images, stratified_subset)
from .run import LockError, RunLock, run, run_matrix, sweep_to_csv

__all__ = [
    "ConfigError", "EvalConfig", "ExperimentConfig", "ManifestError",
    "RunManifest", "config_from_dict", "config_hash", "config_to_dict",
    "from_yaml", "load_config", "load_manifest", "save_manifest", "to_yaml",
    "DATASETS", "DataSplit", "DatasetBundle", "DatasetUnavailableError",
    "load_dataset", "make_moons_images", "stratified_subset",
    "LockError", "RunLock", "run", "run_matrix", "sweep_to_csv",
]
