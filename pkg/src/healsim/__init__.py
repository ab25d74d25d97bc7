"""healsim

By deuxglaces
"""

from .config import ExperimentConfig, FaultEvent, FaultSchedule, load_experiment_file
from .datasets import Dataset, DataShard, generate_synthetic, load_csv, partition_iid
from .engine import MessageBus, RunResult, cycles_to_accuracy, run_experiment
from .exceptions import (HealsimException, HealsimConfigError, HealsimShapeError, HealsimPreconditionError,
                         HealsimParseError, HealsimOutputError)
from .models import Hyperparams, ModelParams, ModelSpec, average_models, evaluate, train_step
from .overlay import ElevatorOverlay, StaticOverlay, detect_hubs, graph_diameter
from .protocols import (EpidemicProtocol, FedAvgProtocol, GaiaProtocol, GossipProtocol, HealProtocol,
                        LearningProtocol)

__version__ = '0.1.0'
