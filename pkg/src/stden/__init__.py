"""Physics-guided traffic forecasting on road networks.

Edge-flow histories are encoded into a latent potential field over nodes,
the field is evolved by a graph ODE, and future flows are decoded as
potential differences along edges.
"""

from .baselines import HistoricalAverage, build_model
from .data import (
    SynthConfig,
    load_csv,
    random_network,
    save_csv,
    simulate,
    window_and_split,
)
from .graph import (
    EdgeField,
    NodeField,
    RoadNetwork,
    divergence,
    gradient,
    laplacian_apply,
    load_network,
    save_network,
)
from .model import (
    Model,
    ModelConfig,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .odeint import SolverConfig, integrate
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "EdgeField",
    "HistoricalAverage",
    "Model",
    "ModelConfig",
    "NodeField",
    "RoadNetwork",
    "SolverConfig",
    "SynthConfig",
    "TrainConfig",
    "build_model",
    "divergence",
    "evaluate",
    "gradient",
    "integrate",
    "laplacian_apply",
    "load_checkpoint",
    "load_csv",
    "load_network",
    "model_from_checkpoint",
    "random_network",
    "save_checkpoint",
    "save_csv",
    "save_network",
    "simulate",
    "train",
    "window_and_split",
    "__version__",
]
