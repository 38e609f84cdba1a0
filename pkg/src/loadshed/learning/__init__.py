"""Per-bus datasets, networks and training for the decentralised shedding rules."""

from .dataset import BusDataset, LabeledSample, generate_dataset, learning_buses
from .features import FeatureLayout, extract_features
from .mlp import MLP, gradient_check
from .train import BusModel, Hyper, predict, train_bus_model, train_classifier

__all__ = [
    "BusDataset", "BusModel", "FeatureLayout", "Hyper", "LabeledSample", "MLP",
    "extract_features", "generate_dataset", "gradient_check", "learning_buses", "predict",
    "train_bus_model", "train_classifier",
]
