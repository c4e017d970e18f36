"""Single-source domain generalisation: ConDiSR (contrastive disentanglement with style
reconstruction) and its ERM baselines, plus a synthetic multi-domain benchmark."""

from .config import Config, ConfigError, load, load_preset, load_text
from .engine import METHODS, ResultsTable, RunRecord, run_protocol, train_one_source
from .model import NetworkConfig, SDGNet, register_plugin

__version__ = "0.1.0"

__all__ = [
    "Config", "ConfigError", "load", "load_preset", "load_text",
    "METHODS", "ResultsTable", "RunRecord", "run_protocol", "train_one_source",
    "NetworkConfig", "SDGNet", "register_plugin",
]
