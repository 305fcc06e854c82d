"""Social recommendation with a causal Transformer and a graph attention network."""

from .config import RunConfig, load_config
from .data import EventLog, SocialGraph, build_graph, load_events
from .model import SocialTrans
from .training import load_checkpoint, train

__all__ = ["EventLog", "RunConfig", "SocialGraph", "SocialTrans", "build_graph", "load_checkpoint",
           "load_config", "load_events", "train"]
__version__ = "0.1.0"
