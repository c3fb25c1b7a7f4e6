"""Long/short-term traffic forecasting with a masked-pretrained subseries encoder."""

from .data import (
    DataLayout,
    Normalizer,
    TrafficGraph,
    TrafficSeries,
    WindowSample,
    fit_normalizer,
    load_graph,
    load_series,
    make_windows,
    periodic_indices,
    sample_mask,
    split_dataset,
    split_subseries,
    synth_generate,
    transition_matrices,
)
from .model import LSTTN

__version__ = "0.1.0"
