"""Reconstruct GTFS transit feeds from raw bus GPS traces.

The pipeline: ingest and clean tracker CSVs, window them into training
blocks, train a from-scratch LSTM to predict positions and stops, infer
stops/trips/routes from the traces, and export a validated GTFS archive.
A fleet simulator provides ground truth for every stage.
"""

__version__ = "0.1.0"

__all__ = [
    "cli",
    "config",
    "domain",
    "geo",
    "gtfs",
    "ingest",
    "neuralnet",
    "predictor",
    "simulator",
    "transitgraph",
]
