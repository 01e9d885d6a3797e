"""Minimal dataflow ML engine: graphs, sessions, input pipeline, file formats."""

from .formats import (
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    export_frozen,
    graph_from_bytes,
    graph_to_bytes,
    import_frozen,
    load_checkpoint,
    save_checkpoint,
)
from .graph import OP_KINDS, Graph, Node
from .model import INTERFACE, build_cifar_model, dense_parameter_count
from .pipeline import (
    FifoQueue,
    RecordSource,
    augment,
    augment_with,
    central_crop,
    decode_records,
    encode_records,
    one_hot,
    synthetic_cifar,
)
from .session import Session

__all__ = [
    "OP_KINDS", "Graph", "Node", "Session", "FifoQueue", "RecordSource", "INTERFACE",
    "build_cifar_model", "dense_parameter_count", "augment", "augment_with", "central_crop",
    "decode_records", "encode_records", "one_hot", "synthetic_cifar",
    "export_frozen", "import_frozen", "graph_to_bytes", "graph_from_bytes",
    "save_checkpoint", "load_checkpoint", "checkpoint_to_bytes", "checkpoint_from_bytes",
]
