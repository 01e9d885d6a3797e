"""The small Cifar-10 convolutional network and its input pipeline nodes."""

from __future__ import annotations

from .graph import Graph
from .pipeline import NUM_CLASSES, QUEUE_CAPACITY

CROP = 24
CONV_WIDTH = 64
DENSE = (384, 192)
INTERFACE = ("input", "labels", "logits", "loss", "train_op", "enqueue", "dequeue")


def _variable(g: Graph, name: str, shape: list[int], init: str, stddev: float) -> str:
    if init == "zeros":
        return g.add(name, "variable", shape=shape, init="zeros")
    return g.add(name, "variable", shape=shape, init="truncated_normal", stddev=stddev)


def _dense(g: Graph, name: str, x: str, n_in: int, n_out: int, init: str, stddev: float,
           relu: bool = True, out_name: str | None = None) -> str:
    w = _variable(g, f"{name}/weights", [n_in, n_out], init, stddev)
    b = g.add(f"{name}/biases", "variable", shape=[n_out], init="zeros")
    mm = g.add(f"{name}/matmul", "matmul", [x, w])
    pre = g.add(out_name or f"{name}/preact", "add", [mm, b])
    return g.add(f"{name}/relu", "relu", [pre]) if relu else pre


def _conv(g: Graph, name: str, x: str, c_in: int, init: str, stddev: float) -> str:
    k = _variable(g, f"{name}/weights", [5, 5, c_in, CONV_WIDTH], init, stddev)
    b = g.add(f"{name}/biases", "variable", shape=[CONV_WIDTH], init="zeros")
    c = g.add(f"{name}/conv", "conv2d", [x, k])
    pre = g.add(f"{name}/preact", "add", [c, b])
    r = g.add(f"{name}/relu", "relu", [pre])
    return g.add(f"{name}/pool", "maxpool2x2", [r])


def build_cifar_model(lr: float = 0.1, batch: int = 128, init: str = "truncated_normal",
                      stddev: float = 0.05, seed: int = 0) -> Graph:
    """conv-pool, conv-pool, dense 384, dense 192, dense 10, softmax.

    ``init="zeros"`` zero-initializes every weight (useful for checks).
    ``batch`` sets how many samples ``dequeue`` returns.
    """
    g = Graph(seed=seed)
    x = g.add("input", "placeholder", shape=[None, CROP, CROP, 3])
    g.add("labels", "placeholder", shape=[None, NUM_CLASSES])
    h = _conv(g, "conv1", x, 3, init, stddev)
    h = _conv(g, "conv2", h, CONV_WIDTH, init, stddev)
    flat = CONV_WIDTH * (CROP // 4) ** 2
    h = g.add("flatten", "reshape", [h], shape=[-1, flat])
    h = _dense(g, "fc1", h, flat, DENSE[0], init, stddev)
    h = _dense(g, "fc2", h, DENSE[0], DENSE[1], init, stddev)
    logits = _dense(g, "fc3", h, DENSE[1], NUM_CLASSES, init, stddev, relu=False, out_name="logits")
    g.add("probs", "softmax", [logits])
    loss = g.add("loss", "softmax_xent_loss", [logits, "labels"])
    g.add("train_op", "sgd_apply", [loss], lr=lr)

    # input pipeline: reader -> augmentation -> queue
    g.add("reader", "record_reader")
    a = g.add("crop", "crop", ["reader:1"], size=CROP)
    a = g.add("flip", "flip", [a])
    a = g.add("brightness", "brightness", [a], max_delta=0.25)
    a = g.add("saturation", "saturation", [a], lower=0.6, upper=1.4)
    g.add("queue", "fifo_queue", role="queue", capacity=QUEUE_CAPACITY)
    g.add("enqueue", "fifo_queue", [a, "reader:0"], role="enqueue", queue="queue")
    g.add("dequeue", "fifo_queue", role="dequeue", queue="queue", batch=batch)
    return g.finalize()


def dense_parameter_count() -> int:
    flat = CONV_WIDTH * (CROP // 4) ** 2
    dims = (flat, *DENSE, NUM_CLASSES)
    return sum(a * b + b for a, b in zip(dims, dims[1:]))
