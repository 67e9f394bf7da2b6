import numpy as np
import pytest

from voxelseg.network import DropoutSpec, NetworkConfig, NodeSpec


class ConstantRng:
    """Stand-in generator whose uniform draws are a fixed value.

    Used to force dropout masks: value 0.0 drops everything (0 < p), a value
    close to 1 keeps everything.
    """

    def __init__(self, value):
        self.value = float(value)

    def random(self, size=None):
        if size is None:
            return self.value
        return np.full(size, self.value)


def chain_config(
    features=2,
    kernel=(1, 1, 3),
    kind="residual",
    dropout_block=None,
    dropout=None,
    name="tiny-chain",
):
    """Six tiny blocks in a row; aux heads on every block, head after a 1x1x1 mixer."""
    nodes = [
        NodeSpec(
            id="stem", op="conv", inputs=["input"], features=features,
            kernel=(1, 1, 1), preact=False,
        )
    ]
    prev = "stem"
    for i in range(1, 7):
        nid = f"b{i}"
        spec = NodeSpec(
            id=nid, op="block", inputs=[prev], kind=kind,
            features=features, kernel=tuple(kernel),
        )
        if dropout_block == nid:
            spec.dropout = dropout
        nodes.append(spec)
        prev = nid
    nodes.append(
        NodeSpec(
            id="prehead", op="conv", inputs=[prev], features=features,
            kernel=(1, 1, 1), preact=True,
        )
    )
    return NetworkConfig(
        name=name,
        in_features=1,
        nodes=nodes,
        final_head="prehead",
        aux_heads=[f"b{i}" for i in range(1, 7)],
    )


def downsample_config(features=2):
    """Small strided encoder-decoder exercising every node kind."""
    nodes = [
        NodeSpec(id="stem", op="conv", inputs=["input"], features=features,
                 kernel=(1, 3, 3), preact=False),
        NodeSpec(id="down", op="conv", inputs=["stem"], features=2 * features,
                 kernel=(1, 3, 3), stride=(1, 2, 2), preact=True),
        NodeSpec(id="b1", op="block", inputs=["down"], kind="residual",
                 features=2 * features, kernel=(1, 3, 3)),
        NodeSpec(id="b2", op="block", inputs=["b1"], kind="residual",
                 features=2 * features, kernel=(1, 3, 3)),
        NodeSpec(id="b3", op="block", inputs=["b2"], kind="residual",
                 features=2 * features, kernel=(1, 1, 3)),
        NodeSpec(id="up", op="upsample", inputs=["b3"], factors=(1, 2, 2)),
        NodeSpec(id="cat", op="concat", inputs=["stem", "up"]),
        NodeSpec(id="merge", op="conv", inputs=["cat"], features=features,
                 kernel=(1, 1, 1), preact=True),
        NodeSpec(id="b4", op="block", inputs=["merge"], kind="residual",
                 features=features, kernel=(1, 3, 3)),
        NodeSpec(id="b5", op="block", inputs=["b4"], kind="residual",
                 features=features, kernel=(1, 3, 3)),
        NodeSpec(id="b6", op="block", inputs=["b5"], kind="residual",
                 features=features, kernel=(1, 1, 3)),
        NodeSpec(id="prehead", op="conv", inputs=["b6"], features=features,
                 kernel=(1, 1, 1), preact=True),
    ]
    return NetworkConfig(
        name="tiny-unet",
        in_features=1,
        nodes=nodes,
        final_head="prehead",
        aux_heads=["b1", "b2", "b3", "b4", "b5", "b6"],
    )


@pytest.fixture
def tiny_chain_cfg():
    return chain_config()


@pytest.fixture
def tiny_unet_cfg():
    return downsample_config()


def reference_config():
    from importlib import resources

    from voxelseg.network import NetworkConfig

    path = resources.files("voxelseg") / "configs" / "reference.json"
    return NetworkConfig.from_json(str(path))


def benchmark_config():
    from importlib import resources

    from voxelseg.network import NetworkConfig

    path = resources.files("voxelseg") / "configs" / "benchmark.json"
    return NetworkConfig.from_json(str(path))
