"""bitnas: differentiable architecture search, training and complexity
analysis for 1-bit (XNOR/popcount) convolutional networks on CPU."""

from .genotype import Genotype, derive, deserialize, serialize
from .netbuild import NetworkSpec, build_network, count_flops
from .search import SearchConfig, run_search
from .space import LayerType, SEARCH_SPACE, build_supernet
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "Genotype", "LayerType", "NetworkSpec", "SEARCH_SPACE", "SearchConfig",
    "TrainConfig", "build_network", "build_supernet", "count_flops", "derive",
    "deserialize", "evaluate", "run_search", "serialize", "train",
]
