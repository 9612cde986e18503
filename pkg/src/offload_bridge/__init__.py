"""Offload dense matrices to a driver+worker compute server and run routines on them."""

from .client import BridgeContext, CondEst, LocalRowPartition, MathLib
from .config import BridgeConfig, load_config
from .errors import BridgeError
from .protocol import MatrixHandle
from .server import BridgeServer
