"""XML prompting as executable mathematics: lattice, grammar masks, metric, iteration and protocols."""

__version__ = "0.1.0"

from .classes import *
from .lattice import *
from .grammar import *
from .metric import *
from .engine import *
from .invariants import *
from .agents import *
from .config import *
from .protocols import *
