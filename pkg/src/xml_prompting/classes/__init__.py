from .exceptions import *
from .defaults import *
from .tree import *
from .results import *
