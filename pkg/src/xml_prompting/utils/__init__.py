from .logger import Logger, log, format_elapsed_time
from .colors import color
from .automata import *
from .utils import *
