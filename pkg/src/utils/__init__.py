from . import errors
from .config import structured
