"""Spoofing-robust speaker verification with a multi-task network

"""

__version__ = '0.1.0a1'

from .utils import set_log_level
