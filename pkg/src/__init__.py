"""flowtap: user-space traffic gateway with an off-path analyzer"""

__version__ = "0.1.0"
__author__ = "flowtap developers"
