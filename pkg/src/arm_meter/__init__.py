from arm_meter.kernels import BACKEND

__version__ = "0.1.0"
