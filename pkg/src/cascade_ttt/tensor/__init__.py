from .engine import *  # noqa: F401,F403
from .engine import __all__ as _engine_all
from .optim import Adam, AdamState, adam_step, ema_update, sgd_step

__all__ = list(_engine_all) + ["Adam", "AdamState", "adam_step", "ema_update", "sgd_step"]
