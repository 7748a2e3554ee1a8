from clab.nn.layers import Encoder, EncoderConfig, LinearHead
from clab.nn.optim import LrSchedule, ParamSet, Plateau, schedule_rate, sgd_step
from clab.nn.tensor import Tensor, backward, cross_entropy, no_grad

__all__ = [
    "Encoder", "EncoderConfig", "LinearHead", "LrSchedule", "ParamSet", "Plateau",
    "Tensor", "backward", "cross_entropy", "no_grad", "schedule_rate", "sgd_step",
]
