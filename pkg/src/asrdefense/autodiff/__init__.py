from .tensor import (EPS, NonFiniteError, Tape, Tensor, abs_, add, backward, build_tape, concat,
                     conv1d, conv_transpose1d, div, elementwise, exp, frame, gather_last, getitem,
                     log, log_softmax, magnitude, matmul, maximum, mul, no_grad, grad_enabled, pad_last, pick,
                     power, reduce, reduce_max, reduce_mean, reduce_sum, relu, reshape, sigmoid,
                     sign, sqrt, sub, tanh, transpose)
from .optim import SGD, Adam, adam_step, sgd_step
from .io import load_tensor, save_tensor
from .gradcheck import gradcheck, numerical_grad, relative_error
