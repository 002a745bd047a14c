from .cells import CellParams, FCCell, GRUCell, LSTMCell, cell_param_count, gru_step, lstm_step
from .network import (Architecture, ModelError, ModelParams, backward, compose_streams, fc_baseline_forward,
                      forward, loss_and_grads, nll_loss, single_stream_view)
from .optim import AdamState, TrainingError, adam_step
from .training import LabeledTrack, TrainConfig, TrainResult, train, train_scorer
