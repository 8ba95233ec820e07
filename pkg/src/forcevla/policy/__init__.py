from .config import ConfigError, PolicyConfig, PolicyVariant, TrainConfig
from .model import (ContextEmbedding, FlowPolicy, PolicyBatch, batch_from_observations, patchify)
from .train import (NumericalFailure, PolicyRunner, RouterRecord, TrainingData, TrainResult,
                    checkpoint_bytes, init_model, load_policy, restore, train)
