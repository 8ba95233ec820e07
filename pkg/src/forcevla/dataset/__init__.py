from .episode import (DatasetError, DatasetFormatError, Episode, Timestep, decode_episode,
                      encode_episode, format_kv, load_episode, parse_kv, save_episode)
from .norm import NormStats, compute_norm_stats
from .store import (CollectResult, chunk, collect_demonstrations, dataset_hash, load_dataset,
                    read_manifest, record_episode, write_dataset)
from .sync import SyncedRecord, synchronize
