from .dsio import ManifestError, read_dataset, write_dataset
from .normalize import (
    DegenerateChannelError,
    apply_norm,
    compute_norm_stats,
    denormalize,
    normalize_dataset,
)
from .rng import RngStream, derive_stream, stream_id_for, torch_seeded
from .tensorio import (
    DimensionOverflowError,
    MagicMismatchError,
    TensorFormatError,
    TruncatedPayloadError,
    VersionMismatchError,
    read_tensor,
    write_tensor,
)
from .types import (
    CHANNEL_NAMES,
    N_CHANNELS,
    Dataset,
    GridTopology,
    Label,
    NormStats,
    Provenance,
    Sample,
    TopologyError,
    concat_datasets,
)
