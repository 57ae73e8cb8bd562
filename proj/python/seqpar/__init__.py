"""Python surface of the sequence-parallel attention simulator.

The compiled core lives in `_seqpar`; this package re-exports it under a
stable name so callers write `import seqpar`.
"""

from _seqpar import (
    IGNORE_LABEL,
    ConfigError,
    ShapeError,
    __version__,
    balance_report,
    causal_pairs,
    comm_report,
    dummy_head_bytes,
    engine_attention,
    engine_names,
    gather_rows,
    measure_engine_bytes,
    oracle_attention,
    pad_length,
    pick_xtuner_insp,
    pitfall_demo,
    position_ids,
    ring_bytes,
    shard_positions,
    shard_rows,
    train,
    ulysses_bytes,
    usp_bytes,
    verify,
    xtuner_bytes,
)

__all__ = [
    "IGNORE_LABEL",
    "ConfigError",
    "ShapeError",
    "__version__",
    "balance_report",
    "causal_pairs",
    "comm_report",
    "dummy_head_bytes",
    "engine_attention",
    "engine_names",
    "gather_rows",
    "measure_engine_bytes",
    "oracle_attention",
    "pad_length",
    "pick_xtuner_insp",
    "pitfall_demo",
    "position_ids",
    "ring_bytes",
    "shard_positions",
    "shard_rows",
    "train",
    "ulysses_bytes",
    "usp_bytes",
    "verify",
    "xtuner_bytes",
]
