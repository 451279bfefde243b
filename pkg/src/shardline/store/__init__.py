from .access import LocalShard, RemoteShard, shard_app
from .engine import (
    DuplicateKey,
    InvalidRange,
    NotFound,
    ShardStore,
    StoreError,
    WrongShard,
    global_id,
    shard_of_id,
)
from .pool import ConnectionPool, Lease, PoolClosed, PoolTimeout

__all__ = [
    "ConnectionPool",
    "DuplicateKey",
    "InvalidRange",
    "Lease",
    "LocalShard",
    "NotFound",
    "PoolClosed",
    "PoolTimeout",
    "RemoteShard",
    "ShardStore",
    "StoreError",
    "WrongShard",
    "global_id",
    "shard_of_id",
    "shard_app",
]
