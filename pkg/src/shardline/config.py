"""Deployment configuration (JSON, schema version 1).

One file describes the whole deployment; every role reads the same file and
picks its own section. Minimal example::

    {
      "version": 1,
      "data_dir": "./shardline-data",
      "prediction_mode": "async",
      "shards": {"capacity_per_shard": 5000,
                 "entries": [[1, 5000, 0], [5001, 10000, 1]]},
      "backends": ["127.0.0.1:8101", "127.0.0.1:8102"],
      "predictors": ["127.0.0.1:8201", "127.0.0.1:8202"],
      "gateway": {"listen": "127.0.0.1:8080"}
    }

Omitted keys take the defaults below. The file path comes from ``--config`` or
the ``SHARDLINE_CONFIG`` environment variable.
"""

from __future__ import annotations

import errno
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .predictor import ModelConfig
from .shard_router import InvalidShardMap, ShardMap

SCHEMA_VERSION = 1
ENV_VAR = "SHARDLINE_CONFIG"
PREDICTION_MODES = ("sync", "async")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class PortInUse(OSError):
    def __init__(self, addr: str):
        self.addr = addr
        super().__init__(errno.EADDRINUSE, f"address {addr} already in use")


def _addr(value: Any, path: str) -> str:
    if not isinstance(value, str) or ":" not in value:
        raise ConfigError(path, f"expected 'host:port', got {value!r}")
    host, _, port = value.rpartition(":")
    if not port.isdigit() or not (0 <= int(port) < 65536) or not host:
        raise ConfigError(path, f"bad address {value!r}")
    return value


def url_of(addr: str) -> str:
    return f"http://{addr}"


def split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


@dataclass(frozen=True)
class GatewayConfig:
    listen: str = "127.0.0.1:8080"
    health_interval_ms: int = 2000
    unhealthy_after: int = 3
    healthy_after: int = 2
    connect_timeout_ms: int = 1000
    upstream_timeout_ms: int = 30_000
    access_log: str | None = None


@dataclass(frozen=True)
class BrokerConfig:
    directory: str | None = None
    visibility_timeout_ms: int = 30_000
    max_deliveries: int = 5
    fsync: bool = False
    server: str | None = None


@dataclass(frozen=True)
class DeploymentConfig:
    data_dir: str = "./shardline-data"
    secret: str = "shardline-dev-secret"
    prediction_mode: str = "async"
    shard_map: ShardMap = field(default_factory=ShardMap.uniform)
    auto_extend: bool = True
    pool_max_connections: int = 100
    pool_acquire_timeout_ms: int = 5000
    pool_offload: bool = False
    store_fsync: bool = False
    shard_servers: tuple[str, ...] = ()
    broker: BrokerConfig = field(default_factory=BrokerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    backends: tuple[str, ...] = ("127.0.0.1:8101", "127.0.0.1:8102")
    predictors: tuple[str, ...] = ("127.0.0.1:8201", "127.0.0.1:8202")
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    cache_ttl_s: float = 3600.0
    cache_max_entries: int = 100_000
    token_ttl_s: int = 86_400
    password_iterations: int = 1000
    response_consumers: int = 16
    version: int = SCHEMA_VERSION

    @property
    def broker_dir(self) -> Path:
        return Path(self.broker.directory) if self.broker.directory else Path(self.data_dir) / "broker"

    def shard_dir(self, index: int) -> Path:
        return Path(self.data_dir) / f"shard-{index}"

    @property
    def gateway_url(self) -> str:
        return url_of(self.gateway.listen)

    def with_overrides(self, **kw: Any) -> DeploymentConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "data_dir": self.data_dir,
            "secret": self.secret,
            "prediction_mode": self.prediction_mode,
            "shards": {
                **self.shard_map.to_dict(),
                "auto_extend": self.auto_extend,
                "fsync": self.store_fsync,
                "servers": list(self.shard_servers),
                "pool": {"max_connections": self.pool_max_connections,
                         "acquire_timeout_ms": self.pool_acquire_timeout_ms,
                         "offload": self.pool_offload},
            },
            "broker": {
                "directory": self.broker.directory,
                "visibility_timeout_ms": self.broker.visibility_timeout_ms,
                "max_deliveries": self.broker.max_deliveries,
                "fsync": self.broker.fsync,
                "server": self.broker.server,
            },
            "model": self.model.to_dict(),
            "backends": list(self.backends),
            "predictors": list(self.predictors),
            "gateway": {
                "listen": self.gateway.listen,
                "health_interval_ms": self.gateway.health_interval_ms,
                "unhealthy_after": self.gateway.unhealthy_after,
                "healthy_after": self.gateway.healthy_after,
                "connect_timeout_ms": self.gateway.connect_timeout_ms,
                "upstream_timeout_ms": self.gateway.upstream_timeout_ms,
                "access_log": self.gateway.access_log,
            },
            "cache": {"ttl_s": self.cache_ttl_s, "max_entries": self.cache_max_entries},
            "auth": {"token_ttl_s": self.token_ttl_s, "password_iterations": self.password_iterations},
            "response_consumers": self.response_consumers,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DeploymentConfig:
        if not isinstance(d, Mapping):
            raise ConfigError("$", "config must be a JSON object")
        version = d.get("version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError("version", f"unsupported schema version {version}")
        base = cls()
        mode = d.get("prediction_mode", base.prediction_mode)
        if mode not in PREDICTION_MODES:
            raise ConfigError("prediction_mode", f"must be one of {PREDICTION_MODES}")

        shards = d.get("shards", {})
        try:
            if "entries" in shards:
                smap = ShardMap.from_dict(shards)
            else:
                smap = ShardMap.uniform(int(shards.get("count", 2)),
                                        int(shards.get("capacity_per_shard", 5000)))
        except InvalidShardMap as exc:
            where = f"shards.entries[{exc.entry}]" if exc.entry is not None else "shards"
            raise ConfigError(where, str(exc)) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError("shards.entries", str(exc)) from None
        pool = shards.get("pool", {})
        servers = tuple(_addr(a, f"shards.servers[{i}]") for i, a in enumerate(shards.get("servers", [])))
        if servers and len(servers) < smap.shard_count:
            raise ConfigError("shards.servers", f"need one server per shard ({smap.shard_count})")

        b = d.get("broker", {})
        broker = BrokerConfig(
            directory=b.get("directory"),
            visibility_timeout_ms=int(b.get("visibility_timeout_ms", 30_000)),
            max_deliveries=int(b.get("max_deliveries", 5)),
            fsync=bool(b.get("fsync", False)),
            server=_addr(b["server"], "broker.server") if b.get("server") else None,
        )
        try:
            model = ModelConfig.from_dict(d.get("model", {}))
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None

        g = d.get("gateway", {})
        gateway = GatewayConfig(
            listen=_addr(g.get("listen", base.gateway.listen), "gateway.listen"),
            health_interval_ms=int(g.get("health_interval_ms", 2000)),
            unhealthy_after=int(g.get("unhealthy_after", 3)),
            healthy_after=int(g.get("healthy_after", 2)),
            connect_timeout_ms=int(g.get("connect_timeout_ms", 1000)),
            upstream_timeout_ms=int(g.get("upstream_timeout_ms", 30_000)),
            access_log=g.get("access_log"),
        )
        backends = tuple(_addr(a, f"backends[{i}]") for i, a in enumerate(d.get("backends", base.backends)))
        if not backends:
            raise ConfigError("backends", "at least one backend is required")
        predictors = tuple(_addr(a, f"predictors[{i}]")
                           for i, a in enumerate(d.get("predictors", base.predictors)))
        cache = d.get("cache", {})
        auth = d.get("auth", {})
        cfg = cls(
            data_dir=str(d.get("data_dir", base.data_dir)),
            secret=str(d.get("secret", base.secret)),
            prediction_mode=mode,
            shard_map=smap,
            auto_extend=bool(shards.get("auto_extend", base.auto_extend)),
            pool_max_connections=int(pool.get("max_connections", base.pool_max_connections)),
            pool_acquire_timeout_ms=int(pool.get("acquire_timeout_ms", base.pool_acquire_timeout_ms)),
            pool_offload=bool(pool.get("offload", base.pool_offload)),
            store_fsync=bool(shards.get("fsync", False)),
            shard_servers=servers,
            broker=broker,
            model=model,
            backends=backends,
            predictors=predictors,
            gateway=gateway,
            cache_ttl_s=float(cache.get("ttl_s", base.cache_ttl_s)),
            cache_max_entries=int(cache.get("max_entries", base.cache_max_entries)),
            token_ttl_s=int(auth.get("token_ttl_s", base.token_ttl_s)),
            password_iterations=int(auth.get("password_iterations", base.password_iterations)),
            response_consumers=int(d.get("response_consumers", base.response_consumers)),
        )
        if cfg.pool_max_connections < 1:
            raise ConfigError("shards.pool.max_connections", "must be >= 1")
        return cfg


def load_config(path: str | os.PathLike[str] | None = None) -> DeploymentConfig:
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return DeploymentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from None
    return DeploymentConfig.from_dict(raw)


def save_config(cfg: DeploymentConfig, path: str | os.PathLike[str]) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
