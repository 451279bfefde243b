"""Process wiring for every deployment role.

``all-in-one`` runs the whole topology in one event loop: the gateway, every
backend and every predictor listen on their own ports, while the shards and
the broker are in-process objects shared by the backends. Multi-process
deployments reach shards and the broker over HTTP through ``shards.servers``
and ``broker.server``.
"""

from __future__ import annotations

import asyncio
import csv
import errno
import logging
import random
import secrets
from contextlib import AsyncExitStack
from pathlib import Path
from typing import Any, Callable

import aiohttp
from aiohttp import web

from .api import BackendService, ShardSet, TokenSigner, backend_app, hash_password
from .broker import Broker, RemoteBroker, ResponseRouter, broker_app
from .cache import TTLCache
from .config import ConfigError, DeploymentConfig, PortInUse, split_addr, url_of
from .domain import ProfileRecord, UserRecord, now_ms
from .gateway import Gateway
from .predictor import PredictorClient, PredictorService, predictor_app
from .shard_router import ShardMap, ShardRouter, StoreUnavailable, route, shard_census
from .store import ConnectionPool, LocalShard, RemoteShard, ShardStore, shard_app

log = logging.getLogger(__name__)

ROLES = ("gateway", "backend", "predictor", "shard", "broker", "all-in-one")


class DirtyDataDir(RuntimeError):
    pass


def client_session() -> aiohttp.ClientSession:
    return aiohttp.ClientSession(connector=aiohttp.TCPConnector(limit=0, limit_per_host=0))


async def start_site(app: web.Application, addr: str) -> web.AppRunner:
    host, port = split_addr(addr)
    runner = web.AppRunner(app, access_log=None, handle_signals=False)
    await runner.setup()
    site = web.TCPSite(runner, host, port, backlog=4096, reuse_address=True)
    try:
        await site.start()
    except OSError as exc:
        await runner.cleanup()
        if exc.errno == errno.EADDRINUSE:
            raise PortInUse(addr) from None
        raise
    log.info("listening on %s", addr)
    return runner


def open_local_shard(cfg: DeploymentConfig, index: int, router: ShardRouter | None = None) -> LocalShard:
    owns = (lambda uid: router.owns(index, uid)) if router is not None else None
    store = ShardStore(index, cfg.shard_dir(index), owns=owns, fsync=cfg.store_fsync)
    pool = ConnectionPool(index, cfg.pool_max_connections, cfg.pool_acquire_timeout_ms / 1000)
    return LocalShard(store, pool, offload=cfg.pool_offload)


def open_broker(cfg: DeploymentConfig, read_only: bool = False) -> Broker:
    broker = Broker(cfg.broker_dir, visibility_timeout=cfg.broker.visibility_timeout_ms / 1000,
                    max_deliveries=cfg.broker.max_deliveries, fsync=cfg.broker.fsync,
                    read_only=read_only)
    broker.declare_prediction_queues()
    return broker


def make_signer(cfg: DeploymentConfig) -> TokenSigner:
    return TokenSigner(cfg.secret, cfg.token_ttl_s)


def predictor_timeout(cfg: DeploymentConfig) -> float:
    # slot wait plus the inference itself, with a little slack for the hop
    return (cfg.model.request_timeout_ms + cfg.model.inference_delay_ms) / 1000 + 0.5


class Deployment:
    """Starts one role (or all of them) and tears it down in reverse order."""

    def __init__(self, cfg: DeploymentConfig, role: str = "all-in-one", index: int = 0):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.cfg = cfg
        self.role = role
        self.index = index
        self.router = ShardRouter(cfg.shard_map, cfg.auto_extend)
        self.shards: ShardSet | None = None
        self.broker: Broker | RemoteBroker | None = None
        self.backends: list[BackendService] = []
        self.predictors: list[PredictorService] = []
        self.gateway: Gateway | None = None
        self.runners: dict[str, web.AppRunner] = {}
        self._stack = AsyncExitStack()
        self._session: aiohttp.ClientSession | None = None

    # -- building blocks --------------------------------------------------

    @property
    def session(self) -> aiohttp.ClientSession:
        if self._session is None:
            self._session = client_session()
        return self._session

    async def _listen(self, name: str, app: web.Application, addr: str) -> None:
        self.runners[name] = await start_site(app, addr)

    def _shard_set(self) -> ShardSet:
        cfg = self.cfg
        if cfg.shard_servers:
            def remote(i: int) -> RemoteShard:
                if i >= len(cfg.shard_servers):
                    raise StoreUnavailable(i, "no server configured for this shard")
                return RemoteShard(i, url_of(cfg.shard_servers[i]), self.session)
            return ShardSet({i: remote(i) for i in cfg.shard_map.shard_indexes}, remote)

        def local(i: int) -> LocalShard:
            return open_local_shard(cfg, i, self.router)
        return ShardSet({i: local(i) for i in cfg.shard_map.shard_indexes}, local)

    def _broker(self) -> Broker | RemoteBroker:
        if self.cfg.broker.server:
            return RemoteBroker(url_of(self.cfg.broker.server), self.session)
        return open_broker(self.cfg)

    def _backend(self, name: str) -> BackendService:
        cfg = self.cfg
        predictors = PredictorClient([url_of(a) for a in cfg.predictors], self.session,
                                     predictor_timeout(cfg)) if cfg.predictors else None
        return BackendService(
            name=name, router=self.router, shards=self.shards, broker=self.broker,
            predictors=predictors, prediction_mode=cfg.prediction_mode,
            cache=TTLCache(cfg.cache_ttl_s, cfg.cache_max_entries), signer=make_signer(cfg),
            password_iterations=cfg.password_iterations)

    async def _start_backend(self, i: int) -> None:
        svc = self._backend(f"backend-{i}")
        self.backends.append(svc)
        if self.cfg.prediction_mode == "async":
            rr = ResponseRouter(self.broker, on_processing=svc.on_processing, on_result=svc.on_result,
                                on_failed=svc.on_failed, concurrency=self.cfg.response_consumers,
                                consumer=f"responses-{svc.name}")
            rr.start()
            self._stack.push_async_callback(rr.stop)
        await self._listen(svc.name, backend_app(svc), self.cfg.backends[i])

    async def _start_predictor(self, i: int) -> None:
        svc = PredictorService(self.cfg.model, f"predictor-{i}")
        self.predictors.append(svc)
        if self.cfg.prediction_mode == "async" and self.broker is not None:
            svc.serve_async(self.broker)
            self._stack.push_async_callback(svc.stop)
        await self._listen(svc.name, predictor_app(svc), self.cfg.predictors[i])

    async def _start_gateway(self) -> None:
        g = self.cfg.gateway
        log_fh = open(g.access_log, "a", buffering=1 << 16) if g.access_log else None
        if log_fh is not None:
            self._stack.callback(log_fh.close)
        self.gateway = Gateway(list(self.cfg.backends), health_interval=g.health_interval_ms / 1000,
                               unhealthy_after=g.unhealthy_after, healthy_after=g.healthy_after,
                               connect_timeout=g.connect_timeout_ms / 1000,
                               upstream_timeout=g.upstream_timeout_ms / 1000, access_log=log_fh)
        self._stack.push_async_callback(self.gateway.close)
        await self.gateway.listen(g.listen)

    # -- lifecycle --------------------------------------------------------

    async def start(self) -> None:
        try:
            await self._start()
        except BaseException:
            await self.stop()
            raise

    async def _start(self) -> None:
        cfg, role = self.cfg, self.role
        if role == "gateway":
            await self._start_gateway()
            return
        if role == "shard":
            if self.index >= len(cfg.shard_servers):
                raise ConfigError("shards.servers", f"no address for shard {self.index}")
            shard = open_local_shard(cfg, self.index, self.router)
            self._stack.callback(shard.close)
            await self._listen(f"shard-{self.index}", shard_app(shard), cfg.shard_servers[self.index])
            return
        if role == "broker":
            if not cfg.broker.server:
                raise ConfigError("broker.server", "the broker role needs a listen address")
            broker = open_broker(cfg)
            self.broker = broker
            await broker.start()
            self._stack.push_async_callback(broker.close)
            await self._listen("broker", broker_app(broker), cfg.broker.server)
            return
        if role == "predictor":
            if self.index >= len(cfg.predictors):
                raise ConfigError("predictors", f"no address for predictor {self.index}")
            if cfg.prediction_mode == "async":
                if not cfg.broker.server:
                    raise ConfigError("broker.server", "a standalone async predictor needs a broker server")
                self.broker = self._broker()
            await self._start_predictor(self.index)
            return
        if role == "backend":
            if self.index >= len(cfg.backends):
                raise ConfigError("backends", f"no address for backend {self.index}")
            if cfg.prediction_mode == "async" and not cfg.broker.server:
                raise ConfigError("broker.server", "a standalone async backend needs a broker server")
            self.shards = self._shard_set()
            self._stack.callback(self._close_shards)
            self.broker = self._broker()
            await self._start_backend(self.index)
            return

        # all-in-one
        self.shards = self._shard_set()
        self._stack.callback(self._close_shards)
        self.broker = self._broker()
        if isinstance(self.broker, Broker):
            await self.broker.start()
            self._stack.push_async_callback(self.broker.close)
        for i in range(len(cfg.predictors)):
            await self._start_predictor(i)
        for i in range(len(cfg.backends)):
            await self._start_backend(i)
        await self._start_gateway()

    def _close_shards(self) -> None:
        if self.shards is not None:
            for shard in self.shards.values():
                shard.close()

    async def stop(self) -> None:
        # stop accepting traffic first, then drain consumers, then close storage
        for runner in reversed(list(self.runners.values())):
            await runner.cleanup()
        self.runners.clear()
        await self._stack.aclose()
        self._stack = AsyncExitStack()
        if self._session is not None:
            await self._session.close()
            self._session = None

    async def __aenter__(self) -> Deployment:
        await self.start()
        return self

    async def __aexit__(self, *exc: Any) -> None:
        await self.stop()


async def serve_forever(cfg: DeploymentConfig, role: str, index: int = 0,
                        ready: Callable[[Deployment], None] | None = None) -> None:
    async with Deployment(cfg, role, index) as dep:
        if ready is not None:
            ready(dep)
        await asyncio.Event().wait()


# -- seeding ---------------------------------------------------------------


def _is_dirty(cfg: DeploymentConfig) -> bool:
    dirs = [cfg.shard_dir(i) for i in cfg.shard_map.shard_indexes] + [cfg.broker_dir]
    return any(d.exists() and any(d.iterdir()) for d in dirs)


def random_profile(rng: random.Random, user_id: int, at: int) -> ProfileRecord:
    return ProfileRecord(
        user_id=user_id,
        age=rng.randint(18, 90),
        bmi=round(rng.uniform(17.0, 45.0), 1),
        cholesterol_level=rng.randint(120, 320),
        hypertension=rng.random() < 0.3,
        macrosomic_baby_history=rng.random() < 0.1,
        family_history_diabetes=rng.random() < 0.25,
        smoking_years=rng.randint(0, 40),
        updated_at=at,
    )


def seed(cfg: DeploymentConfig, n_users: int, credentials: str | Path, *, rng_seed: int = 7,
         activities_per_user: int = 2) -> list[int]:
    """Register ``n_users`` verified users with a profile and activities.

    Writes ``user_id,email,password,token`` rows to ``credentials`` and
    returns the per-shard census. Refuses to touch a non-empty data directory.
    """
    if _is_dirty(cfg):
        raise DirtyDataDir(f"{cfg.data_dir} already holds data; seed needs a clean directory")
    rng = random.Random(rng_seed)
    router = ShardRouter(cfg.shard_map, cfg.auto_extend)
    stores: dict[int, ShardStore] = {}
    signer = make_signer(cfg)

    def store_for(index: int) -> ShardStore:
        if index not in stores:
            stores[index] = ShardStore(index, cfg.shard_dir(index), owns=lambda uid, i=index: router.owns(i, uid),
                                       fsync=False, snapshot_every=10 ** 9)
        return stores[index]

    directory = store_for(cfg.shard_map.entries[0].shard_index)
    for i in cfg.shard_map.shard_indexes:
        store_for(i)
    try:
        with open(credentials, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["user_id", "email", "password", "token"])
            for _ in range(n_users):
                uid = directory.next_user_id()
                store = store_for(router.route(uid))
                at = now_ms()
                email = f"user{uid}@example.test"
                password = secrets.token_urlsafe(9)
                directory.claim_email(email, uid)
                store.create_user(UserRecord(uid, email, hash_password(password, cfg.password_iterations),
                                             f"user {uid}", True, at))
                store.create_profile(random_profile(rng, uid, at))
                for k in range(activities_per_user):
                    kind = ("smoking", "exercise")[k % 2]
                    store.create_activity(uid, kind, rng.randint(0, 20), at - rng.randint(0, 86_400_000))
                token, _ = signer.issue(uid)
                out.writerow([uid, email, password, token])
        census = shard_census(router.map, stores)
        for s in stores.values():
            s.snapshot()
        return census
    finally:
        for s in stores.values():
            s.close()


# -- inspection ------------------------------------------------------------


async def census(cfg: DeploymentConfig) -> list[int]:
    """Users per shard, from shard servers when configured, else from the files."""
    if cfg.shard_servers:
        async with client_session() as session:
            counts = {}
            for i in cfg.shard_map.shard_indexes:
                try:
                    async with session.get(f"{url_of(cfg.shard_servers[i])}/stats",
                                           timeout=aiohttp.ClientTimeout(total=5)) as resp:
                        counts[i] = (await resp.json())["users"]
                except (aiohttp.ClientError, asyncio.TimeoutError, IndexError) as exc:
                    raise StoreUnavailable(i, str(exc) or type(exc).__name__) from None
            return [counts[i] for i in cfg.shard_map.shard_indexes]
    stores = {}
    try:
        for i in cfg.shard_map.shard_indexes:
            if not cfg.shard_dir(i).exists():
                raise StoreUnavailable(i, f"no data at {cfg.shard_dir(i)}")
            stores[i] = ShardStore(i, cfg.shard_dir(i), read_only=True)
        return shard_census(cfg.shard_map, stores)
    finally:
        for s in stores.values():
            s.close()


def placement_violations(shard_map: ShardMap, stores: dict[int, ShardStore]) -> list[tuple[int, str, int]]:
    """(shard, table, user_id) for every record stored on a shard its user does not route to."""
    bad = []
    for index, store in stores.items():
        for table, uid in store.scan_user_ids():
            if route(uid, shard_map) != index:
                bad.append((index, table, uid))
    return bad


async def queue_depths(cfg: DeploymentConfig) -> dict[str, dict[str, int]]:
    if cfg.broker.server:
        async with client_session() as session:
            return await RemoteBroker(url_of(cfg.broker.server), session).depths()
    # read-only: a live broker may be appending to the same logs
    broker = open_broker(cfg, read_only=True)
    try:
        return broker.depths()
    finally:
        await broker.close()
