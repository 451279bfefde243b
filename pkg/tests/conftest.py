from __future__ import annotations

import asyncio
import json
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from shardline.config import DeploymentConfig, save_config
from shardline.domain import ProfileRecord, UserRecord

sys.path.insert(0, str(Path(__file__).parent))


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def addr() -> str:
    return f"127.0.0.1:{free_port()}"


def run(coro):
    return asyncio.run(coro)


def user(uid: int, email: str | None = None) -> UserRecord:
    return UserRecord(uid, email or f"u{uid}@example.test", "pbkdf2$x$y$z", f"user {uid}", True, 1_000)


def profile(uid: int, **kw) -> ProfileRecord:
    base = dict(user_id=uid, age=45, bmi=28.4, cholesterol_level=210, hypertension=True,
                macrosomic_baby_history=True, family_history_diabetes=True, smoking_years=10,
                updated_at=1_000)
    base.update(kw)
    return ProfileRecord(**base)


def local_config(tmp_path: Path, **overrides) -> DeploymentConfig:
    """A deployment on fresh loopback ports under ``tmp_path``."""
    from shardline.config import GatewayConfig

    cfg = DeploymentConfig(
        data_dir=str(tmp_path / "data"),
        backends=(addr(), addr()),
        predictors=(addr(), addr()),
        gateway=GatewayConfig(listen=addr()),
    )
    return cfg.with_overrides(**overrides)


class Server:
    """``shardline serve`` in a child process."""

    def __init__(self, cfg_path: Path, role: str = "all-in-one", *args: str, log: Path | None = None):
        self.cmd = [sys.executable, "-m", "shardline", "--config", str(cfg_path), "serve", role, *args]
        self.log = log
        self.proc: subprocess.Popen | None = None

    def start(self, timeout: float = 30.0) -> "Server":
        out = open(self.log, "ab") if self.log else subprocess.DEVNULL
        self.proc = subprocess.Popen(self.cmd, stdout=subprocess.PIPE, stderr=out)
        deadline = time.monotonic() + timeout
        assert self.proc.stdout is not None
        while time.monotonic() < deadline:
            line = self.proc.stdout.readline()
            if not line:
                raise RuntimeError(f"{self.cmd} exited with {self.proc.wait()}")
            if line.strip().endswith(b"ready"):
                return self
        raise RuntimeError(f"{self.cmd} not ready after {timeout} s")

    def kill(self) -> None:
        if self.proc and self.proc.poll() is None:
            self.proc.send_signal(signal.SIGKILL)
            self.proc.wait()

    def stop(self) -> None:
        if self.proc and self.proc.poll() is None:
            self.proc.send_signal(signal.SIGINT)
            try:
                self.proc.wait(20)
            except subprocess.TimeoutExpired:
                self.kill()

    def __enter__(self) -> "Server":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def write_config(cfg: DeploymentConfig, path: Path) -> Path:
    save_config(cfg, path)
    return path


def cli(*args: str, cfg: Path | None = None, check: bool = True, timeout: float = 600) -> subprocess.CompletedProcess:
    cmd = [sys.executable, "-m", "shardline"]
    if cfg is not None:
        cmd += ["--config", str(cfg)]
    res = subprocess.run(cmd + list(args), capture_output=True, text=True, timeout=timeout,
                         env={**os.environ})
    if check and res.returncode != 0:
        raise AssertionError(f"{cmd + list(args)} -> {res.returncode}\n{res.stderr}")
    return res


def cli_json(*args: str, cfg: Path | None = None, timeout: float = 600):
    return json.loads(cli(*args, cfg=cfg, timeout=timeout).stdout)


@pytest.fixture
def tmp_cfg(tmp_path):
    return local_config(tmp_path)


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


@pytest.fixture
def criterion(request):
    """Collects measurements for one acceptance criterion and prints its verdict line."""
    number, title = request.node.get_closest_marker("criterion").args
    detail: dict = {}
    yield detail
    rep = getattr(request.node, "rep_call", None)
    verdict = "PASS" if rep is not None and rep.passed else "FAIL"
    facts = ", ".join(f"{k}={v}" for k, v in detail.items())
    line = f"ACCEPTANCE {number:>2} {verdict}  {title}" + (f"  [{facts}]" if facts else "")
    ACCEPTANCE_LINES.append(line)
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
