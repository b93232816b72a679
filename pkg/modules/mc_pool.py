# modules/mc_pool.py
"""
Shared model-call pool.

A fixed set of resources, each able to run some subset of the tools. A caller
leases one capable, free resource (FIFO per capability class, with a timeout),
runs the tool on it and releases it. Transient faults release the lease and
re-enter allocation; a request gets at most MAX_ATTEMPTS attempts in total.

Faults and latency jitter are drawn from an RNG keyed by
(pool seed, request id, attempt), so which attempts fail does not depend on
thread scheduling.

This class is threadsafe.
"""

from __future__ import annotations

import logging
import threading
import time
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .config import ConfigError, require
from .synth_env import EnvConfig, EnvState, ToolSpec, apply_tool, init_state

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 3

# rng stream tags
_TAG_FAULT = 201
_TAG_BENCH = 5


class PoolError(RuntimeError):
    pass


class PoolTimeout(PoolError):
    def __init__(self, message: str, request_id=None, attempts: Sequence["Attempt"] = ()):
        self.request_id = request_id
        self.attempts = list(attempts)
        super().__init__(message)


class NoCapableResource(PoolError):
    pass


class QueueFull(PoolError):
    pass


class TransientFault(PoolError):
    pass


class ExhaustedRetries(PoolError):
    def __init__(self, request_id, attempts: Sequence["Attempt"]):
        self.request_id = request_id
        self.attempts = list(attempts)
        super().__init__(f"request {request_id} failed after {len(self.attempts)} attempts")


# ---------- config / request types


@dataclass(frozen=True)
class PoolConfig:
    size: int = 8
    failure_rate: float = 0.0
    latency_scale: float = 0.0  # simulated latency = exec_cost_ms * latency_scale (+ jitter)
    jitter_ms: float = 0.0
    max_queue_depth: int | None = None
    acquire_timeout_s: float = 30.0
    capabilities: Mapping[int, tuple[str, ...]] | None = None  # None = every resource runs every tool
    seed: int = 0

    def __post_init__(self):
        problems: list[str] = []
        require(problems, self.size >= 1, "pool.size", "must be >= 1")
        require(problems, 0.0 <= self.failure_rate < 1.0, "pool.failure_rate", "must be in [0, 1)")
        require(problems, self.latency_scale >= 0, "pool.latency_scale", "must be >= 0")
        require(problems, self.jitter_ms >= 0, "pool.jitter_ms", "must be >= 0")
        require(
            problems,
            self.max_queue_depth is None or self.max_queue_depth >= 0,
            "pool.max_queue_depth",
            "must be >= 0 or null",
        )
        require(problems, self.acquire_timeout_s > 0, "pool.acquire_timeout_s", "must be > 0")
        for k in self.capabilities or {}:
            require(problems, 0 <= int(k) < self.size, f"pool.capabilities.{k}", "unknown resource index")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return {
            "size": int(self.size),
            "failure_rate": float(self.failure_rate),
            "latency_scale": float(self.latency_scale),
            "jitter_ms": float(self.jitter_ms),
            "max_queue_depth": self.max_queue_depth,
            "acquire_timeout_s": float(self.acquire_timeout_s),
            "capabilities": None
            if self.capabilities is None
            else {str(k): list(v) for k, v in sorted(self.capabilities.items())},
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, raw: Mapping, seed: int = 0, path: str = "pool") -> "PoolConfig":
        try:
            caps = raw.get("capabilities")
            mqd = raw.get("max_queue_depth")
            return cls(
                size=int(raw.get("size", 8)),
                failure_rate=float(raw.get("failure_rate", 0.0)),
                latency_scale=float(raw.get("latency_scale", 0.0)),
                jitter_ms=float(raw.get("jitter_ms", 0.0)),
                max_queue_depth=None if mqd is None else int(mqd),
                acquire_timeout_s=float(raw.get("acquire_timeout_s", 30.0)),
                capabilities=None
                if caps is None
                else {int(k): tuple(str(t) for t in v) for k, v in dict(caps).items()},
                seed=int(raw.get("seed", seed)),
            )
        except ConfigError as e:
            raise ConfigError([m.replace("pool.", f"{path}.", 1) for m in e.problems]) from None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from None


@dataclass(frozen=True, eq=False)
class InvocationRequest:
    request_id: tuple
    tool_id: str
    state: EnvState
    timeout_s: float | None = None


@dataclass(frozen=True)
class Attempt:
    attempt: int
    resource_id: int | None
    outcome: str  # ok | fault | timeout


@dataclass(frozen=True, eq=False)
class InvocationResult:
    state: EnvState
    attempts: tuple[Attempt, ...]


@dataclass
class PoolResource:
    resource_id: int
    capabilities: frozenset[str] | None  # None = all-capable
    completed: int = 0
    failed: int = 0
    retried: int = 0
    busy: bool = False
    in_flight: int = 0

    def can_run(self, tool_id: str) -> bool:
        return self.capabilities is None or tool_id in self.capabilities


class Lease:
    """Single-owner handle on a leased resource; releases on scope exit."""

    def __init__(self, pool: "ModelCallPool", resource: PoolResource):
        self._pool = pool
        self.resource = resource
        self._released = False

    @property
    def resource_id(self) -> int:
        return self.resource.resource_id

    def release(self) -> None:
        if not self._released:
            self._released = True
            self._pool._release(self.resource)

    def __enter__(self) -> "Lease":
        return self

    def __exit__(self, *exc) -> None:
        self.release()


def _id_ints(request_id) -> list[int]:
    parts = request_id if isinstance(request_id, (tuple, list)) else (request_id,)
    out = []
    for x in parts:
        if isinstance(x, (int, np.integer)):
            out.append(int(x))
        else:
            out.append(zlib.crc32(str(x).encode("utf-8")))
    return out


# ---------- the pool


class ModelCallPool:
    def __init__(self, config: PoolConfig, env: EnvConfig):
        self.config = config
        self.env = env
        self.resources = [
            PoolResource(
                resource_id=i,
                capabilities=None
                if config.capabilities is None or i not in config.capabilities
                else frozenset(config.capabilities[i]),
            )
            for i in range(config.size)
        ]
        self._cond = threading.Condition()
        self._waiting: dict[tuple[int, ...], deque] = {}
        self._closed = False
        self._requests = 0
        self._exhausted = 0
        self._timeouts = 0
        self._max_concurrency = 0
        self._max_queue_depth = 0
        self._violations = 0
        self._in_flight_lock = threading.Lock()

    # -- allocation

    def _capable(self, tool_id: str) -> tuple[int, ...]:
        ids = tuple(r.resource_id for r in self.resources if r.can_run(tool_id))
        if not ids:
            raise NoCapableResource(f"no resource can run tool {tool_id!r}")
        return ids

    def _queued(self) -> int:
        return sum(len(q) for q in self._waiting.values())

    def acquire(self, tool_id: str, timeout: float | None = None) -> Lease:
        capable = self._capable(tool_id)
        timeout = self.config.acquire_timeout_s if timeout is None else timeout
        deadline = time.monotonic() + timeout
        ticket = object()
        with self._cond:
            if self._closed:
                raise PoolError("pool is closed")
            q = self._waiting.setdefault(capable, deque())
            free_now = any(not self.resources[i].busy for i in capable)
            depth = self.config.max_queue_depth
            if depth is not None and not (free_now and not q) and self._queued() >= depth:
                raise QueueFull(f"{self._queued()} requests already waiting")
            q.append(ticket)
            self._max_queue_depth = max(self._max_queue_depth, self._queued())
            try:
                while True:
                    if self._closed:
                        raise PoolError("pool is closed")
                    if q[0] is ticket:
                        for i in capable:
                            res = self.resources[i]
                            if not res.busy:
                                res.busy = True
                                busy = sum(1 for r in self.resources if r.busy)
                                self._max_concurrency = max(self._max_concurrency, busy)
                                return Lease(self, res)
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        self._timeouts += 1
                        raise PoolTimeout(f"no resource for {tool_id!r} within {timeout:.3f}s")
                    self._cond.wait(remaining)
            finally:
                q.remove(ticket)
                self._cond.notify_all()

    def _release(self, res: PoolResource) -> None:
        with self._cond:
            res.busy = False
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    # -- execution

    def _run_on(self, res: PoolResource, tool: ToolSpec, request: InvocationRequest, attempt: int) -> EnvState:
        with self._in_flight_lock:
            res.in_flight += 1
            if res.in_flight > 1:
                self._violations += 1
        try:
            rng = np.random.default_rng([self.config.seed, _TAG_FAULT, *_id_ints(request.request_id), attempt])
            fault = rng.random() < self.config.failure_rate
            latency_ms = tool.exec_cost * self.config.latency_scale
            if self.config.jitter_ms > 0:
                latency_ms += rng.uniform(0.0, self.config.jitter_ms)
            if latency_ms > 0:
                time.sleep(latency_ms / 1000.0)
            if fault:
                raise TransientFault(f"simulated fault on resource {res.resource_id}")
            return apply_tool(request.state, tool, self.env)
        finally:
            with self._in_flight_lock:
                res.in_flight -= 1

    def invoke_traced(self, request: InvocationRequest) -> InvocationResult:
        tool = self.env.tool(request.tool_id)
        with self._cond:
            self._requests += 1
        trace: list[Attempt] = []
        for attempt in range(1, MAX_ATTEMPTS + 1):
            try:
                lease = self.acquire(request.tool_id, request.timeout_s)
            except PoolTimeout as e:
                trace.append(Attempt(attempt, None, "timeout"))
                raise PoolTimeout(f"request {request.request_id}: {e}", request.request_id, trace) from e
            with lease:
                res = lease.resource
                if attempt > 1:
                    res.retried += 1
                try:
                    out = self._run_on(res, tool, request, attempt)
                except TransientFault:
                    res.failed += 1
                    trace.append(Attempt(attempt, res.resource_id, "fault"))
                    log.debug("request %s attempt %d faulted on resource %d", request.request_id, attempt, res.resource_id)
                    continue
                res.completed += 1
                trace.append(Attempt(attempt, res.resource_id, "ok"))
                return InvocationResult(state=out, attempts=tuple(trace))
        with self._cond:
            self._exhausted += 1
        raise ExhaustedRetries(request.request_id, trace)

    def invoke(self, request: InvocationRequest) -> EnvState:
        return self.invoke_traced(request).state

    def executor(self, request_prefix: tuple) -> Callable[[EnvState, ToolSpec], EnvState]:
        """Executor for policy rollouts; request ids are request_prefix + (step,)."""

        def run(state: EnvState, tool: ToolSpec) -> EnvState:
            return self.invoke(InvocationRequest((*request_prefix, state.step), tool.tool_id, state))

        return run

    # -- observability

    def stats(self) -> "PoolStats":
        with self._cond:
            return PoolStats(
                resources=tuple(
                    {
                        "resource_id": r.resource_id,
                        "completed": r.completed,
                        "failed": r.failed,
                        "retried": r.retried,
                        "busy": bool(r.busy),
                    }
                    for r in self.resources
                ),
                requests=self._requests,
                exhausted=self._exhausted,
                timeouts=self._timeouts,
                max_concurrency=self._max_concurrency,
                max_queue_depth=self._max_queue_depth,
                queued=self._queued(),
                exclusion_violations=self._violations,
            )


@dataclass(frozen=True)
class PoolStats:
    resources: tuple[dict, ...]
    requests: int = 0
    exhausted: int = 0
    timeouts: int = 0
    max_concurrency: int = 0
    max_queue_depth: int = 0
    queued: int = 0
    exclusion_violations: int = 0

    @property
    def completed(self) -> int:
        return sum(r["completed"] for r in self.resources)

    @property
    def failed(self) -> int:
        return sum(r["failed"] for r in self.resources)

    @property
    def busy(self) -> int:
        return sum(1 for r in self.resources if r["busy"])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.resources), columns=["resource_id", "completed", "failed", "retried", "busy"])

    def to_dict(self) -> dict:
        return {
            "requests": self.requests,
            "completed": self.completed,
            "failed": self.failed,
            "exhausted": self.exhausted,
            "timeouts": self.timeouts,
            "max_concurrency": self.max_concurrency,
            "max_queue_depth": self.max_queue_depth,
            "queued": self.queued,
            "busy": self.busy,
            "exclusion_violations": self.exclusion_violations,
        }


# ---------- stress bench


@dataclass(frozen=True)
class BenchReport:
    requests: int
    settled: int  # requests that reached a final outcome: a result or exhausted retries
    retried: int  # requests needing more than one attempt
    exhausted: int
    max_attempts_seen: int
    mismatches: int  # pooled result differs from direct apply_tool
    stats: PoolStats
    elapsed_s: float = 0.0
    succeeded: int = 0
    errors: int = 0  # requests ended by another pool error (timeout, closed pool...)
    extra: dict = field(default_factory=dict)

    def binomial_bounds(self, failure_rate: float) -> dict[str, tuple[float, float]]:
        """3-sigma bounds for the retried and exhausted counts."""
        n = self.requests
        out = {}
        for name, p in (("retried", failure_rate), ("exhausted", failure_rate**MAX_ATTEMPTS)):
            mu = n * p
            sd = float(np.sqrt(n * p * (1 - p)))
            out[name] = (mu - 3 * sd, mu + 3 * sd)
        return out

    def violations(self, failure_rate: float) -> list[str]:
        problems = []
        if self.stats.exclusion_violations:
            problems.append(f"mutual exclusion violations: {self.stats.exclusion_violations}")
        if self.max_attempts_seen > MAX_ATTEMPTS:
            problems.append(f"request with {self.max_attempts_seen} attempts")
        if self.settled != self.requests:
            problems.append(f"{self.requests - self.settled} requests did not settle")
        if self.stats.busy:
            problems.append(f"{self.stats.busy} resources still leased")
        if self.mismatches:
            problems.append(f"{self.mismatches} pooled results differ from direct execution")
        if self.stats.max_concurrency > len(self.stats.resources):
            problems.append("observed concurrency above pool size")
        for name, (lo, hi) in self.binomial_bounds(failure_rate).items():
            v = getattr(self, name)
            if not (lo <= v <= hi):
                problems.append(f"{name} count {v} outside 3-sigma bounds [{lo:.1f}, {hi:.1f}]")
        return problems

    def to_dict(self) -> dict:
        return {
            "requests": self.requests,
            "settled": self.settled,
            "succeeded": self.succeeded,
            "errors": self.errors,
            "retried": self.retried,
            "exhausted": self.exhausted,
            "max_attempts_seen": self.max_attempts_seen,
            "mismatches": self.mismatches,
            "elapsed_s": self.elapsed_s,
            **{f"pool_{k}": v for k, v in self.stats.to_dict().items()},
        }


def run_pool_bench(env: EnvConfig, cfg: PoolConfig, n_requests: int = 512, workers: int = 64, seed: int = 0) -> BenchReport:
    pool = ModelCallPool(cfg, env)
    reqs = []
    for i in range(n_requests):
        rng = np.random.default_rng([seed, _TAG_BENCH, i])
        state = init_state(env, [seed, _TAG_BENCH, i, 0])
        tool = env.tools[int(rng.integers(env.num_tools))]
        reqs.append(InvocationRequest((seed, _TAG_BENCH, i), tool.tool_id, state))

    def one(req: InvocationRequest):
        try:
            return pool.invoke_traced(req)
        except PoolError as e:
            return e

    t0 = time.monotonic()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        results = list(ex.map(one, reqs))
    elapsed = time.monotonic() - t0

    retried = exhausted = mismatches = succeeded = errors = 0
    max_seen = 0
    for req, res in zip(reqs, results):
        attempts = getattr(res, "attempts", ())
        max_seen = max(max_seen, len(attempts))
        if len(attempts) > 1:
            retried += 1
        if isinstance(res, ExhaustedRetries):
            exhausted += 1
            continue
        if isinstance(res, PoolError):
            errors += 1
            log.warning("bench request %s: %s", req.request_id, res)
            continue
        succeeded += 1
        direct = apply_tool(req.state, env.tool(req.tool_id), env)
        if not direct.same_as(res.state):
            mismatches += 1
    log.info("pool bench: %d requests, %d retried, %d exhausted in %.2fs", n_requests, retried, exhausted, elapsed)
    return BenchReport(
        requests=n_requests,
        settled=succeeded + exhausted,
        retried=retried,
        exhausted=exhausted,
        max_attempts_seen=max_seen,
        mismatches=mismatches,
        stats=pool.stats(),
        elapsed_s=elapsed,
        succeeded=succeeded,
        errors=errors,
    )
