import os
import random
import threading

import pytest

from cfagent.core import ArtifactStore, FixedClock, SystemClock
from cfagent.stubs import Toolbox, stub_schemas
from cfagent.toolwire import (
    CyclicFallback,
    Dispatcher,
    DuplicateName,
    FairSemaphore,
    IncompatibleFallback,
    ToolDescriptor,
    ToolRegistry,
    ToolSchema,
    UnknownTool,
    WorkerPool,
)


def _descriptor(name: str, endpoint: str | None = None, **kwargs) -> ToolDescriptor:
    schema = ToolSchema.from_dict(stub_schemas()[name.split("#")[0]])
    return ToolDescriptor(name=name, schema=schema, endpoint=endpoint or f"stub:{name}", **kwargs)


def _dispatcher(tmp_path, names=("classify", "gen_image"), env_extra=None, **kwargs):
    registry = ToolRegistry()
    for name in names:
        registry.register(_descriptor(name))
    registry.finalize()
    env = dict(os.environ)
    env.update(env_extra or {})
    pool = kwargs.pop("pool", None) or WorkerPool({"cpu": 8, "gpu": 2})
    d = Dispatcher(registry, pool, store_root=str(tmp_path / "store"),
                   stub_env=env, **kwargs)
    return registry, d


class TestRegistry:
    def test_duplicate_name(self):
        registry = ToolRegistry()
        registry.register(_descriptor("classify"))
        with pytest.raises(DuplicateName):
            registry.register(_descriptor("classify"))

    def test_cyclic_fallback(self):
        registry = ToolRegistry()
        registry.register(_descriptor("edit_a", fallbacks=("edit_b",)))
        registry.register(_descriptor("edit_b", fallbacks=("edit_a",)))
        with pytest.raises(CyclicFallback):
            registry.finalize()

    def test_count_after_registering(self):
        registry = ToolRegistry()
        for name in ("classify", "edit_a", "edit_b"):
            registry.register(_descriptor(name))
        assert registry.names() == ["classify", "edit_a", "edit_b"]

    def test_incompatible_fallback_rejected(self):
        registry = ToolRegistry()
        registry.register(_descriptor("edit_a", fallbacks=("classify",)))
        registry.register(_descriptor("classify"))
        with pytest.raises(IncompatibleFallback):
            registry.finalize()

    def test_unknown_tool(self):
        with pytest.raises(UnknownTool):
            ToolRegistry().get("nope")


class TestFairSemaphore:
    def test_capacity_enforced_fifo(self):
        sem = FairSemaphore(2)
        active = []
        peak = []
        lock = threading.Lock()

        def worker(i):
            with sem:
                with lock:
                    active.append(i)
                    peak.append(len(active))
                threading.Event().wait(0.01)
                with lock:
                    active.remove(i)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(20)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert max(peak) <= 2


class TestInvoke:
    def test_happy_path(self, tmp_path):
        store = ArtifactStore(tmp_path / "store")
        ref = Toolbox(store).gen_image(seed=3, width=64, height=64, lesion_cx=20,
                                       lesion_cy=20, lesion_r=8, lesion_a=0.7)["image"]
        _, dispatcher = _dispatcher(tmp_path)
        try:
            result = dispatcher.invoke("classify", {"image": ref})
            assert result.ok and 0.0 <= result.payload["score"] <= 1.0
        finally:
            dispatcher.close()

    def test_domain_error_passthrough(self, tmp_path):
        _, dispatcher = _dispatcher(tmp_path)
        try:
            result = dispatcher.invoke("classify", {"image": "@" + "12" * 32})
            assert not result.ok
            assert result.error["code"] == "unknown_artifact"
        finally:
            dispatcher.close()

    def test_timeout_and_slot_release(self, tmp_path):
        registry = ToolRegistry()
        registry.register(ToolDescriptor(
            name="classify", schema=ToolSchema.from_dict(stub_schemas()["classify"]),
            endpoint="stub:classify", timeout_ms=300, capacity_class="cpu",
        ))
        registry.finalize()
        env = dict(os.environ, CFAGENT_STUB_DELAY_MS="1500")
        pool = WorkerPool({"cpu": 1})
        dispatcher = Dispatcher(registry, pool, store_root=str(tmp_path / "store"), stub_env=env)
        try:
            result = dispatcher.invoke("classify", {"image": "@00"})
            assert not result.ok and result.error["code"] == "timeout"
            # slot released: a second call does not deadlock on the 1-slot pool
            result2 = dispatcher.invoke("classify", {"image": "@00"})
            assert not result2.ok and result2.error["code"] == "timeout"
        finally:
            dispatcher.close()

    def test_concurrency_bounded_by_capacity(self, tmp_path):
        """100 concurrent invokes, gpu capacity 2: the server-side watermark
        must saturate at exactly 2."""
        registry = ToolRegistry()
        registry.register(ToolDescriptor(
            name="edit_b", schema=ToolSchema.from_dict(stub_schemas()["edit_b"]),
            endpoint="stub:edit_b", timeout_ms=10000, capacity_class="gpu",
        ))
        registry.finalize()
        env = dict(os.environ, CFAGENT_STUB_DELAY_MS="20")
        pool = WorkerPool({"gpu": 2})
        dispatcher = Dispatcher(registry, pool, store_root=str(tmp_path / "store"), stub_env=env)
        try:
            results = []

            def call():
                results.append(dispatcher.invoke("edit_b", {"image": "@00", "cx": 0,
                                                            "cy": 0, "r": 0, "strength": 0.5}))

            threads = [threading.Thread(target=call) for _ in range(100)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert len(results) == 100
            stats = dispatcher.probe_server("edit_b", "__stats__")["result"]
            assert stats["calls"] == 100
            assert stats["max_in_flight"] == 2
        finally:
            dispatcher.close()


class TestFallback:
    def _editors(self, tmp_path, env_extra=None, cooldown_ms=60000):
        registry = ToolRegistry()
        registry.register(_descriptor("edit_a", fallbacks=("edit_b",)))
        registry.register(_descriptor("edit_b"))
        registry.register(_descriptor("gen_image"))
        registry.finalize()
        env = dict(os.environ)
        env.update(env_extra or {})
        dispatcher = Dispatcher(
            registry, WorkerPool({"cpu": 8, "gpu": 4}),
            store_root=str(tmp_path / "store"), stub_env=env, cooldown_ms=cooldown_ms,
        )
        ref = None
        result = dispatcher.invoke("gen_image", {
            "seed": 3, "width": 64, "height": 64, "lesion_cx": 20, "lesion_cy": 20,
            "lesion_r": 8, "lesion_a": 0.7,
        })
        assert result.ok
        ref = result.payload["image"]
        return dispatcher, ref

    def test_fault_schedule_kill_after_3(self, tmp_path):
        """edit_a dies on call 4; calls 4..N must all be served by edit_b."""
        dispatcher, ref = self._editors(tmp_path, env_extra={"CFAGENT_STUB_DIE_AFTER_EDIT_A": "3"})
        args = {"image": ref, "cx": 20, "cy": 20, "r": 8, "strength": 0.5}
        served = []
        try:
            for _ in range(10):
                result, by = dispatcher.invoke_with_fallback("edit_a", args)
                assert result.ok, result.error
                served.append(by)
        finally:
            dispatcher.close()
        assert served[:3] == ["edit_a"] * 3
        assert served[3:] == ["edit_b"] * 7

    def test_both_down_exhaustion(self, tmp_path):
        registry = ToolRegistry()
        for name, fb in (("edit_a", ("edit_b",)), ("edit_b", ())):
            registry.register(ToolDescriptor(
                name=name, schema=ToolSchema.from_dict(stub_schemas()[name]),
                endpoint=f"stub:{name}", timeout_ms=200, capacity_class="gpu", fallbacks=fb,
            ))
        registry.finalize()
        env = dict(os.environ, CFAGENT_STUB_DELAY_MS="2000")
        dispatcher = Dispatcher(registry, WorkerPool({"gpu": 4}),
                                store_root=str(tmp_path / "store"), stub_env=env)
        try:
            result, by = dispatcher.invoke_with_fallback(
                "edit_a", {"image": "@00", "cx": 0, "cy": 0, "r": 0, "strength": 0.1})
            assert by is None
            assert result.error["code"] == "all_fallbacks_failed"
            assert "edit_a" in result.error["message"] and "edit_b" in result.error["message"]
        finally:
            dispatcher.close()

    def test_served_by_deterministic_across_runs(self, tmp_path):
        sequences = []
        for run in range(2):
            dispatcher, ref = self._editors(tmp_path / f"run{run}",
                                            env_extra={"CFAGENT_STUB_DIE_AFTER_EDIT_A": "3"})
            args = {"image": ref, "cx": 20, "cy": 20, "r": 8, "strength": 0.5}
            served = []
            try:
                for _ in range(8):
                    _, by = dispatcher.invoke_with_fallback("edit_a", args)
                    served.append(by)
            finally:
                dispatcher.close()
            sequences.append(served)
        assert sequences[0] == sequences[1]


class TestHealth:
    def _flaky(self, tmp_path, threshold=3, cooldown_ms=60000, timeout_ms=120):
        registry = ToolRegistry()
        registry.register(ToolDescriptor(
            name="classify", schema=ToolSchema.from_dict(stub_schemas()["classify"]),
            endpoint="stub:classify", timeout_ms=timeout_ms, capacity_class="cpu",
        ))
        registry.finalize()
        env = dict(os.environ, CFAGENT_STUB_DELAY_MS="1000")
        return Dispatcher(registry, WorkerPool({"cpu": 4}),
                          store_root=str(tmp_path / "store"), stub_env=env,
                          failure_threshold=threshold, cooldown_ms=cooldown_ms)

    def test_threshold_marks_unhealthy(self, tmp_path):
        dispatcher = self._flaky(tmp_path)
        try:
            for _ in range(3):
                assert dispatcher.invoke("classify", {"image": "@00"}).error["code"] == "timeout"
            health = dispatcher.health("classify")
            assert health["healthy"] is False
            assert health["consecutive_failures"] == 3
            # within cooldown: gated without sending a frame
            assert dispatcher.invoke("classify", {"image": "@00"}).error["code"] == "unhealthy"
        finally:
            dispatcher.close()

    def test_success_resets_counter(self, tmp_path):
        registry = ToolRegistry()
        registry.register(ToolDescriptor(
            name="classify", schema=ToolSchema.from_dict(stub_schemas()["classify"]),
            endpoint="stub:classify", timeout_ms=150, capacity_class="cpu",
        ))
        registry.finalize()
        dispatcher = Dispatcher(registry, WorkerPool({"cpu": 4}),
                                store_root=str(tmp_path / "store"),
                                stub_env=dict(os.environ), failure_threshold=3)
        try:
            # two domain errors are not transport faults; then a clean call
            dispatcher.invoke("classify", {"image": "@" + "ab" * 32})
            assert dispatcher.health("classify")["healthy"] is True
        finally:
            dispatcher.close()

    def test_state_machine_matches_simulation(self, tmp_path):
        """Randomized fault sequences: dispatcher health transitions equal a
        brute-force simulation of threshold-3 + cooldown rules."""
        from cfagent.toolwire import _Health

        rng = random.Random(5)
        for _ in range(50):
            threshold = rng.randint(1, 4)
            cooldown = rng.randint(1, 20)
            clock_now = 0
            state = _Health()

            class FakeClock:
                def now_ms(self):
                    return clock_now

            dispatcher = Dispatcher.__new__(Dispatcher)
            dispatcher.clock = FakeClock()
            dispatcher.failure_threshold = threshold
            dispatcher.cooldown_ms = cooldown
            dispatcher._health = {"t": state}
            dispatcher._lock = threading.Lock()

            sim_failures = 0
            sim_healthy = True
            sim_last_probe = None
            for _step in range(60):
                clock_now += rng.randint(0, 10)
                event = rng.random() < 0.5  # True -> fault
                # simulate gate
                if not sim_healthy:
                    gated = sim_last_probe is not None and clock_now - sim_last_probe < cooldown
                    assert (dispatcher._gate_unhealthy("t") == "reject") == gated
                    if gated:
                        continue
                    sim_last_probe = clock_now
                else:
                    assert dispatcher._gate_unhealthy("t") == "ok"
                dispatcher._record("t", transport_fault=event)
                if event:
                    sim_failures += 1
                    if sim_failures >= threshold and sim_healthy:
                        sim_healthy = False
                        sim_last_probe = clock_now
                else:
                    sim_failures = 0
                    sim_healthy = True
                    sim_last_probe = None
                assert state.healthy == sim_healthy
                assert state.consecutive_failures == sim_failures
