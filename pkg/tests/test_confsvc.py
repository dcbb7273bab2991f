import random
import time

import pytest

from ckptsync.confsvc import (
    ROLE_BACKUP,
    ROLE_PRIMARY,
    STATE_FAILING_OVER,
    STATE_HEALTHY,
    ConfClient,
    ConfService,
    ViewTracker,
)
from ckptsync.errors import DuplicateNode, NotChosenNode


def tracker():
    return ViewTracker(heartbeat_interval=0.1, miss_threshold=3)


class TestViewTracker:
    def test_register_primary_then_backup(self):
        t = tracker()
        t.register("P", ROLE_PRIMARY, "127.0.0.1:7001", now=0.0)
        snap = t.register("B", ROLE_BACKUP, "127.0.0.1:7002", now=0.0)
        assert snap.primary_id == "P"
        assert snap.backups == ["B"]
        assert snap.primary_id not in snap.backups

    def test_second_primary_rejected(self):
        t = tracker()
        t.register("P", ROLE_PRIMARY, "a", now=0.0)
        with pytest.raises(DuplicateNode):
            t.register("Q", ROLE_PRIMARY, "b", now=0.0)

    def test_reregister_resets_heartbeat_clock(self):
        t = tracker()
        t.register("P", ROLE_PRIMARY, "a", now=0.0)
        t.on_heartbeat("P", 1, 0, now=0.05)
        t.register("P", ROLE_PRIMARY, "a", now=5.0)
        assert t.tick(now=5.1) is None
        assert t.nodes["P"].hb_seq == 0

    def test_failover_fires_in_detection_window(self):
        # abrupt silence: detection latency lands in (K, K+1] heartbeat intervals
        t = tracker()
        t.register("P", ROLE_PRIMARY, "a", now=0.0)
        t.register("B", ROLE_BACKUP, "b", now=0.0)
        last = 1.0
        now, hb_seq = 0.0, 0
        while now <= last:
            hb_seq += 1
            t.on_heartbeat("P", hb_seq, 0, now=now)
            now += 0.1
        decision = None
        clock = last
        while decision is None:
            clock += 0.01
            decision = t.tick(now=clock)
        latency = clock - last
        assert 0.3 < latency <= 0.4, latency
        assert decision.new_primary == "B"
        assert t.state == STATE_FAILING_OVER

    def test_detection_window_property_random_tick_cadence(self):
        for seed in range(20):
            rng = random.Random(seed)
            t = tracker()
            t.register("P", ROLE_PRIMARY, "a", now=0.0)
            t.register("B", ROLE_BACKUP, "b", now=0.0)
            last = rng.uniform(0.5, 2.0)
            t.on_heartbeat("P", 1, 0, now=last)
            clock = last
            decision = None
            while decision is None:
                clock += rng.uniform(0.001, 0.1)  # tick cadence <= one interval
                decision = t.tick(now=clock)
            assert 0.3 < clock - last <= 0.4 + 1e-9, (seed, clock - last)

    def test_healthy_heartbeats_never_fail_over(self):
        t = tracker()
        t.register("P", ROLE_PRIMARY, "a", now=0.0)
        t.register("B", ROLE_BACKUP, "b", now=0.0)
        now = 0.0
        for i in range(50):
            now += 0.1
            t.on_heartbeat("P", i + 1, 0, now=now)
            assert t.tick(now=now + 0.05) is None

    def test_stale_heartbeat_after_promotion_ignored(self):
        t = tracker()
        t.register("P", ROLE_PRIMARY, "a", now=0.0)
        t.register("B", ROLE_BACKUP, "b", now=0.0)
        t.on_heartbeat("P", 1, 0, now=0.0)
        assert t.tick(now=1.0) is not None
        t.complete_failover("B", "b2")
        view = t.view_number
        assert t.on_heartbeat("P", 2, 0, now=1.1) is False
        assert t.view_number == view
        assert t.primary_id == "B"

    def test_view_number_increments_once_per_promotion(self):
        t = tracker()
        t.register("P", ROLE_PRIMARY, "a", now=0.0)
        t.register("B", ROLE_BACKUP, "b", now=0.0)
        v0 = t.view_number
        t.on_heartbeat("P", 1, 0, now=0.0)
        t.tick(now=1.0)
        snap = t.complete_failover("B")
        assert snap.view_number == v0 + 1
        assert snap.state == STATE_HEALTHY

    def test_complete_failover_only_from_chosen(self):
        t = tracker()
        t.register("P", ROLE_PRIMARY, "a", now=0.0)
        t.register("B", ROLE_BACKUP, "b", now=0.0)
        t.register("C", ROLE_BACKUP, "c", now=0.0)
        t.on_heartbeat("P", 1, 0, now=0.0)
        decision = t.tick(now=1.0)
        assert decision.new_primary == "B"
        with pytest.raises(NotChosenNode):
            t.complete_failover("C")
        with pytest.raises(NotChosenNode):
            t.complete_failover("P")

    def test_heartbeat_seq_must_increase(self):
        t = tracker()
        t.register("P", ROLE_PRIMARY, "a", now=0.0)
        t.on_heartbeat("P", 5, 0, now=0.0)
        t.on_heartbeat("P", 5, 0, now=9.0)  # replay: does not refresh the clock
        assert t.nodes["P"].last_heartbeat == 0.0

    def test_registration_state_machine_fuzz(self):
        # random register/heartbeat/tick/promote sequences keep invariants:
        # primary not in backups, view monotone, at most one primary
        for seed in range(10):
            rng = random.Random(200 + seed)
            t = tracker()
            now = 0.0
            views = [t.view_number]
            for _ in range(200):
                now += rng.uniform(0.01, 0.2)
                op = rng.random()
                node = rng.choice(["P", "B1", "B2"])
                try:
                    if op < 0.25:
                        role = ROLE_PRIMARY if node == "P" and t.primary_id in (None, "P") else ROLE_BACKUP
                        t.register(node, role, node.lower(), now=now)
                    elif op < 0.65 and node in t.nodes:
                        t.on_heartbeat(node, int(now * 1000), 0, now=now)
                    elif op < 0.9:
                        t.tick(now=now)
                    elif t.state == STATE_FAILING_OVER and t.chosen_id:
                        t.complete_failover(t.chosen_id)
                except DuplicateNode:
                    pass
                views.append(t.view_number)
                assert t.primary_id not in t.backups
            assert views == sorted(views)


class TestConfServiceWire:
    @pytest.fixture
    def svc(self):
        service = ConfService(("127.0.0.1", 0), heartbeat_interval=0.05, miss_threshold=3)
        service.serve_background()
        yield service
        service.shutdown()
        service.server_close()

    def test_register_heartbeat_who(self, svc):
        c = ConfClient(svc.address)
        snap = c.register("P", "primary", "127.0.0.1:9001")
        assert snap.primary_id == "P"
        c.register("B", "backup", "127.0.0.1:9002")
        still, view = c.heartbeat("P", 1, 7)
        assert still is True and view == 1
        healthy, snap = c.who_is_primary()
        assert healthy and snap.primary_addr == "127.0.0.1:9001"
        assert snap.backups == ["B"]
        c.close()

    def test_failover_roundtrip_over_wire(self, svc):
        c = ConfClient(svc.address)
        c.register("P", "primary", "addr-p")
        c.register("B", "backup", "addr-b")
        c.heartbeat("P", 1, 0)
        deadline = time.monotonic() + 2.0
        while time.monotonic() < deadline:
            healthy, snap = c.who_is_primary()
            if not healthy:
                break
            time.sleep(0.02)
        assert not healthy, "failover never initiated"
        assert snap.chosen_id == "B"
        newsnap = c.complete_failover("B", "addr-b-serving")
        assert newsnap.primary_id == "B"
        assert newsnap.primary_addr == "addr-b-serving"
        assert newsnap.view_number == 2
        healthy, snap = c.who_is_primary()
        assert healthy and snap.primary_id == "B"
        c.close()

    def test_trigger_compact_flag(self, svc):
        c = ConfClient(svc.address)
        assert c.trigger_compact() is True
        _, snap = c.who_is_primary()
        assert snap.compact_pending is True
        assert c.trigger_compact(done=True) is False
        _, snap = c.who_is_primary()
        assert snap.compact_pending is False
        c.close()

    def test_duplicate_primary_over_wire(self, svc):
        c = ConfClient(svc.address)
        c.register("P", "primary", "a")
        with pytest.raises(DuplicateNode):
            c.register("Q", "primary", "b")
        c.close()
