import random

from harness import serial_trial
from shardgraph.crash import crash_trial, recover


def test_clean_run_recovers_everything(tmp_path):
    r = crash_trial(tmp_path / "s", n=200)
    assert not r.killed and r.acked == 200
    assert r.recovered.k == 200 and r.ok


def test_kill_before_first_ack(tmp_path):
    r = crash_trial(tmp_path / "s", n=200, kill_at=-1)
    assert r.ok
    assert recover(tmp_path / "s").violations == []


def test_random_kills_recover_a_prefix(tmp_path):
    rng = random.Random(7)
    for i in range(8):
        r = crash_trial(tmp_path / f"s{i}", n=400, kill_at=rng.randrange(0, 400),
                        jitter=rng.random() * 0.02, seed=i)
        assert r.ok, (r.acked, r.recovered)


def test_restart_after_kill_continues(tmp_path):
    first = crash_trial(tmp_path / "s", n=300, kill_at=100, seed=1)
    assert first.ok
    second = crash_trial(tmp_path / "s", n=300, seed=2)
    assert second.recovered.k == 300 and second.ok


def test_single_writer_serial_equivalence(tmp_path):
    r = serial_trial(tmp_path / "kv", producers=4, per_producer=200)
    assert r.violations == []
    assert r.reads > 0
