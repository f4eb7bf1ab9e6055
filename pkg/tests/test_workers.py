import threading

import pytest

from anomaly_scanner.workers import ProbeWorkerPool


def test_processes_every_item_once():
    seen = []
    lock = threading.Lock()

    def handler(item):
        with lock:
            seen.append(item)

    pool = ProbeWorkerPool(concurrency=4)
    pool.run(list(range(100)), handler)

    assert sorted(seen) == list(range(100))
    assert pool.processed == 100
    assert not pool.running


def test_single_worker_keeps_order():
    seen = []
    ProbeWorkerPool(concurrency=1).run([3, 1, 2], seen.append)
    assert seen == [3, 1, 2]


def test_empty_items():
    pool = ProbeWorkerPool(concurrency=3)
    pool.run([], lambda item: None)
    assert pool.processed == 0


def test_first_failure_stops_and_reraises():
    seen = []

    def handler(item):
        if item == 2:
            raise RuntimeError("boom")
        seen.append(item)

    pool = ProbeWorkerPool(concurrency=1)
    with pytest.raises(RuntimeError, match="boom"):
        pool.run(list(range(10)), handler)

    assert seen == [0, 1]
    assert pool.stopped


def test_stop_from_handler():
    seen = []
    pool = ProbeWorkerPool(concurrency=1)

    def handler(item):
        seen.append(item)
        if item == 4:
            pool.stop()

    pool.run(list(range(10)), handler)
    assert seen == [0, 1, 2, 3, 4]


def test_rejects_zero_concurrency():
    with pytest.raises(ValueError):
        ProbeWorkerPool(concurrency=0)
