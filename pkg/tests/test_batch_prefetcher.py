import pytest

from services.batch_prefetcher import BatchPrefetcher


@pytest.mark.parametrize("depth", [0, 1, 3])
def test_order_is_preserved(depth):
    with BatchPrefetcher(iter(range(50)), depth=depth) as batches:
        assert list(batches) == list(range(50))


def test_producer_error_reaches_consumer():
    def producer():
        yield 1
        raise RuntimeError("bad batch")

    received = []
    with pytest.raises(RuntimeError, match="bad batch"):
        with BatchPrefetcher(producer(), depth=2) as batches:
            for item in batches:
                received.append(item)
    assert received == [1]


def test_early_exit_stops_the_thread():
    prefetcher = BatchPrefetcher(iter(range(1000)), depth=2)
    for item in prefetcher:
        if item == 3:
            break
    prefetcher.close()
    assert prefetcher._thread is None
