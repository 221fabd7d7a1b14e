import logging
from concurrent.futures import ThreadPoolExecutor

from config.settings import THREADS

logger = logging.getLogger(__name__)


def run_replicas(job, count, threads=THREADS, label='replicas'):
    """Run job(index) for index in [0, count) and return results in index order.

    Each job owns its random stream (stream_id = index), so the results do
    not depend on the number of threads.
    """
    if count < 1:
        raise ValueError(f"need at least one replica, got {count}")
    step = max(1, count // 10)

    def tracked(index):
        result = job(index)
        if (index + 1) % step == 0:
            logger.info(f"[Runner] {label}: {index + 1}/{count}")
        return result

    if threads <= 1:
        return [tracked(i) for i in range(count)]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(tracked, range(count)))
