import functools
import random
import time

from handlers.logger import logger


def retry_with_exponential_backoff(
        retry_on=(Exception,),
        max_retries: int = 5,
        initial_delay: float = 0.2,
        max_delay: float = 5.0,
        backoff_factor: float = 2.0,
        jitter: float = 0.1,
        sleep=time.sleep,
):
    """
    Retry decorator with exponential backoff for transiently busy resources

    Args:
        retry_on: Exception types that trigger a retry; anything else propagates
        max_retries: Maximum number of retries
        initial_delay: Initial delay in seconds
        max_delay: Maximum delay in seconds
        backoff_factor: Factor to increase delay with each retry
        jitter: Random jitter factor to add to delay
        sleep: Sleep function (injectable for tests)
    """

    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            retries = 0
            delay = initial_delay

            while True:
                try:
                    return func(*args, **kwargs)
                except retry_on as e:
                    if retries >= max_retries:
                        raise

                    jitter_amount = delay * jitter * random.uniform(-1, 1)
                    sleep_time = min(max(0.0, delay + jitter_amount), max_delay)

                    logger.warning(
                        f"{func.__name__} busy ({e}). Retrying in {sleep_time:.2f} seconds. "
                        f"Retry {retries + 1}/{max_retries}"
                    )

                    sleep(sleep_time)
                    retries += 1
                    delay = min(delay * backoff_factor, max_delay)

        return wrapper

    return decorator
