import concurrent.futures
import functools
import tqdm

_EXECUTORS = {
    "thread": concurrent.futures.ThreadPoolExecutor,
    "process": concurrent.futures.ProcessPoolExecutor,
}


def parallelize_inputs(func):
    """Decorator to fan a function out over a list of inputs.

    The decorated function accepts the extra keyword arguments ``num_workers``
    (default 1), ``backend`` ("thread" or "process") and ``progress``
    (default True). Results are returned in input order whatever the
    completion order.
    """

    @functools.wraps(func)
    def wrapper(inputs, *args, **kwargs):
        num_workers = kwargs.pop("num_workers", 1)
        backend = kwargs.pop("backend", "thread")
        progress = kwargs.pop("progress", True)

        # If only one, run in serial mode
        if not isinstance(inputs, list):
            return func(inputs, *args, **kwargs)

        if backend not in _EXECUTORS:
            raise ValueError(f"Unknown backend {backend!r}")

        if num_workers > 1:
            with _EXECUTORS[backend](max_workers=num_workers) as exc:
                # workers receive the wrapper, which pickles by its qualified name
                futures = [exc.submit(wrapper, i, *args, **kwargs) for i in inputs]
                results = [
                    r.result()
                    for r in tqdm.tqdm(futures, total=len(futures), disable=not progress)
                ]
        else:
            results = [
                func(i, *args, **kwargs) for i in tqdm.tqdm(inputs, disable=not progress)
            ]
        return results

    return wrapper
