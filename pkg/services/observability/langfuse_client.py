import os
import logging

# SDK may be missing or unconfigured
try:
    from langfuse.decorators import observe as _observe
except ImportError:
    try:
        from langfuse import observe as _observe
    except ImportError:
        _observe = None

# Suppress langfuse auth errors if no key
if not os.getenv("LANGFUSE_PUBLIC_KEY"):
    logging.getLogger("langfuse").setLevel(logging.CRITICAL)


def observe(*args, **kwargs):
    """Trace a coarse pipeline step (train, evaluate, grad_cam, ...).

    Inputs and outputs are not captured: they are numpy arrays and models.
    """
    if _observe and os.getenv("LANGFUSE_PUBLIC_KEY"):
        kwargs.setdefault("capture_input", False)
        kwargs.setdefault("capture_output", False)
        return _observe(*args, **kwargs)

    def decorator(func):
        return func
    return decorator


def flush():
    # langfuse flushes from its background thread; force it before a CLI exits
    if not _observe or not os.getenv("LANGFUSE_PUBLIC_KEY"):
        return
    try:
        from langfuse import get_client
        get_client().flush()
    except ImportError:
        try:
            from langfuse.decorators import langfuse_context
            langfuse_context.flush()
        except ImportError:
            pass
