import logging
from collections import defaultdict


class EventEmitter:
    """Synchronous publish/subscribe hooks for training progress."""

    def __init__(self):
        self._events = defaultdict(list)

    def on(self, event_name, func=None):
        def decorator(f):
            self._events[event_name].append(f)
            return f

        if func:
            return decorator(func)
        return decorator

    def emit(self, event_name, *args, **kwargs):
        for callback in self._events[event_name]:
            try:
                callback(*args, **kwargs)
            except Exception as e:
                logging.error(f"Error in '{event_name}' listener {callback.__name__}: {e}")
