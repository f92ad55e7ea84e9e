"""
Caching layer for the SPFA toolkit
In-memory LRU cache used to reuse population models across simulation cells
"""

import hashlib
import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from functools import wraps
from typing import Any, Callable, Optional

from config import config

logger = logging.getLogger(__name__)


@dataclass
class CacheEntry:
    """Cache entry with metadata"""

    key: str
    value: Any
    timestamp: float
    ttl: Optional[float]
    hit_count: int = 0

    def expired(self, now: float) -> bool:
        return self.ttl is not None and now - self.timestamp > self.ttl


class MemoryCache:
    """Thread-safe in-memory LRU cache with optional per-entry TTL"""

    def __init__(self, max_size: int = config.CACHE_SIZE):
        if max_size < 1:
            raise ValueError("max_size must be at least 1")
        self.max_size = max_size
        self.cache: "OrderedDict[str, CacheEntry]" = OrderedDict()
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def get(self, key: str) -> Optional[Any]:
        """Get value from cache"""
        with self._lock:
            entry = self.cache.get(key)
            if entry is None:
                self.misses += 1
                return None
            if entry.expired(time.time()):
                del self.cache[key]
                self.misses += 1
                return None
            self.cache.move_to_end(key)
            entry.hit_count += 1
            self.hits += 1
            return entry.value

    def set(self, key: str, value: Any, ttl: Optional[float] = None) -> None:
        """Set value in cache"""
        with self._lock:
            if key in self.cache:
                del self.cache[key]
            elif len(self.cache) >= self.max_size:
                lru_key, _ = self.cache.popitem(last=False)
                logger.debug(f"Evicted {lru_key} from cache")
            self.cache[key] = CacheEntry(key=key, value=value, timestamp=time.time(), ttl=ttl)

    def delete(self, key: str) -> None:
        """Delete key from cache"""
        with self._lock:
            self.cache.pop(key, None)

    def clear(self) -> None:
        """Clear all cache"""
        with self._lock:
            self.cache.clear()
            self.hits = 0
            self.misses = 0

    def __len__(self) -> int:
        return len(self.cache)

    def get_stats(self) -> dict:
        """Get cache statistics"""
        with self._lock:
            requests = self.hits + self.misses
            return {
                "size": len(self.cache),
                "max_size": self.max_size,
                "hits": self.hits,
                "misses": self.misses,
                "hit_rate": (self.hits / requests) * 100 if requests else 0.0,
                "keys": list(self.cache.keys()),
            }


def cache_key(*args, **kwargs) -> str:
    """Generate cache key from function arguments"""
    key_parts = [repr(arg) for arg in args]
    key_parts.extend(f"{k}={v!r}" for k, v in sorted(kwargs.items()))
    key_string = ":".join(key_parts)
    return hashlib.md5(key_string.encode()).hexdigest()


def cached(
    ttl: Optional[float] = None,
    key_prefix: str = "",
    cache: Optional[MemoryCache] = None,
) -> Callable:
    """Decorator for caching function results; the cache is exposed as func._cache"""

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            key = f"{key_prefix}:{func.__name__}:{cache_key(*args, **kwargs)}"

            cached_value = wrapper._cache.get(key)
            if cached_value is not None:
                return cached_value

            result = func(*args, **kwargs)
            wrapper._cache.set(key, result, ttl)
            return result

        wrapper._cache = cache or MemoryCache()
        return wrapper

    return decorator
