"""
Global stores and thread locks for shared state
"""
import hashlib
import logging
import threading

logger = logging.getLogger(__name__)

# Ground-truth meshes keyed by (shape, resolution, iso)
gt_mesh_store = {}
gt_mesh_lock = threading.Lock()


def generate_mesh_cache_key(shape_hash, params):
    """Generate cache key for a ground-truth mesh extraction"""
    param_str = "_".join(f"{k}:{v}" for k, v in sorted(params.items())) if params else "default"
    return hashlib.md5(f"{shape_hash}_{param_str}".encode()).hexdigest()


def get_or_build(key, build):
    """Return the cached mesh for key, building it outside the lock on a miss"""
    with gt_mesh_lock:
        if key in gt_mesh_store:
            logger.debug(f"Using cached ground-truth mesh {key[:8]}")
            return gt_mesh_store[key]
    mesh = build()
    with gt_mesh_lock:
        gt_mesh_store.setdefault(key, mesh)
        logger.debug(f"Cached ground-truth mesh {key[:8]}")
        return gt_mesh_store[key]


def clear_stores():
    with gt_mesh_lock:
        gt_mesh_store.clear()
