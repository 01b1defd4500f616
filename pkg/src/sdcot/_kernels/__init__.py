"""Hot inner loops: FPS, ball query, rotated-box IoU, NMS and grouped max-pool.

The compiled ``_core`` extension is used when it is importable; otherwise
the pure-python ``_fallback`` module provides the same functions.
``BACKEND`` names the active implementation and :func:`backends` returns
every importable one (used by the tests and the benchmark).
"""
from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_active = _core if _core is not None else _fallback
BACKEND = "compiled" if _core is not None else "python"

fps = _active.fps
ball_query = _active.ball_query
box_iou = _active.box_iou
iou_matrix = _active.iou_matrix
nms = _active.nms
group_max = _active.group_max


def backends():
    out = {"python": _fallback}
    if _core is not None:
        out["compiled"] = _core
    return out
