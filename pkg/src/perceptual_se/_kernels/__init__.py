"""Hot loops: CTC forward-backward and edit-distance alignment.

The compiled ``_core`` extension is used when importable; otherwise (or
with ``PERCEPTUAL_SE_PURE=1``) the numpy fallback is selected.
"""
import os

from . import fallback
from .fallback import CTCLengthError, ctc_required_frames

BACKEND = "python"
if os.environ.get("PERCEPTUAL_SE_PURE") != "1":
    try:
        from . import _core as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = fallback
else:
    _impl = fallback

ctc_forward_backward = _impl.ctc_forward_backward
edit_alignment = _impl.edit_alignment

__all__ = ["BACKEND", "CTCLengthError", "ctc_forward_backward", "ctc_required_frames",
           "edit_alignment", "fallback"]
