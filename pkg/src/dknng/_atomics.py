"""Lock-free primitives usable from numba-compiled kernels."""

from numba import types
from numba.core import cgutils
from numba.extending import intrinsic


def _element_pointer(context, builder, aryty, ary_val, idx_val):
    ary = context.make_array(aryty)(context, builder, ary_val)
    return cgutils.get_item_pointer(context, builder, aryty, ary, [idx_val], wraparound=False)


@intrinsic
def atomic_cas(typingctx, arr, idx, expected, desired):
    """Compare-and-swap ``arr[idx]`` (1-D int32); returns the value seen before the swap."""
    if not isinstance(arr, types.Array) or arr.dtype != types.int32 or arr.ndim != 1:
        return None
    sig = types.int32(arr, idx, expected, desired)

    def codegen(context, builder, sig, args):
        ptr = _element_pointer(context, builder, sig.args[0], args[0], args[1])
        exp = context.cast(builder, args[2], sig.args[2], types.int32)
        des = context.cast(builder, args[3], sig.args[3], types.int32)
        res = builder.cmpxchg(ptr, exp, des, "seq_cst", "seq_cst")
        return builder.extract_value(res, 0)

    return sig, codegen


@intrinsic
def atomic_add(typingctx, arr, idx, value):
    """Atomic fetch-and-add on ``arr[idx]`` (1-D int32); returns the previous value."""
    if not isinstance(arr, types.Array) or arr.dtype != types.int32 or arr.ndim != 1:
        return None
    sig = types.int32(arr, idx, value)

    def codegen(context, builder, sig, args):
        ptr = _element_pointer(context, builder, sig.args[0], args[0], args[1])
        val = context.cast(builder, args[2], sig.args[2], types.int32)
        return builder.atomic_rmw("add", ptr, val, "seq_cst")

    return sig, codegen
