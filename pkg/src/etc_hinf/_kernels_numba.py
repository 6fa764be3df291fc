"""numba-compiled twins of the pure-numpy kernels.

The source of truth lives in :mod:`etc_hinf._kernels_numpy`; this module
just applies ``@njit`` to the same functions so both backends cannot drift.
"""

from numba import njit

from . import _kernels_numpy as _ref

_fro = njit(cache=True)(_ref._fro)

# njit closes over the module-level _fro, so rebind the globals the compiled
# functions see by compiling from source objects that reference our jitted _fro.


def _jit(pyfunc):
    g = dict(pyfunc.__globals__)
    g["_fro"] = _fro
    import types

    clone = types.FunctionType(pyfunc.__code__, g, pyfunc.__name__,
                               pyfunc.__defaults__, pyfunc.__closure__)
    return njit(cache=True)(clone)


pbar_loop = _jit(_ref.pbar_loop)
plq_loop = _jit(_ref.plq_loop)
m_ladder_loop = _jit(_ref.m_ladder_loop)
