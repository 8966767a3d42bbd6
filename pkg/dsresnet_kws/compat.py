import numpy as np

try:
    from numpy.lib.stride_tricks import sliding_window_view
except ImportError:
    from numpy.lib.stride_tricks import as_strided

    def sliding_window_view(x, window_shape, axis=None):
        # 1-d only; enough for framing audio on numpy < 1.20
        if axis not in (None, -1, 0) or x.ndim != 1:
            raise NotImplementedError('sliding_window_view fallback is 1-d only')
        count = x.shape[0] - window_shape + 1
        return as_strided(x, shape=(count, window_shape),
                          strides=(x.strides[0], x.strides[0]),
                          writeable=False)


def frame_signal(signal, frame_length, hop_length):
    """
    Returns a (frames, frame_length) read-only view over a 1-d signal.
    """
    windows = sliding_window_view(signal, frame_length)
    return windows[::hop_length]


def as_float64(array):
    return np.ascontiguousarray(array, dtype=np.float64)
