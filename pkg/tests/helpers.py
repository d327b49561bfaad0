"""Shared test utilities: independent oracles and a ring-thread harness."""

import threading

import numpy as np

from floodfill.transport import make_inproc_ring


def conv3d_reference(x, kernel):
    """Direct nested-loop SAME convolution; the independent oracle for conv3d.

    Deliberately naive: walks every output voxel and every kernel tap.
    """
    w, bias = kernel.weights, kernel.bias
    c_out, c_in = w.shape[0], w.shape[1]
    zd, yd, xd = x.shape[1:]
    out = np.zeros((c_out, zd, yd, xd), dtype=np.result_type(x, w))
    for co in range(c_out):
        for z in range(zd):
            for y in range(yd):
                for xx in range(xd):
                    acc = bias[co]
                    for dz in range(3):
                        for dy in range(3):
                            for dx in range(3):
                                iz, iy, ix = z + dz - 1, y + dy - 1, xx + dx - 1
                                if 0 <= iz < zd and 0 <= iy < yd and 0 <= ix < xd:
                                    for ci in range(c_in):
                                        acc += w[co, ci, dz, dy, dx] * x[ci, iz, iy, ix]
                    out[co, z, y, xx] = acc
    return out


def run_ring(p, fn):
    """Run fn(group, rank) on p ranks over an inproc ring; returns the results.

    On any rank's failure every group is closed (to unblock peers) and the
    first exception is re-raised.
    """
    groups = make_inproc_ring(p)
    results = [None] * p
    errors = []

    def runner(rank):
        try:
            results[rank] = fn(groups[rank], rank)
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)
            for g in groups:
                g.close()

    threads = [threading.Thread(target=runner, args=(r,)) for r in range(p)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def rel_err(a, b):
    """Global relative difference used by the equivalence criteria."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)
