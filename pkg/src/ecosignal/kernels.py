"""Hot numeric kernels: car-following speed updates and lattice shortest path.

Each kernel has a numba ``@njit`` build and a pure-numpy/python fallback.
The active path is chosen at import time by the ``ECOSIGNAL_NUMBA``
environment variable ("0"/"false"/"off" disables JIT) and degrades
automatically when numba is not importable.  Both paths compute identical
expressions element-by-element, so results are bit-identical; the parity
tests and the ``ecosignal bench`` subcommand exercise both.
"""

from __future__ import annotations

import os
import time

import numpy as np

OPEN_ROAD_GAP = 1.0e12  # sentinel gap (m) for a vehicle with nothing ahead
NO_SETPOINT = 1.0e12  # sentinel commanded speed when no profile is active


def _env_flag(name: str, default: bool) -> bool:
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() not in ("0", "false", "off", "no")


_USE_NUMBA = _env_flag("ECOSIGNAL_NUMBA", True)
if _USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - mirror environments only
        numba = None
        _USE_NUMBA = False
else:
    numba = None


def numba_enabled() -> bool:
    """True when kernels run under numba JIT in this process."""
    return _USE_NUMBA


def _maybe_jit(fn):
    if _USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# Car-following speed update (Krauss safe-speed form)
# ---------------------------------------------------------------------------
#
# Per vehicle:
#   v_safe = lv + (max(0, gap - min_gap) - lv*tau) / (tau + (lv + v)/(2b))
#   v_des  = min(v + a*dt, vmax, v_safe, setpoint)
#   v_new  = max(0, v_des - sigma*a*dt*eta)
#   v_new  = min(v_new, max(0, gap)/dt)        # hard no-overlap clamp
#
# `gap` is the bumper-to-bumper distance to the leader (or a stop line /
# OPEN_ROAD_GAP sentinel); `eta` is the dawdling draw in [0,1], zero for
# vehicles that do not dawdle.  The final clamp guarantees the follower's
# displacement this step never exceeds the leader's rear as of the step
# start, which (leaders only move forward) makes overlap impossible.


def _car_following_loop(v, lead_v, gap, setpoint, eta,
                        a, b, sigma, tau, min_gap, vmax, dt):
    n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        ge = gap[i] - min_gap
        if ge < 0.0:
            ge = 0.0
        denom = tau + (lead_v[i] + v[i]) / (2.0 * b)
        vsafe = lead_v[i] + (ge - lead_v[i] * tau) / denom
        vdes = v[i] + a * dt
        if vmax < vdes:
            vdes = vmax
        if vsafe < vdes:
            vdes = vsafe
        if setpoint[i] < vdes:
            vdes = setpoint[i]
        vnew = vdes - (sigma * a * dt) * eta[i]
        if vnew < 0.0:
            vnew = 0.0
        g = gap[i]
        if g < 0.0:
            g = 0.0
        cap = g / dt
        if cap < vnew:
            vnew = cap
        out[i] = vnew
    return out


def car_following_update_numpy(v, lead_v, gap, setpoint, eta,
                               a, b, sigma, tau, min_gap, vmax, dt):
    """Vectorized fallback path; bit-identical to the JIT loop."""
    ge = np.maximum(gap - min_gap, 0.0)
    denom = tau + (lead_v + v) / (2.0 * b)
    vsafe = lead_v + (ge - lead_v * tau) / denom
    vdes = np.minimum(v + a * dt, vmax)
    vdes = np.minimum(vdes, vsafe)
    vdes = np.minimum(vdes, setpoint)
    vnew = np.maximum(vdes - (sigma * a * dt) * eta, 0.0)
    return np.minimum(vnew, np.maximum(gap, 0.0) / dt)


car_following_update_jit = _maybe_jit(_car_following_loop)

if _USE_NUMBA:
    car_following_update = car_following_update_jit
else:
    car_following_update = car_following_update_numpy


# ---------------------------------------------------------------------------
# Shortest path over a time-distance-speed lattice
# ---------------------------------------------------------------------------
#
# Nodes are (t, d, k): time layer, distance in units of dv*dt/2 from the
# planning origin, speed bin k (speed = k*dv).  An edge (t,d,k)->(t+1,d',k')
# exists when k' - k lies within the acceleration bounds and
# d' = d + k + k' (exact trapezoidal displacement in distance units).
# Edge cost depends only on (k, k') and is passed as a table.  Sinks are
# nodes at d == d_sink with t in [t_lo, t_hi]; reaching d_sink before t_lo
# is forbidden (that would cross the stop line outside the window).
# Dijkstra with a binary heap; ties broken by node id, ids being the
# lexicographic (t, d, k) encoding.


def _heap_push_impl(keys, vals, size, key, val):
    i = size
    while i > 0:
        p = (i - 1) >> 1
        if keys[p] > key or (keys[p] == key and vals[p] > val):
            keys[i] = keys[p]
            vals[i] = vals[p]
            i = p
        else:
            break
    keys[i] = key
    vals[i] = val
    return size + 1


def _heap_pop_impl(keys, vals, size):
    top_key = keys[0]
    top_val = vals[0]
    size -= 1
    key = keys[size]
    val = vals[size]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        r = l + 1
        c = l
        if r < size and (keys[r] < keys[l]
                         or (keys[r] == keys[l] and vals[r] < vals[l])):
            c = r
        if keys[c] < key or (keys[c] == key and vals[c] < val):
            keys[i] = keys[c]
            vals[i] = vals[c]
            i = c
        else:
            break
    keys[i] = key
    vals[i] = val
    return top_key, top_val, size


_heap_push = _maybe_jit(_heap_push_impl)
_heap_pop = _maybe_jit(_heap_pop_impl)


def _lattice_dijkstra_body(n_t, n_d, n_v, d_sink, t_lo, t_hi, k_src,
                           cost_table, dk_min, dk_max):
    n_nodes = n_t * n_d * n_v
    dist = np.full(n_nodes, np.inf, dtype=np.float64)
    prev = np.full(n_nodes, -1, dtype=np.int64)
    done = np.zeros(n_nodes, dtype=np.uint8)

    cap = 1 << 12
    heap_keys = np.empty(cap, dtype=np.float64)
    heap_vals = np.empty(cap, dtype=np.int64)
    size = 0

    src = k_src  # (t=0, d=0, k=k_src)
    dist[src] = 0.0
    size = _heap_push(heap_keys, heap_vals, size, 0.0, src)

    while size > 0:
        cost, node, size = _heap_pop(heap_keys, heap_vals, size)
        if done[node]:
            continue
        done[node] = 1
        k = node % n_v
        rest = node // n_v
        d = rest % n_d
        t = rest // n_d
        if d == d_sink:
            if t >= t_lo:
                return node, cost, prev
            continue  # crossed before the window opens: dead end
        if t + 1 > t_hi:
            continue
        k2_lo = k + dk_min
        if k2_lo < 0:
            k2_lo = 0
        k2_hi = k + dk_max
        if k2_hi > n_v - 1:
            k2_hi = n_v - 1
        base_next = (t + 1) * n_d
        for k2 in range(k2_lo, k2_hi + 1):
            nd = d + k + k2
            if nd > d_sink:
                continue
            if nd == d_sink and t + 1 < t_lo:
                continue
            nnode = (base_next + nd) * n_v + k2
            ncost = cost + cost_table[k, k2]
            if ncost < dist[nnode]:
                dist[nnode] = ncost
                prev[nnode] = node
                if size >= cap:
                    new_cap = cap * 2
                    nk = np.empty(new_cap, dtype=np.float64)
                    nv = np.empty(new_cap, dtype=np.int64)
                    nk[:cap] = heap_keys
                    nv[:cap] = heap_vals
                    heap_keys = nk
                    heap_vals = nv
                    cap = new_cap
                size = _heap_push(heap_keys, heap_vals, size, ncost, nnode)
    return -1, np.inf, prev


lattice_dijkstra = _maybe_jit(_lattice_dijkstra_body)
lattice_dijkstra_python = _lattice_dijkstra_body


# ---------------------------------------------------------------------------
# Speed-profile repair projection (surrogate post-processing)
# ---------------------------------------------------------------------------

def _project_speeds_body(v, dv_lo, dv_hi, v_max):
    """In-place forward projection of per-step speed changes into bounds."""
    n = v.shape[0]
    for i in range(n - 1):
        lo = v[i] + dv_lo
        hi = v[i] + dv_hi
        x = v[i + 1]
        if x < lo:
            x = lo
        if x > hi:
            x = hi
        if x > v_max:
            x = v_max
        if x < 0.0:
            x = 0.0
        v[i + 1] = x
    return v


project_speeds = _maybe_jit(_project_speeds_body)
project_speeds_python = _project_speeds_body


# ---------------------------------------------------------------------------
# Benchmark support
# ---------------------------------------------------------------------------

def _bench_car_following(n_vehicles: int, repeats: int, rng) -> dict:
    v = rng.uniform(0.0, 13.9, n_vehicles)
    lead_v = rng.uniform(0.0, 13.9, n_vehicles)
    gap = rng.uniform(0.0, 120.0, n_vehicles)
    setpoint = np.full(n_vehicles, NO_SETPOINT)
    eta = rng.random(n_vehicles)
    args = (v, lead_v, gap, setpoint, eta,
            2.6, 4.5, 0.5, 1.0, 2.5, 13.9, 1.0)

    def run(fn):
        fn(*args)  # warmup / compile
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn(*args)
        return (time.perf_counter() - t0) / repeats

    row = {"kernel": "car_following_update",
           "n": n_vehicles,
           "numpy_s": run(car_following_update_numpy)}
    if _USE_NUMBA:
        row["numba_s"] = run(car_following_update_jit)
        row["speedup"] = row["numpy_s"] / row["numba_s"]
    return row


def _bench_dijkstra(repeats: int) -> dict:
    # Mid-size lattice comparable to a real planning query.
    n_t, n_v = 45, 20
    d_sink = 300
    n_d = d_sink + 1
    rng = np.random.default_rng(0)
    cost_table = rng.uniform(1.0, 50.0, (n_v, n_v))
    args = (n_t, n_d, n_v, d_sink, 30, 44, 10, cost_table, -6, 4)

    def run(fn):
        fn(*args)
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn(*args)
        return (time.perf_counter() - t0) / repeats

    row = {"kernel": "lattice_dijkstra",
           "n": n_t * n_d * n_v,
           "python_s": run(lattice_dijkstra_python) if not _USE_NUMBA else None}
    if _USE_NUMBA:
        row["numba_s"] = run(lattice_dijkstra)
        # The python path on a full-size lattice is slow; time one pass only.
        t0 = time.perf_counter()
        lattice_dijkstra_python(*args)
        row["python_s"] = time.perf_counter() - t0
        row["speedup"] = row["python_s"] / row["numba_s"]
    return row


def benchmark_kernels(repeats: int = 20, n_vehicles: int = 2000) -> list[dict]:
    """Time the JIT and fallback paths of every kernel on synthetic data."""
    rng = np.random.default_rng(12345)
    return [
        _bench_car_following(n_vehicles, repeats, rng),
        _bench_dijkstra(max(1, repeats // 10)),
    ]
