"""Numba kernels for time-resolved photon transport in a slab.

Layout and conventions shared with the Python wrappers in mc_transport:

* Randomness is counter-based: photon `pid` of a run draws value i as
  splitmix64(state0(seed, pid) + GOLDEN*(i+1)), identical to rng.RngStream,
  so results are bit-identical for any thread count.
* Work is split into (source, chunk) tasks; each task accumulates into its
  own slice of the output arrays, sequentially over its photons, and the
  Python side reduces chunks in index order. The chunk count is a function
  of the problem size only, never of the thread count.
* Absorption is continuous weight attenuation exp(-mu_a * step); scattering
  follows Henyey-Greenstein; Russian roulette kills low-weight photons.
* The slab is laterally unbounded; faces sit at z = 0 (entry) and
  z = thickness. Detection happens on transmission through the configured
  face when the exit point falls inside a square detector aperture
  (nearest containing detector wins).
* Per-voxel pathlengths are recorded by exact 3D DDA traversal of the
  recording grid; columns follow C-order ravel of (nx, ny, nz).
"""

import numpy as np
from numba import njit, prange

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_U53 = 1.0 / 9007199254740992.0
_TINY = 1e-12
_HUGE = 1e30


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _mix64(z):
    z = np.uint64(z)
    z ^= z >> _S30
    z *= _M1
    z ^= z >> _S27
    z *= _M2
    z ^= z >> _S31
    return z


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _stream0(seed, pid):
    return _mix64(_mix64(np.uint64(seed) + GOLDEN * (np.uint64(pid) + _ONE)))


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _u01(s0, cnt):
    z = _mix64(s0 + GOLDEN * np.uint64(cnt))
    return (np.float64(z >> _S11) + 0.5) * _U53


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _hg_cos(u, g):
    if g > -1e-6 and g < 1e-6:
        return 2.0 * u - 1.0
    tmp = (1.0 - g * g) / (1.0 - g + 2.0 * g * u)
    c = (1.0 + g * g - tmp * tmp) / (2.0 * g)
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    return c


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _rotate(ux, uy, uz, cost, cosp, sinp):
    sint = np.sqrt(max(0.0, 1.0 - cost * cost))
    if uz > 0.99999999 or uz < -0.99999999:
        nx = sint * cosp
        ny = sint * sinp
        nz = cost if uz > 0.0 else -cost
    else:
        den = np.sqrt(1.0 - uz * uz)
        nx = sint * (ux * uz * cosp - uy * sinp) / den + ux * cost
        ny = sint * (uy * uz * cosp + ux * sinp) / den + uy * cost
        nz = -den * sint * cosp + uz * cost
    return nx, ny, nz


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _fresnel_reflectance(n_rel, cos_i):
    """Unpolarized internal reflectance for exit from index n_rel into 1."""
    if cos_i < 0.0:
        cos_i = -cos_i
    sin_i2 = 1.0 - cos_i * cos_i
    sin_t2 = n_rel * n_rel * sin_i2
    if sin_t2 >= 1.0:
        return 1.0  # total internal reflection
    cos_t = np.sqrt(1.0 - sin_t2)
    rs = (n_rel * cos_i - cos_t) / (n_rel * cos_i + cos_t)
    rp = (cos_i - n_rel * cos_t) / (cos_i + n_rel * cos_t)
    return 0.5 * (rs * rs + rp * rp)


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _clip_box(x, y, z, ux, uy, uz, d,
              ox, oy, oz, nx, ny, nz, px, py, pz):
    """Parametric overlap [t0, t1] of a segment with the grid box (t1<=t0: none)."""
    t0 = 0.0
    t1 = d
    for axis in range(3):
        if axis == 0:
            u = ux
            p = x
            lo = ox
            hi = ox + nx * px
        elif axis == 1:
            u = uy
            p = y
            lo = oy
            hi = oy + ny * py
        else:
            u = uz
            p = z
            lo = oz
            hi = oz + nz * pz
        if u > _TINY or u < -_TINY:
            ta = (lo - p) / u
            tb = (hi - p) / u
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        else:
            if p < lo or p > hi:
                return 1.0, 0.0
    return t0, t1


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _record_segment(x, y, z, ux, uy, uz, d,
                    ox, oy, oz, nx, ny, nz, px, py, pz,
                    stamp, pathsum, touched, ntouch, marker):
    """Accumulate per-voxel geometric pathlength along one segment (DDA)."""
    t0 = 0.0
    t1 = d
    # clip the parametric range against the grid bounding box, per axis
    for axis in range(3):
        if axis == 0:
            u = ux
            p = x
            lo = ox
            hi = ox + nx * px
        elif axis == 1:
            u = uy
            p = y
            lo = oy
            hi = oy + ny * py
        else:
            u = uz
            p = z
            lo = oz
            hi = oz + nz * pz
        if u > _TINY or u < -_TINY:
            ta = (lo - p) / u
            tb = (hi - p) / u
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        else:
            if p < lo or p > hi:
                return ntouch
    if t0 >= t1:
        return ntouch
    eps = 1e-9 * (1.0 + d)
    mid = t0 + min(eps, 0.5 * (t1 - t0))
    ix = int(np.floor((x + ux * mid - ox) / px))
    iy = int(np.floor((y + uy * mid - oy) / py))
    iz = int(np.floor((z + uz * mid - oz) / pz))
    if ix < 0:
        ix = 0
    elif ix >= nx:
        ix = nx - 1
    if iy < 0:
        iy = 0
    elif iy >= ny:
        iy = ny - 1
    if iz < 0:
        iz = 0
    elif iz >= nz:
        iz = nz - 1
    # Amanatides-Woo stepping
    if ux > _TINY:
        sx = 1
        tmx = ((ox + (ix + 1) * px) - x) / ux
        tdx = px / ux
    elif ux < -_TINY:
        sx = -1
        tmx = ((ox + ix * px) - x) / ux
        tdx = -px / ux
    else:
        sx = 0
        tmx = _HUGE
        tdx = _HUGE
    if uy > _TINY:
        sy = 1
        tmy = ((oy + (iy + 1) * py) - y) / uy
        tdy = py / uy
    elif uy < -_TINY:
        sy = -1
        tmy = ((oy + iy * py) - y) / uy
        tdy = -py / uy
    else:
        sy = 0
        tmy = _HUGE
        tdy = _HUGE
    if uz > _TINY:
        sz = 1
        tmz = ((oz + (iz + 1) * pz) - z) / uz
        tdz = pz / uz
    elif uz < -_TINY:
        sz = -1
        tmz = ((oz + iz * pz) - z) / uz
        tdz = -pz / uz
    else:
        sz = 0
        tmz = _HUGE
        tdz = _HUGE
    cur = t0
    guard = 0
    max_cells = 2 * (nx + ny + nz) + 6
    while cur < t1 - 1e-12 and guard < max_cells:
        nxt = t1
        axis_hit = -1
        if tmx < nxt:
            nxt = tmx
            axis_hit = 0
        if tmy < nxt:
            nxt = tmy
            axis_hit = 1
        if tmz < nxt:
            nxt = tmz
            axis_hit = 2
        seg = nxt - cur
        if seg > 0.0:
            col = (ix * ny + iy) * nz + iz
            if stamp[col] != marker:
                stamp[col] = marker
                pathsum[col] = 0.0
                touched[ntouch] = col
                ntouch += 1
            pathsum[col] += seg
        if axis_hit == 0:
            ix += sx
            tmx += tdx
            if ix < 0 or ix >= nx:
                break
        elif axis_hit == 1:
            iy += sy
            tmy += tdy
            if iy < 0 or iy >= ny:
                break
        elif axis_hit == 2:
            iz += sz
            tmz += tdz
            if iz < 0 or iz >= nz:
                break
        cur = nxt
        guard += 1
    return ntouch


@njit(cache=True, parallel=True, fastmath=True, error_model="numpy")
def trace_pairs(seed, n_photons, n_chunks,
                src_xy, det_xy, half_aperture, detect_back,
                mu_s, mu_a, g, n_rel, v, thickness, fresnel,
                gate_start, bin_width, n_bins,
                roulette_threshold, roulette_survival,
                grid_origin, grid_dims, grid_pitch, record_j,
                overlay, has_overlay,
                t_part, w2_part, j_part):
    """Transport + detection for per-source private detector lists.

    t_part:  (n_src, n_chunks, n_det, n_bins) detected weight histograms
    w2_part: same shape, sum of squared per-photon contributions
    j_part:  (n_src, n_chunks, n_det*n_bins, n_cols) pathlength moments
             (only touched when record_j)
    """
    n_src = src_xy.shape[0]
    n_det = det_xy.shape[1]
    gnx = grid_dims[0]
    gny = grid_dims[1]
    gnz = grid_dims[2]
    n_cols = gnx * gny * gnz
    need_paths = record_j or has_overlay
    chunk = (n_photons + n_chunks - 1) // n_chunks
    t_max = gate_start + n_bins * bin_width
    spec_w = 1.0
    if fresnel:
        r_sp = ((n_rel - 1.0) / (n_rel + 1.0)) ** 2
        spec_w = 1.0 - r_sp
    inv_v = 1.0 / v
    inv_mu_s = 1.0 / mu_s if mu_s > 0.0 else 0.0

    for task in prange(n_src * n_chunks):
        s = task // n_chunks
        c = task % n_chunks
        p0 = c * chunk
        p1 = min(n_photons, p0 + chunk)
        size = n_cols if need_paths else 1
        stamp = np.full(size, -1, dtype=np.int64)
        pathsum = np.zeros(size, dtype=np.float64)
        touched = np.empty(size, dtype=np.int64)
        ox = grid_origin[s, 0]
        oy = grid_origin[s, 1]
        oz = grid_origin[s, 2]
        px = grid_pitch[0]
        py = grid_pitch[1]
        pz = grid_pitch[2]

        for pid in range(p0, p1):
            s0 = _stream0(seed, s * n_photons + pid)
            cnt = 0
            x = src_xy[s, 0]
            y = src_xy[s, 1]
            z = 0.0
            ux = 0.0
            uy = 0.0
            uz = 1.0
            w = spec_w
            t = 0.0
            ntouch = 0
            alive = True
            detected = False
            while alive:
                cnt += 1
                u = _u01(s0, cnt)
                if mu_s > 0.0:
                    step = -np.log(u) * inv_mu_s
                else:
                    step = _HUGE
                # propagate, possibly across boundary reflections
                while True:
                    if uz > _TINY:
                        d_b = (thickness - z) / uz
                        face_back = True
                    elif uz < -_TINY:
                        d_b = -z / uz
                        face_back = False
                    else:
                        d_b = _HUGE
                        face_back = False
                    hit = step >= d_b
                    d = d_b if hit else step
                    if t + d * inv_v > t_max:
                        # cannot reach any recordable bin anymore
                        alive = False
                        break
                    if need_paths and n_cols > 0:
                        ntouch = _record_segment(x, y, z, ux, uy, uz, d,
                                                 ox, oy, oz, gnx, gny, gnz,
                                                 px, py, pz,
                                                 stamp, pathsum, touched,
                                                 ntouch, pid)
                    x += ux * d
                    y += uy * d
                    z += uz * d
                    t += d * inv_v
                    if mu_a > 0.0:
                        w *= np.exp(-mu_a * d)
                    if not hit:
                        break  # reached the interaction point
                    # at a face: reflect or transmit
                    step -= d
                    refl = False
                    if fresnel:
                        r = _fresnel_reflectance(n_rel, uz)
                        cnt += 1
                        if _u01(s0, cnt) < r:
                            refl = True
                    if refl:
                        uz = -uz
                        z = thickness if face_back else 0.0
                        if step <= 0.0:
                            break
                        continue
                    # transmitted out of the slab
                    alive = False
                    if face_back == detect_back:
                        detected = True
                    break
                if not alive:
                    break
                # roulette after the full step's attenuation
                if w < roulette_threshold:
                    cnt += 1
                    if _u01(s0, cnt) < roulette_survival:
                        w /= roulette_survival
                    else:
                        break
                cnt += 1
                cost = _hg_cos(_u01(s0, cnt), g)
                while True:
                    cnt += 1
                    pa = 2.0 * _u01(s0, cnt) - 1.0
                    cnt += 1
                    pb = 2.0 * _u01(s0, cnt) - 1.0
                    pr2 = pa * pa + pb * pb
                    if pr2 <= 1.0 and pr2 > 1e-12:
                        break
                cosp = (pa * pa - pb * pb) / pr2
                sinp = 2.0 * pa * pb / pr2
                ux, uy, uz = _rotate(ux, uy, uz, cost, cosp, sinp)
            if not detected:
                continue
            best = -1
            best_d2 = _HUGE
            for di in range(n_det):
                dx = x - det_xy[s, di, 0]
                dy = y - det_xy[s, di, 1]
                if dx <= half_aperture and dx >= -half_aperture and \
                        dy <= half_aperture and dy >= -half_aperture:
                    d2 = dx * dx + dy * dy
                    if d2 < best_d2:
                        best_d2 = d2
                        best = di
            if best < 0:
                continue
            tb = (t - gate_start) / bin_width
            if tb < 0.0 or tb >= n_bins:
                continue
            b = int(tb)
            w_eff = w
            if has_overlay:
                extra = 0.0
                for k in range(ntouch):
                    col = touched[k]
                    extra += overlay[col] * pathsum[col]
                if extra != 0.0:
                    w_eff = w * np.exp(-extra)
            t_part[s, c, best, b] += w_eff
            w2_part[s, c, best, b] += w_eff * w_eff
            if record_j:
                row = best * n_bins + b
                for k in range(ntouch):
                    col = touched[k]
                    j_part[s, c, row, col] += w_eff * pathsum[col]


@njit(cache=True, parallel=True, fastmath=True, error_model="numpy")
def trace_fluence(seed, n_photons, n_chunks,
                  src_xy, mu_s, mu_a, g, n_rel, v, thickness, fresnel,
                  gate_start, bin_width, n_bins,
                  roulette_threshold, roulette_survival,
                  grid_origin, grid_dims, grid_pitch,
                  f_part):
    """Time-resolved visitation fluence: f_part (n_src, n_chunks, n_cols, n_bins).

    Accumulates w * dl at the traversal-time bin for every photon,
    detected or not; this is the volumetric fluence estimator used to
    compose fluorescence sensitivities.
    """
    n_src = src_xy.shape[0]
    gnx = grid_dims[0]
    gny = grid_dims[1]
    gnz = grid_dims[2]
    n_cols = gnx * gny * gnz
    chunk = (n_photons + n_chunks - 1) // n_chunks
    t_max = gate_start + n_bins * bin_width
    spec_w = 1.0
    if fresnel:
        spec_w = 1.0 - ((n_rel - 1.0) / (n_rel + 1.0)) ** 2
    inv_v = 1.0 / v
    inv_mu_s = 1.0 / mu_s if mu_s > 0.0 else 0.0
    px = grid_pitch[0]
    py = grid_pitch[1]
    pz = grid_pitch[2]
    min_pitch = min(px, min(py, pz))

    for task in prange(n_src * n_chunks):
        s = task // n_chunks
        c = task % n_chunks
        p0 = c * chunk
        p1 = min(n_photons, p0 + chunk)
        ox = grid_origin[s, 0]
        oy = grid_origin[s, 1]
        oz = grid_origin[s, 2]

        for pid in range(p0, p1):
            s0 = _stream0(seed, s * n_photons + pid)
            cnt = 0
            x = src_xy[s, 0]
            y = src_xy[s, 1]
            z = 0.0
            ux = 0.0
            uy = 0.0
            uz = 1.0
            w = spec_w
            t = 0.0
            alive = True
            while alive:
                cnt += 1
                u = _u01(s0, cnt)
                if mu_s > 0.0:
                    step = -np.log(u) * inv_mu_s
                else:
                    step = _HUGE
                while True:
                    if uz > _TINY:
                        d_b = (thickness - z) / uz
                        face_back = True
                    elif uz < -_TINY:
                        d_b = -z / uz
                        face_back = False
                    else:
                        d_b = _HUGE
                        face_back = False
                    hit = step >= d_b
                    d = d_b if hit else step
                    truncated = False
                    if t + d * inv_v > t_max:
                        d = (t_max - t) * v
                        truncated = True
                    # visitation recording: sub-steps binned by traversal time
                    c0, c1 = _clip_box(x, y, z, ux, uy, uz, d,
                                       ox, oy, oz, gnx, gny, gnz, px, py, pz)
                    pos = c0
                    while pos < c1 - 1e-12:
                        sub = min_pitch * 0.5
                        if pos + sub > c1:
                            sub = c1 - pos
                        mid = pos + 0.5 * sub
                        xm = x + ux * mid
                        ym = y + uy * mid
                        zm = z + uz * mid
                        ix = int(np.floor((xm - ox) / px))
                        iy = int(np.floor((ym - oy) / py))
                        iz = int(np.floor((zm - oz) / pz))
                        if 0 <= ix < gnx and 0 <= iy < gny and 0 <= iz < gnz:
                            tm = t + mid * inv_v
                            tb = (tm - gate_start) / bin_width
                            if 0.0 <= tb < n_bins:
                                wm = w
                                if mu_a > 0.0:
                                    wm = w * np.exp(-mu_a * mid)
                                col = (ix * gny + iy) * gnz + iz
                                f_part[s, c, col, int(tb)] += wm * sub
                        pos += sub
                    x += ux * d
                    y += uy * d
                    z += uz * d
                    t += d * inv_v
                    if mu_a > 0.0:
                        w *= np.exp(-mu_a * d)
                    if truncated:
                        alive = False
                        break
                    if not hit:
                        break
                    step -= d
                    refl = False
                    if fresnel:
                        r = _fresnel_reflectance(n_rel, uz)
                        cnt += 1
                        if _u01(s0, cnt) < r:
                            refl = True
                    if refl:
                        uz = -uz
                        z = thickness if face_back else 0.0
                        if step <= 0.0:
                            break
                        continue
                    alive = False
                    break
                if not alive:
                    break
                if w < roulette_threshold:
                    cnt += 1
                    if _u01(s0, cnt) < roulette_survival:
                        w /= roulette_survival
                    else:
                        break
                cnt += 1
                cost = _hg_cos(_u01(s0, cnt), g)
                while True:
                    cnt += 1
                    pa = 2.0 * _u01(s0, cnt) - 1.0
                    cnt += 1
                    pb = 2.0 * _u01(s0, cnt) - 1.0
                    pr2 = pa * pa + pb * pb
                    if pr2 <= 1.0 and pr2 > 1e-12:
                        break
                cosp = (pa * pa - pb * pb) / pr2
                sinp = 2.0 * pa * pb / pr2
                ux, uy, uz = _rotate(ux, uy, uz, cost, cosp, sinp)


@njit(cache=True)
def trace_records(seed, n_photons, src_x, src_y,
                  mu_s, mu_a, g, n_rel, v, thickness, fresnel,
                  t_max, roulette_threshold, roulette_survival,
                  detect_back, max_records,
                  out_xy, out_t, out_w, out_path):
    """Sequential tracer returning individual detected-photon records."""
    n_rec = 0
    spec_w = 1.0
    if fresnel:
        spec_w = 1.0 - ((n_rel - 1.0) / (n_rel + 1.0)) ** 2
    inv_v = 1.0 / v
    inv_mu_s = 1.0 / mu_s if mu_s > 0.0 else 0.0
    for pid in range(n_photons):
        if n_rec >= max_records:
            break
        s0 = _stream0(seed, pid)
        cnt = 0
        x = src_x
        y = src_y
        z = 0.0
        ux = 0.0
        uy = 0.0
        uz = 1.0
        w = spec_w
        t = 0.0
        path = 0.0
        alive = True
        detected = False
        while alive:
            cnt += 1
            u = _u01(s0, cnt)
            if mu_s > 0.0:
                step = -np.log(u) * inv_mu_s
            else:
                step = _HUGE
            while True:
                if uz > _TINY:
                    d_b = (thickness - z) / uz
                    face_back = True
                elif uz < -_TINY:
                    d_b = -z / uz
                    face_back = False
                else:
                    d_b = _HUGE
                    face_back = False
                hit = step >= d_b
                d = d_b if hit else step
                if t + d * inv_v > t_max:
                    alive = False
                    break
                x += ux * d
                y += uy * d
                z += uz * d
                t += d * inv_v
                path += d
                if mu_a > 0.0:
                    w *= np.exp(-mu_a * d)
                if not hit:
                    break
                step -= d
                refl = False
                if fresnel:
                    r = _fresnel_reflectance(n_rel, uz)
                    cnt += 1
                    if _u01(s0, cnt) < r:
                        refl = True
                if refl:
                    uz = -uz
                    z = thickness if face_back else 0.0
                    if step <= 0.0:
                        break
                    continue
                alive = False
                if face_back == detect_back:
                    detected = True
                break
            if not alive:
                break
            if w < roulette_threshold:
                cnt += 1
                if _u01(s0, cnt) < roulette_survival:
                    w /= roulette_survival
                else:
                    break
            cnt += 1
            cost = _hg_cos(_u01(s0, cnt), g)
            while True:
                cnt += 1
                pa = 2.0 * _u01(s0, cnt) - 1.0
                cnt += 1
                pb = 2.0 * _u01(s0, cnt) - 1.0
                pr2 = pa * pa + pb * pb
                if pr2 <= 1.0 and pr2 > 1e-12:
                    break
            cosp = (pa * pa - pb * pb) / pr2
            sinp = 2.0 * pa * pb / pr2
            ux, uy, uz = _rotate(ux, uy, uz, cost, cosp, sinp)
        if detected:
            out_xy[n_rec, 0] = x
            out_xy[n_rec, 1] = y
            out_t[n_rec] = t
            out_w[n_rec] = w
            out_path[n_rec] = path
            n_rec += 1
    return n_rec
