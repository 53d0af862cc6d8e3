"""Jitted projection solver.

Mirror of the pure-python solver inside robot.step, kept in lockstep with it
operation for operation.  The pipe chart is re-derived here from the segment
tables because the kernel cannot call back into PipeNetwork; tests cross-check
both routes on random rollouts.
"""

import math

import numpy as np
from numba import njit

PI = math.pi
TWO_PI = 2.0 * math.pi


@njit(cache=True)
def _chart_point(x, y, kind, s0, ax, ay, ux, uy, ln, cx, cy, rr, a0, sw):
    """Best (s, d, seg) for one point, same candidate rule as the chart."""
    n = kind.shape[0]
    best_cost = 1e30
    best_s = 0.0
    best_d = 0.0
    best_i = 0
    claimed = False
    for i in range(n):
        if kind[i] == 0:
            rx = x - ax[i]
            ry = y - ay[i]
            t = rx * ux[i] + ry * uy[i]
            d = ry * ux[i] - rx * uy[i]
            claim = (t >= -1e-12) and (t <= ln[i] + 1e-12)
            s = s0[i] + min(max(t, 0.0), ln[i])
        else:
            rx = x - cx[i]
            ry = y - cy[i]
            rho = math.hypot(rx, ry)
            ang = math.atan2(ry, rx)
            sign = 1.0 if sw[i] > 0 else -1.0
            da = ((ang - a0[i] + PI) % TWO_PI - PI) * sign
            claim = (da >= -1e-9) and (da <= PI / 2.0 + 1e-9)
            s = s0[i] + min(max(da, 0.0), PI / 2.0) * rr[i]
            d = -sign * (rho - rr[i])
        if claim:
            cost = abs(d)
            if (not claimed) or cost < best_cost:
                best_cost = cost
                best_s, best_d, best_i = s, d, i
            claimed = True
        elif not claimed:
            # no claim yet: candidate cost is distance to the clamped
            # centerline projection, as in the chart fallback
            if kind[i] == 0:
                qx = ax[i] + ux[i] * (s - s0[i])
                qy = ay[i] + uy[i] * (s - s0[i])
            else:
                sign = 1.0 if sw[i] > 0 else -1.0
                ang_c = a0[i] + sign * (s - s0[i]) / rr[i]
                qx = cx[i] + rr[i] * math.cos(ang_c)
                qy = cy[i] + rr[i] * math.sin(ang_c)
            cost = math.hypot(qx - x, qy - y)
            if cost < best_cost:
                best_cost = cost
                best_s, best_d, best_i = s, d, i
    return best_s, best_d, best_i


@njit(cache=True)
def _tangent_of(s, i, kind, s0, ux, uy, a0, sw, rr):
    if kind[i] == 0:
        return ux[i], uy[i]
    sign = 1.0 if sw[i] > 0 else -1.0
    ang = a0[i] + sign * (s - s0[i]) / rr[i]
    return -math.sin(ang) * sign, math.cos(ang) * sign


@njit(cache=True)
def solve(kind, s0, ax, ay, ux, uy, ln, cx, cy, rr, a0, sw, total_len, h,
          pos, im, radii, targets, joint_node,
          grip_node, grip_g, grip_tx, grip_ty, grip_gx, grip_gy,
          links_i, links_k, links_rest,
          slide_dy, iters, ks, kg):
    n_nodes = pos.shape[0]
    px = np.empty(n_nodes)
    py = np.empty(n_nodes)
    for i in range(n_nodes):
        px[i] = pos[i, 0]
        py[i] = pos[i, 1] - slide_dy
    push = np.zeros(n_nodes)
    n_links = links_i.shape[0]
    n_joints = joint_node.shape[0]
    n_grips = grip_node.shape[0]

    for it in range(iters):
        # links
        for e in range(n_links):
            i = links_i[e]
            k = links_k[e]
            dx = px[k] - px[i]
            dy = py[k] - py[i]
            dist = math.sqrt(dx * dx + dy * dy)
            if dist < 1e-12:
                continue
            f = (dist - links_rest[e]) / dist
            lcx = f * dx
            lcy = f * dy
            w = im[i] + im[k]
            wi = im[i] / w
            wk = im[k] / w
            px[i] += lcx * wi
            py[i] += lcy * wi
            px[k] -= lcx * wk
            py[k] -= lcy * wk
        # joint servos: three-point angular projection, gradients sum to zero
        for j in range(n_joints):
            k = joint_node[j]
            a_n = k - 1
            b_n = k + 1
            vin_x = px[k] - px[a_n]
            vin_y = py[k] - py[a_n]
            vo_x = px[b_n] - px[k]
            vo_y = py[b_n] - py[k]
            meas_j = math.atan2(vo_y, vo_x) - math.atan2(vin_y, vin_x)
            err = (targets[j] - meas_j + PI) % TWO_PI - PI
            if abs(err) < 1e-12:
                continue
            li2 = vin_x * vin_x + vin_y * vin_y
            lo2 = vo_x * vo_x + vo_y * vo_y
            if li2 < 1e-16 or lo2 < 1e-16:
                continue
            ga_x = -vin_y / li2
            ga_y = vin_x / li2
            gb_x = -vo_y / lo2
            gb_y = vo_x / lo2
            gk_x = -ga_x - gb_x
            gk_y = -ga_y - gb_y
            ia = im[a_n]
            ik = im[k]
            ib = im[b_n]
            denom = (ia * (ga_x * ga_x + ga_y * ga_y)
                     + ik * (gk_x * gk_x + gk_y * gk_y)
                     + ib * (gb_x * gb_x + gb_y * gb_y))
            lam = ks * err / denom
            px[a_n] += lam * ia * ga_x
            py[a_n] += lam * ia * ga_y
            px[k] += lam * ik * gk_x
            py[k] += lam * ik * gk_y
            px[b_n] += lam * ib * gb_x
            py[b_n] += lam * ib * gb_y
        # wheel grip: braked/driven wheels track their anchor along the wall
        for g_i in range(n_grips):
            node = grip_node[g_i]
            e_t = ((grip_gx[g_i] - px[node]) * grip_tx[g_i]
                   + (grip_gy[g_i] - py[node]) * grip_ty[g_i])
            f = e_t * grip_g[g_i] * kg
            px[node] += grip_tx[g_i] * f
            py[node] += grip_ty[g_i] * f
        # walls
        for i in range(n_nodes):
            s, d, seg = _chart_point(px[i], py[i], kind, s0, ax, ay, ux, uy,
                                     ln, cx, cy, rr, a0, sw)
            c_tube = (h - abs(d)) - radii[i]
            c_start = s - radii[i]
            c_end = (total_len - s) - radii[i]
            tx, ty = _tangent_of(s, seg, kind, s0, ux, uy, a0, sw, rr)
            if c_tube <= c_start and c_tube <= c_end:
                c = c_tube
                sgn = 1.0 if d > 0 else -1.0
                dir_x = sgn * ty
                dir_y = -sgn * tx
            elif c_start <= c_end:
                c = c_start
                dir_x = tx
                dir_y = ty
            else:
                c = c_end
                dir_x = -tx
                dir_y = -ty
            if c < 0.0:
                px[i] += dir_x * (-c)
                py[i] += dir_y * (-c)
                push[i] += -c

    # final tangential lock: braked wheels settle exactly on their anchors so
    # a clamped, uncommanded robot cannot creep step over step
    for rep in range(2):
        for e in range(n_links):
            i = links_i[e]
            k = links_k[e]
            dx = px[k] - px[i]
            dy = py[k] - py[i]
            dist = math.sqrt(dx * dx + dy * dy)
            if dist < 1e-12:
                continue
            f = (dist - links_rest[e]) / dist
            lcx = f * dx
            lcy = f * dy
            w = im[i] + im[k]
            wi = im[i] / w
            wk = im[k] / w
            px[i] += lcx * wi
            py[i] += lcy * wi
            px[k] -= lcx * wk
            py[k] -= lcy * wk
        for g_i in range(n_grips):
            node = grip_node[g_i]
            e_t = ((grip_gx[g_i] - px[node]) * grip_tx[g_i]
                   + (grip_gy[g_i] - py[node]) * grip_ty[g_i])
            f = e_t * grip_g[g_i]
            px[node] += grip_tx[g_i] * f
            py[node] += grip_ty[g_i] * f

    # exact non-penetration pass
    for rep in range(3):
        worst = 0.0
        for i in range(n_nodes):
            s, d, seg = _chart_point(px[i], py[i], kind, s0, ax, ay, ux, uy,
                                     ln, cx, cy, rr, a0, sw)
            c_tube = (h - abs(d)) - radii[i]
            c_start = s - radii[i]
            c_end = (total_len - s) - radii[i]
            tx, ty = _tangent_of(s, seg, kind, s0, ux, uy, a0, sw, rr)
            if c_tube <= c_start and c_tube <= c_end:
                c = c_tube
                sgn = 1.0 if d > 0 else -1.0
                dir_x = sgn * ty
                dir_y = -sgn * tx
            elif c_start <= c_end:
                c = c_start
                dir_x = tx
                dir_y = ty
            else:
                c = c_end
                dir_x = -tx
                dir_y = -ty
            if c < 0.0:
                px[i] += dir_x * (-c)
                py[i] += dir_y * (-c)
                push[i] += -c
                if -c > worst:
                    worst = -c
        if worst <= 1e-9:
            break

    out = np.empty((n_nodes, 2))
    for i in range(n_nodes):
        out[i, 0] = px[i]
        out[i, 1] = py[i]
    return out, push
