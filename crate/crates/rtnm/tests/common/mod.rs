//! Shared test helpers: an exhaustive reference solver for small full
//! matching instances, used as an independent oracle for the optimizer.

use rtnm::matcher::MatchBounds;

/// Minimum objective over every valid star stratification, or `None` when no
/// stratification satisfies the bounds. Exponential search; keep `nt + nc`
/// at or below roughly nine.
pub fn brute_force_objective(
    nt: usize,
    nc: usize,
    d: &[f64],
    bounds: &MatchBounds,
) -> Option<f64> {
    let cap = {
        let mut cap = nc.max(nt);
        if let Some(mr) = bounds.max_ratio {
            cap = cap.min(mr as usize);
        }
        if let Some(ms) = bounds.max_stratum_size {
            cap = cap.min(ms as usize - 1);
        }
        cap
    };
    let mr = bounds.min_ratio as usize;
    let mut best: Option<f64> = None;
    let mut assigned_t = vec![false; nt];
    let mut avail_c: Vec<usize> = (0..nc).collect();
    search(
        nt,
        nc,
        d,
        mr,
        cap,
        &mut assigned_t,
        &mut avail_c,
        0.0,
        &mut best,
    );
    best
}

#[allow(clippy::too_many_arguments)]
fn search(
    nt: usize,
    nc: usize,
    d: &[f64],
    mr: usize,
    cap: usize,
    assigned_t: &mut Vec<bool>,
    avail_c: &mut Vec<usize>,
    cost: f64,
    best: &mut Option<f64>,
) {
    if let Some(b) = *best {
        if cost >= b + 1e-12 {
            return;
        }
    }
    let Some(r) = assigned_t.iter().position(|&a| !a) else {
        // Every treated unit covered; valid only if no comparison is left.
        if avail_c.is_empty() && best.map_or(true, |b| cost < b) {
            *best = Some(cost);
        }
        return;
    };

    // Treated-centered star around r: any comparison subset of allowed size.
    let pool = avail_c.clone();
    for mask in 1u32..(1 << pool.len()) {
        let size = mask.count_ones() as usize;
        if size < mr || size > cap {
            continue;
        }
        let subset: Vec<usize> = (0..pool.len())
            .filter(|&i| mask >> i & 1 == 1)
            .map(|i| pool[i])
            .collect();
        let extra: f64 = subset.iter().map(|&c| d[r * nc + c]).sum();
        assigned_t[r] = true;
        avail_c.retain(|c| !subset.contains(c));
        search(nt, nc, d, mr, cap, assigned_t, avail_c, cost + extra, best);
        assigned_t[r] = false;
        *avail_c = pool.clone();
    }

    // Comparison-centered star containing r (only without a ratio floor):
    // pick the shared comparison and at least one more treated unit.
    if mr == 1 {
        let others: Vec<usize> = (r + 1..nt).filter(|&x| !assigned_t[x]).collect();
        for ci in 0..avail_c.len() {
            let c = avail_c[ci];
            for mask in 1u32..(1 << others.len()) {
                let size = mask.count_ones() as usize + 1;
                if size < 2 || size > cap {
                    continue;
                }
                let members: Vec<usize> = std::iter::once(r)
                    .chain(
                        (0..others.len())
                            .filter(|&i| mask >> i & 1 == 1)
                            .map(|i| others[i]),
                    )
                    .collect();
                let extra: f64 = members.iter().map(|&t| d[t * nc + c]).sum();
                for &t in &members {
                    assigned_t[t] = true;
                }
                avail_c.remove(ci);
                search(nt, nc, d, mr, cap, assigned_t, avail_c, cost + extra, best);
                avail_c.insert(ci, c);
                for &t in &members {
                    assigned_t[t] = false;
                }
            }
        }
    }
}
