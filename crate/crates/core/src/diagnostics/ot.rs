//! Exact optimal transport between finite distributions.
//!
//! The transportation problem is solved as a minimum-cost flow with
//! successive shortest paths. Dijkstra runs on reduced costs, with potentials
//! keeping them non-negative, over the dense bipartite residual graph.

use crate::error::{Error, Result};

/// Total masses may differ by at most this much.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// An optimal coupling and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Transport {
    pub cost: f64,
    /// `plan[i][j]` is the mass moved from source `i` to target `j`.
    pub plan: Vec<Vec<f64>>,
}

/// Minimum of `sum plan[i][j] * cost[i][j]` over couplings of `a` and `b`.
///
/// Infinite costs mark forbidden edges; when no feasible coupling remains the
/// cost is `f64::INFINITY`.
pub fn transport(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Result<Transport> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::Empty("transport between empty supports".into()));
    }
    if cost.len() != n || cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape([n, m], [cost.len(), cost.first().map_or(0, Vec::len)]));
    }
    if a.iter().chain(b).any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument("masses must be finite and non-negative".into()));
    }
    if cost.iter().flatten().any(|c| c.is_nan() || *c < 0.0 || *c == f64::NEG_INFINITY) {
        return Err(Error::InvalidArgument("costs must be non-negative".into()));
    }
    let (ta, tb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if (ta - tb).abs() > MASS_TOLERANCE {
        return Err(Error::InvalidArgument(format!("unbalanced total mass: {ta} vs {tb}")));
    }
    let eps = 1e-15 * ta.max(1.0);

    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut plan = vec![vec![0.0; m]; n];
    let mut pot_l = vec![0.0; n];
    let mut pot_r = vec![0.0; m];
    let mut dist_l = vec![0.0; n];
    let mut dist_r = vec![0.0; m];
    // predecessor of right node j is a left node; of left node i a right node
    let mut pred_r = vec![usize::MAX; m];
    let mut pred_l = vec![usize::MAX; n];
    let mut done_l = vec![false; n];
    let mut done_r = vec![false; m];

    let max_rounds = 4 * (n + m) * (n + m) + 16;
    for _ in 0..max_rounds {
        if supply.iter().all(|&s| s <= eps) || demand.iter().all(|&d| d <= eps) {
            break;
        }
        dist_l.fill(f64::INFINITY);
        dist_r.fill(f64::INFINITY);
        pred_l.fill(usize::MAX);
        pred_r.fill(usize::MAX);
        done_l.fill(false);
        done_r.fill(false);
        for i in 0..n {
            if supply[i] > eps {
                dist_l[i] = 0.0;
            }
        }
        loop {
            // dense Dijkstra: pick the closest unsettled node on either side
            let mut best = f64::INFINITY;
            let mut pick = None;
            for i in 0..n {
                if !done_l[i] && dist_l[i] < best {
                    best = dist_l[i];
                    pick = Some((true, i));
                }
            }
            for j in 0..m {
                if !done_r[j] && dist_r[j] < best {
                    best = dist_r[j];
                    pick = Some((false, j));
                }
            }
            let Some((left, u)) = pick else { break };
            if left {
                done_l[u] = true;
                for j in 0..m {
                    let c = cost[u][j];
                    if done_r[j] || !c.is_finite() {
                        continue;
                    }
                    let d = best + (c + pot_l[u] - pot_r[j]).max(0.0);
                    if d < dist_r[j] {
                        dist_r[j] = d;
                        pred_r[j] = u;
                    }
                }
            } else {
                done_r[u] = true;
                for i in 0..n {
                    if done_l[i] || plan[i][u] <= eps {
                        continue;
                    }
                    let d = best + (-cost[i][u] + pot_r[u] - pot_l[i]).max(0.0);
                    if d < dist_l[i] {
                        dist_l[i] = d;
                        pred_l[i] = u;
                    }
                }
            }
        }
        // target: the unsatisfied right node with the smallest true distance
        let mut target = None;
        let mut best = f64::INFINITY;
        for j in 0..m {
            if demand[j] > eps && dist_r[j].is_finite() {
                let true_dist = dist_r[j] + pot_r[j];
                if true_dist < best {
                    best = true_dist;
                    target = Some(j);
                }
            }
        }
        let Some(target) = target else {
            // remaining demand is unreachable through finite edges
            return Ok(Transport { cost: f64::INFINITY, plan });
        };
        let far = dist_l.iter().chain(&dist_r).filter(|d| d.is_finite()).fold(0.0f64, |a, &b| a.max(b));
        for i in 0..n {
            pot_l[i] += if dist_l[i].is_finite() { dist_l[i] } else { far };
        }
        for j in 0..m {
            pot_r[j] += if dist_r[j].is_finite() { dist_r[j] } else { far };
        }

        // bottleneck along the path
        let mut amount = demand[target];
        let mut j = target;
        let source = loop {
            let i = pred_r[j];
            match pred_l[i] {
                usize::MAX => break i,
                jj => {
                    amount = amount.min(plan[i][jj]);
                    j = jj;
                }
            }
        };
        amount = amount.min(supply[source]);

        let mut j = target;
        loop {
            let i = pred_r[j];
            plan[i][j] += amount;
            match pred_l[i] {
                usize::MAX => break,
                jj => {
                    plan[i][jj] -= amount;
                    if plan[i][jj] < eps {
                        plan[i][jj] = 0.0;
                    }
                    j = jj;
                }
            }
        }
        supply[source] -= amount;
        demand[target] -= amount;
    }
    if supply.iter().any(|&s| s > 1e3 * eps) && demand.iter().any(|&d| d > 1e3 * eps) {
        return Err(Error::NonFinite("transport solver did not converge".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            if plan[i][j] > 0.0 {
                total += plan[i][j] * cost[i][j];
            }
        }
    }
    Ok(Transport { cost: total, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge() {
        let t = transport(&[1.0], &[1.0], &[vec![3.0]]).unwrap();
        assert_eq!(t.cost, 3.0);
    }

    #[test]
    fn needs_rerouting() {
        // greedy would send a->x at cost 0 and then pay 10 for b->y
        let c = vec![vec![0.0, 1.0], vec![1.0, 10.0]];
        let t = transport(&[0.5, 0.5], &[0.5, 0.5], &c).unwrap();
        assert!((t.cost - 1.0).abs() < 1e-15);
        assert!((t.plan[0][1] - 0.5).abs() < 1e-15 && (t.plan[1][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors_and_infeasibility() {
        assert!(transport(&[1.0], &[0.5], &[vec![0.0]]).is_err());
        assert!(transport(&[], &[], &[]).is_err());
        assert!(transport(&[1.0], &[1.0], &[vec![-1.0]]).is_err());
        let inf = f64::INFINITY;
        let t = transport(&[0.5, 0.5], &[0.5, 0.5], &[vec![0.0, inf], vec![0.0, inf]]).unwrap();
        assert_eq!(t.cost, f64::INFINITY);
    }
}
