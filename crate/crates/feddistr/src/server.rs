//! Server-side alignment: match uploaded distribution parameters across
//! clients with the Kuhn-Munkres algorithm, merge parameters that describe
//! the same base distribution into parallel groups, and assemble the
//! broadcast payload of one dominant parameter per group plus all
//! client-unique (orthogonal) parameters.

use crate::client::{DistributionParameter, UploadMessage};
use crate::linalg::dist;
use crate::{Error, Result};

/// Stand-in for an infeasible edge. Large enough that minimizing total cost
/// first maximizes the number of finite edges, small enough to keep f64
/// resolution on the finite part.
const INFEASIBLE: f64 = 1e9;

/// A minimum-cost partial matching over the finite entries of a cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// (row, column) pairs, sorted by row; no row or column repeats.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Euclidean distances between two parameter lists; entries across different
/// labels are infinite so cross-label merging can never happen.
pub fn pairwise_cost(a: &[DistributionParameter], b: &[DistributionParameter]) -> Result<Vec<Vec<f64>>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("pairwise_cost: empty parameter list".into()));
    }
    let d = a[0].v.len();
    if a.iter().chain(b).any(|p| p.v.len() != d) {
        return Err(Error::Input("pairwise_cost: parameter dimension mismatch".into()));
    }
    Ok(a.iter()
        .map(|pa| {
            b.iter()
                .map(|pb| if pa.label == pb.label { dist(&pa.v, &pb.v) } else { f64::INFINITY })
                .collect()
        })
        .collect())
}

/// Minimum-cost assignment saturating the smaller side, restricted to finite
/// edges; falls back to the best feasible partial matching. Among optimal
/// matchings the lexicographically smallest pair list is returned.
pub fn km_assign(cost: &[Vec<f64>]) -> Result<Assignment> {
    if cost.is_empty() || cost[0].is_empty() {
        return Err(Error::Input("km_assign: empty cost matrix".into()));
    }
    let cols = cost[0].len();
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Input("km_assign: ragged cost matrix".into()));
    }
    let (base_pairs, base_cost) = solve_raw(cost, &[], &[]);
    let cardinality = base_pairs.len();
    let tol = 1e-9 * (1.0 + base_cost.abs());

    // Fix pairs row by row, always trying the smallest column that still
    // admits an optimal completion.
    let rows = cost.len();
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut fixed_cost = 0.0;
    let mut dead_rows: Vec<usize> = Vec::new();
    let mut used_cols: Vec<usize> = Vec::new();
    for r in 0..rows {
        let mut matched = false;
        for c in 0..cols {
            if used_cols.contains(&c) || !cost[r][c].is_finite() {
                continue;
            }
            let mut skip_rows = dead_rows.clone();
            skip_rows.extend(fixed.iter().map(|&(fr, _)| fr));
            skip_rows.push(r);
            let mut skip_cols = used_cols.clone();
            skip_cols.push(c);
            let (rest, rest_cost) = solve_raw(cost, &skip_rows, &skip_cols);
            if fixed.len() + 1 + rest.len() == cardinality
                && (fixed_cost + cost[r][c] + rest_cost - base_cost).abs() <= tol
            {
                fixed.push((r, c));
                fixed_cost += cost[r][c];
                used_cols.push(c);
                matched = true;
                break;
            }
        }
        if !matched {
            dead_rows.push(r);
        }
    }
    debug_assert_eq!(fixed.len(), cardinality);
    Ok(Assignment { pairs: fixed, total_cost: fixed_cost })
}

/// Plain Hungarian solve ignoring `skip_rows` / `skip_cols`; infinite entries
/// become `INFEASIBLE` and matches through them are dropped afterward.
fn solve_raw(cost: &[Vec<f64>], skip_rows: &[usize], skip_cols: &[usize]) -> (Vec<(usize, usize)>, f64) {
    let rows: Vec<usize> = (0..cost.len()).filter(|r| !skip_rows.contains(r)).collect();
    let cols: Vec<usize> = (0..cost[0].len()).filter(|c| !skip_cols.contains(c)).collect();
    if rows.is_empty() || cols.is_empty() {
        return (Vec::new(), 0.0);
    }
    let transpose = rows.len() > cols.len();
    let (n, m) = if transpose { (cols.len(), rows.len()) } else { (rows.len(), cols.len()) };
    let entry = |i: usize, j: usize| -> f64 {
        let (r, c) = if transpose { (rows[j], cols[i]) } else { (rows[i], cols[j]) };
        let v = cost[r][c];
        if v.is_finite() {
            v
        } else {
            INFEASIBLE
        }
    };

    // potentials-based Hungarian on an n x m matrix, n <= m, 1-indexed
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = entry(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] == 0 {
            continue;
        }
        let (i, jj) = (p[j] - 1, j - 1);
        let (r, c) = if transpose { (rows[jj], cols[i]) } else { (rows[i], cols[jj]) };
        if cost[r][c].is_finite() {
            pairs.push((r, c));
            total += cost[r][c];
        }
    }
    pairs.sort_unstable();
    (pairs, total)
}

/// One member of an aligned group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub client: usize,
    pub local_index: usize,
    pub count: usize,
    pub distance_to_dominant: f64,
}

/// Uploaded parameters judged to describe the same base distribution.
#[derive(Debug, Clone)]
pub struct AlignedGroup {
    pub members: Vec<GroupMember>,
    /// (client, local_index) of the member fitted on the most data.
    pub dominant: (usize, usize),
    /// The dominant member's released parameter; the one broadcast.
    pub param: DistributionParameter,
    /// Total training points behind the group.
    pub aggregated_count: usize,
}

/// The server's partition of all uploads into parallel groups and the
/// orthogonal remainder, plus the downlink payload.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub parallel_groups: Vec<AlignedGroup>,
    pub orthogonal: Vec<GroupMember>,
    /// Dominants of parallel groups followed by orthogonal parameters.
    pub payload: Vec<DistributionParameter>,
    /// Aggregated data count behind each payload entry.
    pub aggregated_counts: Vec<usize>,
    /// Threshold actually used.
    pub tau: f64,
}

struct PoolGroup {
    members: Vec<DistributionParameter>,
    dominant: usize,
}

impl PoolGroup {
    fn rep(&self) -> &DistributionParameter {
        &self.members[self.dominant]
    }

    fn push(&mut self, p: DistributionParameter) {
        self.members.push(p);
        self.reselect_dominant();
    }

    fn reselect_dominant(&mut self) {
        let mut best = 0;
        for i in 1..self.members.len() {
            let (a, b) = (&self.members[i], &self.members[best]);
            let better = a.count > b.count
                || (a.count == b.count
                    && (a.owner, a.local_index) < (b.owner, b.local_index));
            if better {
                best = i;
            }
        }
        self.dominant = best;
    }
}

/// Scale-adaptive default threshold: half the median distance among
/// label-compatible parameter pairs from distinct clients.
pub fn default_tau(uploads: &[UploadMessage]) -> f64 {
    let mut dists = Vec::new();
    for (i, ua) in uploads.iter().enumerate() {
        for ub in &uploads[i + 1..] {
            for pa in &ua.params {
                for pb in &ub.params {
                    if pa.label == pb.label && pa.v.len() == pb.v.len() {
                        dists.push(dist(&pa.v, &pb.v));
                    }
                }
            }
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    0.5 * median
}

/// Sequentially merges clients' uploads into a pool of groups. Each client's
/// parameters are matched against the current group representatives; matches
/// at distance <= tau join the group, everything else opens a new one.
pub fn align(uploads: &[UploadMessage], tau: Option<f64>) -> Result<AlignmentResult> {
    if uploads.is_empty() {
        return Err(Error::Input("align: no uploads".into()));
    }
    let dim = uploads
        .iter()
        .flat_map(|u| &u.params)
        .map(|p| p.v.len())
        .next()
        .ok_or_else(|| Error::Input("align: uploads carry no parameters".into()))?;
    if uploads.iter().flat_map(|u| &u.params).any(|p| p.v.len() != dim) {
        return Err(Error::Input("align: inconsistent parameter dimensions".into()));
    }
    let tau = tau.unwrap_or_else(|| default_tau(uploads));

    let mut order: Vec<&UploadMessage> = uploads.iter().collect();
    order.sort_by_key(|u| u.owner);

    let mut pool: Vec<PoolGroup> = Vec::new();
    for upload in order {
        if pool.is_empty() || upload.params.is_empty() {
            for p in &upload.params {
                pool.push(PoolGroup { members: vec![p.clone()], dominant: 0 });
            }
            continue;
        }
        let reps: Vec<DistributionParameter> = pool.iter().map(|g| g.rep().clone()).collect();
        let cost = pairwise_cost(&reps, &upload.params)?;
        let assignment = km_assign(&cost)?;
        let mut placed = vec![false; upload.params.len()];
        for &(g, j) in &assignment.pairs {
            if cost[g][j] <= tau {
                pool[g].push(upload.params[j].clone());
                placed[j] = true;
            }
        }
        for (j, p) in upload.params.iter().enumerate() {
            if !placed[j] {
                pool.push(PoolGroup { members: vec![p.clone()], dominant: 0 });
            }
        }
    }

    let mut parallel_groups = Vec::new();
    let mut orthogonal = Vec::new();
    let mut payload = Vec::new();
    let mut aggregated_counts = Vec::new();
    let mut orth_params = Vec::new();
    let mut orth_counts = Vec::new();
    for group in pool {
        let rep = group.rep().clone();
        if group.members.len() >= 2 {
            let members = group
                .members
                .iter()
                .map(|p| GroupMember {
                    client: p.owner,
                    local_index: p.local_index,
                    count: p.count,
                    distance_to_dominant: dist(&p.v, &rep.v),
                })
                .collect();
            let aggregated: usize = group.members.iter().map(|p| p.count).sum();
            payload.push(rep.clone());
            aggregated_counts.push(aggregated);
            parallel_groups.push(AlignedGroup {
                members,
                dominant: (rep.owner, rep.local_index),
                param: rep,
                aggregated_count: aggregated,
            });
        } else {
            orthogonal.push(GroupMember {
                client: rep.owner,
                local_index: rep.local_index,
                count: rep.count,
                distance_to_dominant: 0.0,
            });
            orth_counts.push(rep.count);
            orth_params.push(rep);
        }
    }
    payload.extend(orth_params);
    aggregated_counts.extend(orth_counts);

    Ok(AlignmentResult { parallel_groups, orthogonal, payload, aggregated_counts, tau })
}

/// The single downlink of a run.
pub fn broadcast(result: &AlignmentResult) -> Vec<DistributionParameter> {
    result.payload.clone()
}

/// CSV dump of the partition: one row per uploaded parameter.
pub fn alignment_to_csv(result: &AlignmentResult) -> String {
    let mut out = String::from("group_id,client_id,local_index,dominant,count,distance_to_dominant\n");
    let mut group_id = 0;
    for g in &result.parallel_groups {
        for m in &g.members {
            let dominant = (m.client, m.local_index) == g.dominant;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                group_id, m.client, m.local_index, dominant as u8, m.count, m.distance_to_dominant
            ));
        }
        group_id += 1;
    }
    for m in &result.orthogonal {
        out.push_str(&format!(
            "{},{},{},1,{},0\n",
            group_id, m.client, m.local_index, m.count
        ));
        group_id += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(owner: usize, local: usize, label: usize, count: usize, v: Vec<f64>) -> DistributionParameter {
        DistributionParameter { v, label, count, owner, local_index: local }
    }

    fn upload(owner: usize, params: Vec<DistributionParameter>) -> UploadMessage {
        UploadMessage { owner, params, clip_bound: 10.0, noise_sigma: 0.0 }
    }

    #[test]
    fn cost_zero_for_identical() {
        let a = vec![param(0, 0, 1, 5, vec![1.0, 2.0])];
        let b = vec![param(1, 0, 1, 5, vec![1.0, 2.0])];
        assert_eq!(pairwise_cost(&a, &b).unwrap(), vec![vec![0.0]]);
    }

    #[test]
    fn cost_three_four_five() {
        let a = vec![param(0, 0, 0, 1, vec![0.0, 0.0])];
        let b = vec![param(1, 0, 0, 1, vec![3.0, 4.0])];
        assert_eq!(pairwise_cost(&a, &b).unwrap(), vec![vec![5.0]]);
    }

    #[test]
    fn cost_label_gate() {
        let a = vec![param(0, 0, 0, 1, vec![0.0])];
        let b = vec![param(1, 0, 1, 1, vec![0.0])];
        assert_eq!(pairwise_cost(&a, &b).unwrap(), vec![vec![f64::INFINITY]]);
    }

    #[test]
    fn cost_dim_mismatch() {
        let a = vec![param(0, 0, 0, 1, vec![0.0])];
        let b = vec![param(1, 0, 0, 1, vec![0.0, 1.0])];
        assert!(pairwise_cost(&a, &b).is_err());
    }

    #[test]
    fn km_diagonal_optimum() {
        let a = km_assign(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn km_cross_optimum() {
        // brute force: 4+3=7 vs 1+2=3
        let a = km_assign(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn km_rejects_empty() {
        assert!(km_assign(&[]).is_err());
        let empty_row: Vec<Vec<f64>> = vec![vec![]];
        assert!(km_assign(&empty_row).is_err());
    }

    #[test]
    fn km_all_infeasible_gives_empty_matching() {
        let a = km_assign(&[vec![f64::INFINITY]]).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn km_partial_over_finite_edges() {
        let inf = f64::INFINITY;
        let a = km_assign(&[vec![1.0, inf], vec![inf, inf]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn km_rectangular_saturates_smaller_side() {
        let a = km_assign(&[vec![5.0, 1.0, 3.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
        let b = km_assign(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(b.pairs, vec![(1, 0)]);
    }

    #[test]
    fn km_lexicographic_tie_break() {
        // both diagonals cost 2; lexicographically smallest is {(0,0),(1,1)}
        let a = km_assign(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        // exhaustive over injective row->col maps, finite edges only
        fn rec(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, acc: f64, best: &mut (usize, f64), depth: usize) {
            if r == cost.len() {
                if depth > best.0 || (depth == best.0 && acc < best.1) {
                    *best = (depth, acc);
                }
                return;
            }
            rec(cost, r + 1, used, acc, best, depth);
            for c in 0..cost[0].len() {
                if !used[c] && cost[r][c].is_finite() {
                    used[c] = true;
                    rec(cost, r + 1, used, acc + cost[r][c], best, depth + 1);
                    used[c] = false;
                }
            }
        }
        let mut best = (0usize, f64::INFINITY);
        let mut used = vec![false; cost[0].len()];
        rec(cost, 0, &mut used, 0.0, &mut best, 0);
        if best.0 == 0 {
            0.0
        } else {
            best.1
        }
    }

    #[test]
    fn km_matches_brute_force_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        for trial in 0..200 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..m)
                        .map(|_| {
                            if rng.gen_bool(0.1) {
                                f64::INFINITY
                            } else {
                                rng.gen_range(0..1000) as f64
                            }
                        })
                        .collect()
                })
                .collect();
            let got = km_assign(&cost).unwrap();
            let want = brute_force_min(&cost);
            assert_eq!(got.total_cost, want, "trial {trial}: {cost:?}");
        }
    }

    #[test]
    fn align_disjoint_labels_all_orthogonal() {
        let u0 = upload(0, vec![param(0, 0, 0, 10, vec![0.0, 0.0])]);
        let u1 = upload(1, vec![param(1, 0, 1, 10, vec![0.0, 0.0]), param(1, 1, 2, 5, vec![1.0, 1.0])]);
        let r = align(&[u0, u1], Some(1.0)).unwrap();
        assert!(r.parallel_groups.is_empty());
        assert_eq!(r.orthogonal.len(), 3);
        assert_eq!(r.payload.len(), 3);
    }

    #[test]
    fn align_identical_sets_fully_parallel() {
        let params = |owner: usize| {
            vec![
                param(owner, 0, 0, 10, vec![0.0, 0.0]),
                param(owner, 1, 1, 10, vec![5.0, 5.0]),
            ]
        };
        let r = align(&[upload(0, params(0)), upload(1, params(1))], Some(0.5)).unwrap();
        assert_eq!(r.parallel_groups.len(), 2);
        assert!(r.orthogonal.is_empty());
        assert_eq!(r.payload.len(), 2);
    }

    #[test]
    fn align_dominant_by_count() {
        // three clients share base at origin with counts 10, 50, 20, plus
        // two private bases each (distinct labels keep them apart)
        let mut uploads = Vec::new();
        for (k, count) in [(0usize, 10usize), (1, 50), (2, 20)] {
            let mut params = vec![param(k, 0, 0, count, vec![0.01 * k as f64, 0.0])];
            params.push(param(k, 1, (10 + 2 * k) as usize, 5, vec![100.0 + k as f64 * 50.0, 0.0]));
            params.push(param(k, 2, (11 + 2 * k) as usize, 5, vec![-100.0 - k as f64 * 50.0, 0.0]));
            uploads.push(upload(k, params));
        }
        let r = align(&uploads, Some(1.0)).unwrap();
        assert_eq!(r.parallel_groups.len(), 1);
        assert_eq!(r.parallel_groups[0].dominant, (1, 0));
        assert_eq!(r.parallel_groups[0].aggregated_count, 80);
        assert_eq!(r.orthogonal.len(), 6);
        assert_eq!(r.payload.len(), 1 + 6);
    }

    #[test]
    fn align_partition_covers_everything_once() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let mut uploads = Vec::new();
        for k in 0..4 {
            let params = (0..3)
                .map(|j| {
                    param(k, j, rng.gen_range(0..2), rng.gen_range(1..100), vec![
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ])
                })
                .collect();
            uploads.push(upload(k, params));
        }
        let r = align(&uploads, None).unwrap();
        let mut seen = std::collections::HashSet::new();
        for g in &r.parallel_groups {
            for m in &g.members {
                assert!(seen.insert((m.client, m.local_index)));
            }
            assert!(g.members.len() >= 2);
        }
        for m in &r.orthogonal {
            assert!(seen.insert((m.client, m.local_index)));
        }
        assert_eq!(seen.len(), 12);
        assert_eq!(r.payload.len(), r.parallel_groups.len() + r.orthogonal.len());
        assert_eq!(r.payload.len(), r.aggregated_counts.len());
    }

    #[test]
    fn align_invariant_to_local_index_permutation() {
        let base = |owner: usize, order: [usize; 2]| {
            let mut ps = vec![
                param(owner, order[0], 0, 10, vec![0.0, 0.0]),
                param(owner, order[1], 1, 20, vec![5.0, 5.0]),
            ];
            ps.sort_by_key(|p| p.local_index);
            ps
        };
        let r1 = align(&[upload(0, base(0, [0, 1])), upload(1, base(1, [0, 1]))], Some(0.5)).unwrap();
        let r2 = align(&[upload(0, base(0, [1, 0])), upload(1, base(1, [0, 1]))], Some(0.5)).unwrap();
        assert_eq!(r1.parallel_groups.len(), r2.parallel_groups.len());
        assert_eq!(r1.orthogonal.len(), r2.orthogonal.len());
        let sizes = |r: &AlignmentResult| {
            let mut s: Vec<usize> = r.parallel_groups.iter().map(|g| g.members.len()).collect();
            s.sort_unstable();
            s
        };
        assert_eq!(sizes(&r1), sizes(&r2));
    }

    #[test]
    fn broadcast_returns_payload() {
        let u0 = upload(0, vec![param(0, 0, 0, 10, vec![0.0])]);
        let u1 = upload(1, vec![param(1, 0, 0, 20, vec![0.0])]);
        let r = align(&[u0, u1], Some(1.0)).unwrap();
        let payload = broadcast(&r);
        assert_eq!(payload.len(), 1);
        assert_eq!(payload[0].owner, 1);
    }

    #[test]
    fn csv_dump_has_row_per_parameter() {
        let u0 = upload(0, vec![param(0, 0, 0, 10, vec![0.0]), param(0, 1, 1, 5, vec![9.0])]);
        let u1 = upload(1, vec![param(1, 0, 0, 20, vec![0.0])]);
        let r = align(&[u0, u1], Some(1.0)).unwrap();
        let csv = alignment_to_csv(&r);
        assert_eq!(csv.lines().count(), 1 + 3);
    }
}
