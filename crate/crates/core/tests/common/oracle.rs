//! Brute-force references for partitioning and masks.

use std::collections::BTreeSet;

use feederstate::FeederModel;

/// Partitions by grouping branches that share a non-PMU endpoint (union-find
/// over branches); each group's bus set is one partition. Lone buses only
/// arise on a single-bus feeder.
pub fn partitions(model: &FeederModel, pmu: &[usize]) -> Vec<BTreeSet<usize>> {
    let edges: Vec<(usize, usize)> = model.branches().iter().map(|b| (b.from, b.to)).collect();
    let mut parent: Vec<usize> = (0..edges.len()).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for a in 0..edges.len() {
        for b in a + 1..edges.len() {
            let (ea, eb) = (edges[a], edges[b]);
            let shared = [ea.0, ea.1].into_iter().any(|v| (v == eb.0 || v == eb.1) && !pmu.contains(&v));
            if shared {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for (k, &(u, v)) in edges.iter().enumerate() {
        let r = find(&mut parent, k);
        let g = groups.entry(r).or_default();
        g.insert(u);
        g.insert(v);
    }
    let mut out: Vec<BTreeSet<usize>> = groups.into_values().collect();
    if model.bus_count() == 1 {
        out.push(BTreeSet::from([0]));
    }
    out.sort();
    out
}

/// Floyd-Warshall over the subgraph induced by `buses`; returns the largest finite distance.
pub fn diameter(model: &FeederModel, buses: &BTreeSet<usize>) -> usize {
    let list: Vec<usize> = buses.iter().copied().collect();
    let k = list.len();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; k]; k];
    for i in 0..k {
        d[i][i] = 0;
        for j in 0..k {
            if model.branch_between(list[i], list[j]).is_some() {
                d[i][j] = 1;
            }
        }
    }
    for m in 0..k {
        for i in 0..k {
            for j in 0..k {
                d[i][j] = d[i][j].min(d[i][m] + d[m][j]);
            }
        }
    }
    d.iter().flatten().copied().filter(|&x| x < inf).max().unwrap_or(0)
}

/// The mask rule evaluated pair by pair: `(i, j)` at layer `t` is allowed iff
/// `i == j`, or the buses are adjacent and share a partition of diameter >= t.
pub fn mask_entry(model: &FeederModel, parts: &[(BTreeSet<usize>, usize)], t: usize, i: usize, j: usize) -> bool {
    i == j
        || (model.branch_between(i, j).is_some() && parts.iter().any(|(p, d)| t <= *d && p.contains(&i) && p.contains(&j)))
}
