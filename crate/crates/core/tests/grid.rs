mod common;

use common::{idx, parents_from, six_bus, thirteen_node, tree_from_parents};
use feederstate::grid::{parse_feeder, to_feeder_string, BusKind};
use proptest::prelude::*;

#[test]
fn six_bus_fixture_shape() {
    let m = six_bus();
    assert_eq!(m.bus_count(), 6);
    assert_eq!(m.branches().len(), 5);
    assert_eq!(m.label(m.source()), 1);
    assert_eq!(m.buses()[m.source()].kind, BusKind::Source);
}

#[test]
fn thirteen_node_fixture_shape() {
    let m = thirteen_node();
    assert_eq!(m.bus_count(), 13);
    assert_eq!(m.branches().len(), 12);
    let count: usize = m.adjacency_pattern().iter().flatten().filter(|&&x| x).count();
    assert_eq!(count, 13 + 2 * 12);
    assert_eq!(m.load_buses().len(), 8);
}

#[test]
fn six_bus_adjacency_matches_edge_list() {
    let m = six_bus();
    let edges = [(1, 2), (2, 3), (3, 4), (4, 5), (4, 6)];
    let a = m.adjacency_pattern();
    for i in 1..=6u32 {
        for j in 1..=6u32 {
            let expected = i == j || edges.contains(&(i, j)) || edges.contains(&(j, i));
            let (bi, bj) = (m.bus_index(i).unwrap(), m.bus_index(j).unwrap());
            assert_eq!(a[bi][bj], expected, "({i},{j})");
        }
    }
}

#[test]
fn six_bus_distances() {
    let m = six_bus();
    let b = idx(&m, &[1, 4, 5, 6]);
    assert_eq!(m.graph_distance(b[0], b[1]).unwrap(), 3);
    assert_eq!(m.graph_distance(b[2], b[3]).unwrap(), 2);
    assert_eq!(m.graph_distance(b[2], b[2]).unwrap(), 0);
    assert!(m.graph_distance(0, 99).is_err());
}

#[test]
fn cycle_is_rejected() {
    let text = r#"
[[buses]]
id = 1
phases = "A"
kind = "source"
base_voltage_v = 2400.0

[[buses]]
id = 2
phases = "A"
kind = "load"
base_voltage_v = 2400.0

[[buses]]
id = 3
phases = "A"
kind = "load"
base_voltage_v = 2400.0

[[branches]]
from = 1
to = 2
phases = "A"
impedance = [[[0.1, 0.2]]]

[[branches]]
from = 2
to = 3
phases = "A"
impedance = [[[0.1, 0.2]]]

[[branches]]
from = 3
to = 1
phases = "A"
impedance = [[[0.1, 0.2]]]
"#;
    let err = parse_feeder(text).unwrap_err().to_string();
    assert!(err.contains("cycle"), "{err}");
}

#[test]
fn fixtures_round_trip() {
    for m in [six_bus(), thirteen_node()] {
        let again = parse_feeder(&to_feeder_string(&m)).unwrap();
        assert_eq!(again, m);
    }
}

/// Tree distance through the lowest common ancestor, using parent pointers.
fn lca_distance(parents: &[usize], a: usize, b: usize) -> usize {
    let up = |mut v: usize| {
        let mut path = vec![v];
        while v != 0 {
            v = parents[v - 1];
            path.push(v);
        }
        path
    };
    let (pa, pb) = (up(a), up(b));
    let ia = pa.iter().position(|v| pb.contains(v)).unwrap();
    let ib = pb.iter().position(|&v| v == pa[ia]).unwrap();
    ia + ib
}

proptest! {
    #[test]
    fn adjacency_count_on_trees(draws in prop::collection::vec(any::<u32>(), 0..40)) {
        let m = tree_from_parents(&parents_from(&draws));
        let n = m.bus_count();
        let a = m.adjacency_pattern();
        prop_assert_eq!(a.iter().flatten().filter(|&&x| x).count(), n + 2 * (n - 1));
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a[i][j], a[j][i]);
            }
        }
    }

    #[test]
    fn distance_is_a_tree_metric(draws in prop::collection::vec(any::<u32>(), 1..30)) {
        let parents = parents_from(&draws);
        let m = tree_from_parents(&parents);
        let n = m.bus_count();
        let d: Vec<Vec<usize>> = (0..n).map(|a| (0..n).map(|b| m.graph_distance(a, b).unwrap()).collect()).collect();
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(d[a][b], lca_distance(&parents, a, b));
                prop_assert_eq!(d[a][b], d[b][a]);
                prop_assert_eq!(d[a][b] == 0, a == b);
                for c in 0..n {
                    prop_assert!(d[a][c] <= d[a][b] + d[b][c]);
                }
            }
        }
    }

    #[test]
    fn random_trees_round_trip(draws in prop::collection::vec(any::<u32>(), 0..20)) {
        let m = tree_from_parents(&parents_from(&draws));
        prop_assert_eq!(parse_feeder(&to_feeder_string(&m)).unwrap(), m);
    }
}
