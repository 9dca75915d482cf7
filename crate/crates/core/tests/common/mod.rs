#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use relblend::molio::{Bond, BondType, Molecule};
use relblend::rng::{KeyedRng, Stream};
use relblend::train::{load_dataset, Record};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn toy_records() -> Vec<Record> {
    load_dataset(&fixtures().join("toy")).expect("toy fixture loads")
}

fn bond_kind(rng: &mut KeyedRng) -> BondType {
    BondType::from_code(rng.range_inclusive(1, 4) as i64).unwrap()
}

fn coords(rng: &mut KeyedRng, n: usize) -> Vec<[f64; 3]> {
    // jittered lattice so no two atoms coincide
    (0..n)
        .map(|a| {
            let base = [
                (a % 3) as f64 * 1.4,
                ((a / 3) % 3) as f64 * 1.4,
                (a / 9) as f64 * 1.4,
            ];
            base.map(|b| b + 0.3 * (rng.uniform() - 0.5))
        })
        .collect()
}

/// Random graph on `n` atoms: each pair bonded with probability `density`.
pub fn random_graph(seed: u64, n: usize, density: f64, with_coords: bool) -> Molecule {
    let mut rng = KeyedRng::new(seed, Stream::Fixture, n as u64, 1);
    let types = (0..n).map(|_| rng.range_inclusive(0, 5)).collect();
    let mut bonds = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.uniform() < density {
                bonds.push(Bond {
                    i,
                    j,
                    kind: bond_kind(&mut rng),
                });
            }
        }
    }
    let c = with_coords.then(|| coords(&mut rng, n));
    Molecule::new(types, bonds, c).expect("random graph is valid")
}

/// Random tree (unique shortest paths) with coordinates.
pub fn random_tree(seed: u64, n: usize) -> Molecule {
    let mut rng = KeyedRng::new(seed, Stream::Fixture, n as u64, 2);
    let types = (0..n).map(|_| rng.range_inclusive(0, 9)).collect();
    let bonds = (1..n)
        .map(|j| Bond {
            i: rng.range_inclusive(0, j - 1),
            j,
            kind: bond_kind(&mut rng),
        })
        .collect();
    let c = coords(&mut rng, n);
    Molecule::new(types, bonds, Some(c)).expect("random tree is valid")
}

pub fn random_permutation(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = KeyedRng::new(seed, Stream::Fixture, n as u64, 3);
    let mut p: Vec<usize> = (0..n).collect();
    for k in (1..n).rev() {
        p.swap(k, rng.range_inclusive(0, k));
    }
    p
}

/// `out[perm[a], perm[b]] = m[a, b]`.
pub fn permute_matrix<T: Clone>(m: &Array2<T>, perm: &[usize]) -> Array2<T> {
    let mut out = m.clone();
    for ((a, b), v) in m.indexed_iter() {
        out[[perm[a], perm[b]]] = v.clone();
    }
    out
}

/// All-pairs hop counts by Floyd–Warshall; `None` for unreachable pairs.
pub fn floyd_warshall(mol: &Molecule) -> Vec<Vec<Option<usize>>> {
    let n = mol.atom_count();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for b in mol.bonds() {
        d[b.i][b.j] = 1;
        d[b.j][b.i] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d.into_iter()
        .map(|row| row.into_iter().map(|v| (v < inf).then_some(v)).collect())
        .collect()
}

/// The same pretraining example after relabelling atom `a` as `perm[a]`.
pub fn permuted_sample(
    sample: &relblend::model::PretrainSample<f64>,
    mol: &Molecule,
    perm: &[usize],
    max_spd: usize,
) -> relblend::model::PretrainSample<f64> {
    use ndarray::{Array2, Array3};
    use relblend::relations::Topology;
    let n = perm.len();
    let moved = mol.permuted(perm).unwrap();
    let t = &sample.targets;
    let dist = t.dist.as_ref().map(|d| {
        let mut out = Array3::zeros(d.dim());
        for ((i, j, k), &v) in d.indexed_iter() {
            out[[perm[i], perm[j], k]] = v;
        }
        out
    });
    let noise = t.noise.as_ref().map(|e| {
        let mut out = Array2::zeros(e.dim());
        for ((i, k), &v) in e.indexed_iter() {
            out[[perm[i], k]] = v;
        }
        out
    });
    let mut mask = sample.mask.clone();
    mask.entries = permute_matrix(&sample.mask.entries, perm);
    let topology = Topology::new(&moved, max_spd);
    assert_eq!(topology.spd, permute_matrix(&t.spd, perm));
    assert_eq!(topology.atom_count(), n);
    relblend::model::PretrainSample {
        targets: relblend::objectives::PretrainTargets {
            spd: topology.spd.clone(),
            edge: topology.edge_target.clone(),
            dist,
            noise,
        },
        dist: sample.dist.as_ref().map(|d| permute_matrix(d, perm)),
        mask,
        topology,
    }
}
