//! Pairwise relation matrices: shortest-path distance, edge-path encoding and the
//! Gaussian-basis encoding of 3D distances, with their raw prediction targets.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::molio::{BondType, Molecule, VOCAB_SIZE};
use crate::scalar::{gelu, gelu_grad, Scalar};

/// Edge-type classes: the four bond types, then "no bond" and "self".
pub const NO_BOND_CLASS: usize = BondType::COUNT;
pub const SELF_CLASS: usize = BondType::COUNT + 1;
pub const EDGE_CLASSES: usize = BondType::COUNT + 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelationError {
    #[error("molecule has no 3D coordinates")]
    MissingCoordinates,
    #[error("gaussian kernel {kernel} has non-positive width")]
    NonPositiveWidth { kernel: usize },
    #[error("{what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: String,
        found: String,
    },
}

/// SPD bucket used for disconnected pairs.
pub fn unreachable_bucket(max_spd: usize) -> usize {
    max_spd + 1
}

/// Number of SPD buckets (and SPD classes): `0..=max_spd` plus the unreachable sentinel.
pub fn spd_bucket_count(max_spd: usize) -> usize {
    max_spd + 2
}

fn bfs_hops(adj: &[Vec<(usize, BondType)>], src: usize) -> Vec<Option<usize>> {
    let mut hops = vec![None; adj.len()];
    hops[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let next = hops[u].unwrap() + 1;
        for &(v, _) in &adj[u] {
            if hops[v].is_none() {
                hops[v] = Some(next);
                queue.push_back(v);
            }
        }
    }
    hops
}

/// Hop counts clamped to `max_spd`; unreachable pairs get [`unreachable_bucket`].
pub fn spd_matrix(mol: &Molecule, max_spd: usize) -> Array2<usize> {
    assert!(max_spd >= 1, "max_spd must be at least 1");
    let n = mol.atom_count();
    let adj = mol.adjacency();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for (j, h) in bfs_hops(&adj, i).into_iter().enumerate() {
            out[[i, j]] = match h {
                Some(h) => h.min(max_spd),
                None => unreachable_bucket(max_spd),
            };
        }
    }
    out
}

/// Edge classification targets: bond type index, [`NO_BOND_CLASS`], or [`SELF_CLASS`] on the diagonal.
pub fn edge_targets(mol: &Molecule) -> Array2<usize> {
    let n = mol.atom_count();
    let mut out = Array2::from_elem((n, n), NO_BOND_CLASS);
    for b in mol.bonds() {
        out[[b.i, b.j]] = b.kind.index();
        out[[b.j, b.i]] = b.kind.index();
    }
    for i in 0..n {
        out[[i, i]] = SELF_CLASS;
    }
    out
}

/// One canonical shortest path between atoms `i < j`, as its sequence of bond types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPath {
    pub i: usize,
    pub j: usize,
    pub bonds: Vec<BondType>,
}

/// Canonical shortest paths for every connected pair `i < j`.
///
/// The path is found by BFS from `i` visiting neighbors in ascending index order and
/// following parent pointers back from `j`. It is then oriented so that its bond-type
/// sequence is lexicographically no greater than its reverse, which makes the hop
/// order independent of atom numbering whenever the shortest path is unique.
#[allow(clippy::needless_range_loop)]
pub fn canonical_paths(mol: &Molecule) -> Vec<PairPath> {
    let n = mol.atom_count();
    let adj = mol.adjacency();
    let mut paths = Vec::new();
    for i in 0..n {
        let mut parent: Vec<Option<(usize, BondType)>> = vec![None; n];
        let mut visited = vec![false; n];
        visited[i] = true;
        let mut queue = VecDeque::from([i]);
        while let Some(u) = queue.pop_front() {
            for &(v, kind) in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = Some((u, kind));
                    queue.push_back(v);
                }
            }
        }
        for j in i + 1..n {
            if !visited[j] {
                continue;
            }
            let mut bonds = Vec::new();
            let mut cur = j;
            while let Some((p, kind)) = parent[cur] {
                bonds.push(kind);
                cur = p;
            }
            // collected j -> i; forward order is i -> j
            bonds.reverse();
            let reversed: Vec<BondType> = bonds.iter().rev().copied().collect();
            if reversed < bonds {
                bonds = reversed;
            }
            paths.push(PairPath { i, j, bonds });
        }
    }
    paths
}

/// Parameter-free structure of a molecule, computed once and reused every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub max_spd: usize,
    pub atom_types: Vec<usize>,
    pub spd: Array2<usize>,
    pub edge_target: Array2<usize>,
    pub paths: Vec<PairPath>,
}

impl Topology {
    pub fn new(mol: &Molecule, max_spd: usize) -> Self {
        Self {
            max_spd,
            atom_types: mol.atom_types().to_vec(),
            spd: spd_matrix(mol, max_spd),
            edge_target: edge_targets(mol),
            paths: canonical_paths(mol),
        }
    }

    pub fn atom_count(&self) -> usize {
        self.atom_types.len()
    }
}

/// Hop-indexed weights `w_n` (row `n - 1`) and the bond-type feature table `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePathParams<T> {
    pub hop_weights: Array2<T>,
    pub bond_features: Array2<T>,
}

impl<T: Scalar> EdgePathParams<T> {
    pub fn zeros(max_spd: usize, edge_dim: usize) -> Self {
        assert!(max_spd >= 1 && edge_dim >= 1);
        Self {
            hop_weights: Array2::zeros((max_spd, edge_dim)),
            bond_features: Array2::zeros((BondType::COUNT, edge_dim)),
        }
    }

    pub fn max_hops(&self) -> usize {
        self.hop_weights.nrows()
    }

    fn hop_term(&self, hop: usize, kind: BondType) -> T {
        self.hop_weights
            .row(hop)
            .iter()
            .zip(self.bond_features.row(kind.index()))
            .fold(T::zero(), |acc, (&w, &e)| acc + w * e)
    }
}

/// Hops of `path` that carry a weight; longer paths use their first `max_hops` bonds.
fn used_hops(path: &PairPath, max_hops: usize) -> usize {
    path.bonds.len().min(max_hops)
}

/// `(1/N) sum_n w_n . e_n` over the canonical path of every connected pair; zero on the
/// diagonal and for disconnected pairs.
pub fn edge_path_encoding_from_paths<T: Scalar>(
    n: usize,
    paths: &[PairPath],
    params: &EdgePathParams<T>,
) -> Array2<T> {
    let mut out = Array2::zeros((n, n));
    for path in paths {
        let hops = used_hops(path, params.max_hops());
        let sum = path.bonds[..hops]
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (hop, &kind)| {
                acc + params.hop_term(hop, kind)
            });
        let v = sum / T::lit(hops as f64);
        out[[path.i, path.j]] = v;
        out[[path.j, path.i]] = v;
    }
    out
}

/// Edge-path encoding of a molecule. `spd_raw` must come from the same molecule.
pub fn edge_path_encoding<T: Scalar>(
    mol: &Molecule,
    params: &EdgePathParams<T>,
    spd_raw: &Array2<usize>,
) -> Array2<T> {
    let n = mol.atom_count();
    debug_assert_eq!(spd_raw.dim(), (n, n));
    let paths = canonical_paths(mol);
    debug_assert!(paths.iter().all(|p| spd_raw[[p.i, p.j]] <= p.bonds.len()));
    edge_path_encoding_from_paths(n, &paths, params)
}

/// Accumulates parameter gradients of the edge-path encoding given `dL/dPsi_edge`.
pub fn edge_path_backward<T: Scalar>(
    paths: &[PairPath],
    params: &EdgePathParams<T>,
    grad_out: &Array2<T>,
    grads: &mut EdgePathParams<T>,
) {
    for path in paths {
        let g = grad_out[[path.i, path.j]] + grad_out[[path.j, path.i]];
        if g == T::zero() {
            continue;
        }
        let hops = used_hops(path, params.max_hops());
        let scale = g / T::lit(hops as f64);
        for (hop, &kind) in path.bonds[..hops].iter().enumerate() {
            let row = kind.index();
            for c in 0..params.hop_weights.ncols() {
                let w = params.hop_weights[[hop, c]];
                let e = params.bond_features[[row, c]];
                grads.hop_weights[[hop, c]] += scale * e;
                grads.bond_features[[row, c]] += scale * w;
            }
        }
    }
}

/// Pairwise Euclidean distances.
pub fn euclid_distance_matrix<T: Scalar>(coords: &[[T; 3]]) -> Array2<T> {
    let n = coords.len();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = (0..3)
                .map(|k| {
                    let t = coords[i][k] - coords[j][k];
                    t * t
                })
                .fold(T::zero(), |a, b| a + b)
                .sqrt();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

/// Distance matrix of a molecule's own coordinates.
pub fn molecule_distances<T: Scalar>(mol: &Molecule) -> Result<Array2<T>, RelationError> {
    let coords = mol.coords().ok_or(RelationError::MissingCoordinates)?;
    Ok(euclid_distance_matrix(&convert_coords(coords)))
}

pub fn convert_coords<T: Scalar>(coords: &[[f64; 3]]) -> Vec<[T; 3]> {
    coords
        .iter()
        .map(|r| [T::lit(r[0]), T::lit(r[1]), T::lit(r[2])])
        .collect()
}

/// Gaussian basis kernels with per-atom-type-pair affine transform and a two-layer projection.
///
/// `gamma`/`beta` are `VOCAB_SIZE x VOCAB_SIZE`; the pair `(a, b)` reads entry
/// `(min(a,b), max(a,b))`, so the strictly lower triangle is never used.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernelParams<T> {
    pub means: Array1<T>,
    pub widths: Array1<T>,
    pub gamma: Array2<T>,
    pub beta: Array2<T>,
    /// `K x K`, applied as `zeta . W1`.
    pub proj_hidden: Array2<T>,
    /// `K`, the single output column of `W2`.
    pub proj_out: Array1<T>,
}

impl<T: Scalar> GaussianKernelParams<T> {
    pub fn zeros(kernels: usize) -> Self {
        assert!(kernels >= 1);
        Self {
            means: Array1::zeros(kernels),
            widths: Array1::zeros(kernels),
            gamma: Array2::zeros((VOCAB_SIZE, VOCAB_SIZE)),
            beta: Array2::zeros((VOCAB_SIZE, VOCAB_SIZE)),
            proj_hidden: Array2::zeros((kernels, kernels)),
            proj_out: Array1::zeros(kernels),
        }
    }

    /// Desk initialization of the kernel itself: centers evenly spread over `[0, 10]` Å,
    /// width `10 / K`, identity affine map. Projections are left untouched.
    pub fn init_kernels(&mut self) {
        let k = self.kernels();
        let spacing = 10.0 / k as f64;
        for idx in 0..k {
            self.means[idx] = T::lit((idx as f64 + 0.5) * spacing);
            self.widths[idx] = T::lit(spacing);
        }
        self.gamma.fill(T::one());
        self.beta.fill(T::zero());
    }

    pub fn kernels(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<(), RelationError> {
        if let Some(kernel) = self
            .widths
            .iter()
            .position(|&s| s.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater))
        {
            return Err(RelationError::NonPositiveWidth { kernel });
        }
        Ok(())
    }

    fn pair_index(a: usize, b: usize) -> [usize; 2] {
        [a.min(b), a.max(b)]
    }

    fn zeta(&self, affine: T) -> Vec<T> {
        let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        (0..self.kernels())
            .map(|k| {
                let s = self.widths[k];
                let z = (affine - self.means[k]) / s;
                (-(z * z) * T::lit(0.5)).exp() * inv_sqrt_2pi / s
            })
            .collect()
    }

    fn hidden(&self, zeta: &[T]) -> Vec<T> {
        let k = self.kernels();
        (0..k)
            .map(|l| (0..k).fold(T::zero(), |acc, m| acc + zeta[m] * self.proj_hidden[[m, l]]))
            .collect()
    }

    /// Encoding of a single distance for an atom-type pair.
    pub fn encode_pair(&self, dist: T, type_a: usize, type_b: usize) -> T {
        let idx = Self::pair_index(type_a, type_b);
        let affine = self.gamma[idx] * dist + self.beta[idx];
        let zeta = self.zeta(affine);
        self.hidden(&zeta)
            .into_iter()
            .zip(self.proj_out.iter())
            .fold(T::zero(), |acc, (u, &w)| acc + gelu(u) * w)
    }

    /// Accumulates parameter gradients for one pair given `dL/dvalue`; returns `dL/ddist`.
    #[allow(clippy::needless_range_loop)]
    pub fn backward_pair(
        &self,
        dist: T,
        type_a: usize,
        type_b: usize,
        g: T,
        grads: &mut Self,
    ) -> T {
        let k = self.kernels();
        let idx = Self::pair_index(type_a, type_b);
        let gamma = self.gamma[idx];
        let affine = gamma * dist + self.beta[idx];
        let zeta = self.zeta(affine);
        let hidden = self.hidden(&zeta);

        let mut d_hidden = vec![T::zero(); k];
        for l in 0..k {
            grads.proj_out[l] += g * gelu(hidden[l]);
            d_hidden[l] = g * self.proj_out[l] * gelu_grad(hidden[l]);
        }
        let mut d_affine = T::zero();
        for m in 0..k {
            let mut d_zeta = T::zero();
            for l in 0..k {
                grads.proj_hidden[[m, l]] += zeta[m] * d_hidden[l];
                d_zeta += self.proj_hidden[[m, l]] * d_hidden[l];
            }
            let s = self.widths[m];
            let diff = affine - self.means[m];
            // d zeta / d affine = -zeta * diff / s^2
            let common = d_zeta * zeta[m];
            d_affine -= common * diff / (s * s);
            grads.means[m] += common * diff / (s * s);
            grads.widths[m] += common * (diff * diff / (s * s * s) - T::one() / s);
        }
        grads.gamma[idx] += d_affine * dist;
        grads.beta[idx] += d_affine;
        d_affine * gamma
    }
}

/// Gaussian-basis encoding of a distance matrix. Pairs are evaluated on `i <= j` and mirrored.
pub fn gaussian_distance_encoding<T: Scalar>(
    dist: &Array2<T>,
    atom_types: &[usize],
    params: &GaussianKernelParams<T>,
) -> Result<Array2<T>, RelationError> {
    params.validate()?;
    let n = atom_types.len();
    if dist.dim() != (n, n) {
        return Err(RelationError::Shape {
            what: "distance matrix",
            expected: format!("{n}x{n}"),
            found: format!("{:?}", dist.dim()),
        });
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = params.encode_pair(dist[[i, j]], atom_types[i], atom_types[j]);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(out)
}

/// Parameter gradients of [`gaussian_distance_encoding`]; returns `dL/ddist` (symmetric).
pub fn gaussian_distance_backward<T: Scalar>(
    dist: &Array2<T>,
    atom_types: &[usize],
    params: &GaussianKernelParams<T>,
    grad_out: &Array2<T>,
    grads: &mut GaussianKernelParams<T>,
) -> Array2<T> {
    let n = atom_types.len();
    let mut d_dist = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let g = if i == j {
                grad_out[[i, i]]
            } else {
                grad_out[[i, j]] + grad_out[[j, i]]
            };
            if g == T::zero() {
                continue;
            }
            let dd = params.backward_pair(dist[[i, j]], atom_types[i], atom_types[j], g, grads);
            // dist[i,j] and dist[j,i] are the same variable; split evenly
            if i == j {
                d_dist[[i, i]] = dd;
            } else {
                let half = dd * T::lit(0.5);
                d_dist[[i, j]] = half;
                d_dist[[j, i]] = half;
            }
        }
    }
    d_dist
}

/// Scalar SPD bias: lookup of the bucket table.
pub fn spd_encoding<T: Scalar>(spd_raw: &Array2<usize>, table: &Array1<T>) -> Array2<T> {
    spd_raw.mapv(|b| table[b])
}

pub fn spd_backward<T: Scalar>(
    spd_raw: &Array2<usize>,
    grad_out: &Array2<T>,
    grad_table: &mut Array1<T>,
) {
    for (&b, &g) in spd_raw.iter().zip(grad_out.iter()) {
        grad_table[b] += g;
    }
}

/// Every learnable tensor that feeds the relation encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationParams<T> {
    pub spd_table: Array1<T>,
    pub edge: EdgePathParams<T>,
    pub gaussian: GaussianKernelParams<T>,
}

impl<T: Scalar> RelationParams<T> {
    pub fn zeros(max_spd: usize, edge_dim: usize, kernels: usize) -> Self {
        Self {
            spd_table: Array1::zeros(spd_bucket_count(max_spd)),
            edge: EdgePathParams::zeros(max_spd, edge_dim),
            gaussian: GaussianKernelParams::zeros(kernels),
        }
    }
}

/// The three relation encodings of one molecule plus its raw targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSet<T> {
    pub spd_raw: Array2<usize>,
    pub spd_enc: Array2<T>,
    pub edge_target: Array2<usize>,
    pub edge_enc: Array2<T>,
    pub dist_raw: Option<Array2<T>>,
    pub dist_enc: Option<Array2<T>>,
}

impl<T: Scalar> RelationSet<T> {
    /// Encodes `topology`; `dist` is the (possibly noised) distance matrix when 3D is available.
    pub fn compute(
        topology: &Topology,
        dist: Option<Array2<T>>,
        params: &RelationParams<T>,
    ) -> Result<Self, RelationError> {
        let n = topology.atom_count();
        let dist_enc = match &dist {
            Some(d) => Some(gaussian_distance_encoding(
                d,
                &topology.atom_types,
                &params.gaussian,
            )?),
            None => None,
        };
        Ok(Self {
            spd_raw: topology.spd.clone(),
            spd_enc: spd_encoding(&topology.spd, &params.spd_table),
            edge_target: topology.edge_target.clone(),
            edge_enc: edge_path_encoding_from_paths(n, &topology.paths, &params.edge),
            dist_raw: dist,
            dist_enc,
        })
    }

    pub fn for_molecule(
        mol: &Molecule,
        max_spd: usize,
        params: &RelationParams<T>,
    ) -> Result<Self, RelationError> {
        let topology = Topology::new(mol, max_spd);
        let dist = match mol.coords() {
            Some(c) => Some(euclid_distance_matrix(&convert_coords::<T>(c))),
            None => None,
        };
        Self::compute(&topology, dist, params)
    }

    pub fn atom_count(&self) -> usize {
        self.spd_raw.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::Bond;

    fn chain(n: usize) -> Molecule {
        let bonds = (1..n)
            .map(|k| Bond {
                i: k - 1,
                j: k,
                kind: BondType::Single,
            })
            .collect();
        Molecule::new(vec![1; n], bonds, None).unwrap()
    }

    #[test]
    fn spd_on_path_graph() {
        let s = spd_matrix(&chain(3), 15);
        assert_eq!(s[[0, 2]], 2);
        assert_eq!(s[[0, 1]], 1);
        assert_eq!(s[[2, 0]], 2);
        assert!((0..3).all(|i| s[[i, i]] == 0));
    }

    #[test]
    fn spd_unreachable_sentinel() {
        let m = Molecule::new(vec![1, 1], vec![], None).unwrap();
        let s = spd_matrix(&m, 15);
        assert_eq!(s[[0, 1]], 16);
        assert_eq!(s[[1, 0]], 16);
    }

    #[test]
    fn spd_clamps_long_paths() {
        let s = spd_matrix(&chain(6), 3);
        assert_eq!(s[[0, 5]], 3);
        assert_eq!(s[[0, 3]], 3);
        assert_eq!(s[[0, 2]], 2);
    }

    #[test]
    fn edge_targets_classes() {
        let m = Molecule::new(
            vec![1, 1, 3],
            vec![Bond {
                i: 1,
                j: 2,
                kind: BondType::Double,
            }],
            None,
        )
        .unwrap();
        let t = edge_targets(&m);
        assert_eq!(t[[1, 2]], 1);
        assert_eq!(t[[2, 1]], 1);
        assert_eq!(t[[0, 1]], NO_BOND_CLASS);
        assert_eq!(t[[0, 0]], SELF_CLASS);
    }

    #[test]
    fn single_bond_edge_encoding() {
        let m = Molecule::new(
            vec![1, 1],
            vec![Bond {
                i: 0,
                j: 1,
                kind: BondType::Single,
            }],
            None,
        )
        .unwrap();
        let mut p = EdgePathParams::<f64>::zeros(15, 2);
        p.bond_features
            .row_mut(0)
            .assign(&ndarray::arr1(&[1.0, 0.0]));
        p.hop_weights.row_mut(0).assign(&ndarray::arr1(&[3.0, 5.0]));
        let enc = edge_path_encoding(&m, &p, &spd_matrix(&m, 15));
        assert_eq!(enc[[0, 1]], 3.0);
        assert_eq!(enc[[1, 0]], 3.0);
        assert_eq!(enc[[0, 0]], 0.0);
    }

    #[test]
    fn zero_hop_weights_give_zero_encoding() {
        let m = chain(5);
        let mut p = EdgePathParams::<f64>::zeros(15, 3);
        p.bond_features.fill(1.7);
        let enc = edge_path_encoding(&m, &p, &spd_matrix(&m, 15));
        assert!(enc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_hops_average_cancels() {
        let m = chain(3);
        let mut p = EdgePathParams::<f64>::zeros(15, 2);
        p.bond_features
            .row_mut(0)
            .assign(&ndarray::arr1(&[0.5, -2.0]));
        p.hop_weights
            .row_mut(0)
            .assign(&ndarray::arr1(&[1.5, 0.25]));
        p.hop_weights
            .row_mut(1)
            .assign(&ndarray::arr1(&[1.5, 0.25]));
        let enc = edge_path_encoding(&m, &p, &spd_matrix(&m, 15));
        assert_eq!(enc[[0, 2]], 1.5 * 0.5 + 0.25 * -2.0);
    }

    #[test]
    fn long_paths_use_first_hops() {
        let m = chain(5);
        let mut p = EdgePathParams::<f64>::zeros(2, 1);
        p.bond_features[[0, 0]] = 1.0;
        p.hop_weights[[0, 0]] = 2.0;
        p.hop_weights[[1, 0]] = 4.0;
        let enc = edge_path_encoding(&m, &p, &spd_matrix(&m, 2));
        assert_eq!(enc[[0, 4]], 3.0);
    }

    #[test]
    fn path_orientation_is_canonical() {
        // 0 =double= 1 -single- 2: reading from the double end gives [2,1] > [1,2]
        let m = Molecule::new(
            vec![1, 1, 1],
            vec![
                Bond {
                    i: 0,
                    j: 1,
                    kind: BondType::Double,
                },
                Bond {
                    i: 1,
                    j: 2,
                    kind: BondType::Single,
                },
            ],
            None,
        )
        .unwrap();
        let paths = canonical_paths(&m);
        let p02 = paths.iter().find(|p| (p.i, p.j) == (0, 2)).unwrap();
        assert_eq!(p02.bonds, vec![BondType::Single, BondType::Double]);
    }

    #[test]
    fn distance_345() {
        let d = euclid_distance_matrix(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [3.0, 4.0, 0.0]]);
        assert_eq!(d[[0, 1]], 5.0);
        assert_eq!(d[[1, 2]], 0.0);
        assert_eq!(d[[1, 0]], 5.0);
    }

    #[test]
    fn missing_coordinates_error() {
        let m = chain(2);
        assert_eq!(
            molecule_distances::<f64>(&m).unwrap_err(),
            RelationError::MissingCoordinates
        );
    }

    #[test]
    fn gaussian_peak_value() {
        let mut p = GaussianKernelParams::<f64>::zeros(1);
        p.init_kernels();
        p.means[0] = 1.25;
        p.widths[0] = 1.0;
        let zeta = p.zeta(1.25);
        assert!((zeta[0] - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn zero_projection_gives_zero_encoding() {
        let mut p = GaussianKernelParams::<f64>::zeros(4);
        p.init_kernels();
        p.proj_out.fill(0.3);
        let d = euclid_distance_matrix(&[[0.0, 0.0, 0.0], [1.1, 0.0, 0.0], [0.0, 2.0, 0.5]]);
        let enc = gaussian_distance_encoding(&d, &[1, 3, 0], &p).unwrap();
        assert!(enc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_positive_width_rejected() {
        let mut p = GaussianKernelParams::<f64>::zeros(3);
        p.init_kernels();
        p.widths[2] = 0.0;
        let d = Array2::zeros((1, 1));
        assert_eq!(
            gaussian_distance_encoding(&d, &[0], &p).unwrap_err(),
            RelationError::NonPositiveWidth { kernel: 2 }
        );
    }

    #[test]
    fn affine_table_is_shared_by_unordered_pairs() {
        let mut p = GaussianKernelParams::<f64>::zeros(2);
        p.init_kernels();
        p.proj_hidden.fill(0.7);
        p.proj_out.fill(1.0);
        p.gamma[[1, 3]] = 1.3;
        assert_eq!(p.encode_pair(1.0, 1, 3), p.encode_pair(1.0, 3, 1));
    }
}
