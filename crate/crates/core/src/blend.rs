//! Multinomial blend masks and the modality-blended relation matrix.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relations::RelationSet;
use crate::rng::{KeyedRng, Stream};
use crate::scalar::Scalar;

/// Source relation selected at one matrix position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Spd = 1,
    Edge = 2,
    Dist = 3,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Spd, Modality::Edge, Modality::Dist];

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BlendError {
    #[error("blend probabilities {0:?} must be finite, non-negative and sum to 1")]
    InvalidProbabilities([f64; 3]),
    #[error("blend mask is {mask}x{mask} but the molecule has {atoms} atoms")]
    SizeMismatch { mask: usize, atoms: usize },
    #[error("mask selects the 3D distance at ({i}, {j}) but no distance encoding is available")]
    MissingDistance { i: usize, j: usize },
    #[error("blend mask must cover at least one atom")]
    Empty,
}

/// Validated probability triple `(p_spd, p_edge, p_dist)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct BlendProbs([f64; 3]);

impl BlendProbs {
    pub fn new(p: [f64; 3]) -> Result<Self, BlendError> {
        let ok = p.iter().all(|x| x.is_finite() && *x >= 0.0)
            && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        if ok {
            Ok(Self(p))
        } else {
            Err(BlendError::InvalidProbabilities(p))
        }
    }

    pub fn uniform() -> Self {
        Self([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])
    }

    pub fn get(&self) -> [f64; 3] {
        self.0
    }

    /// Same distribution with the 3D source removed and the rest renormalized.
    pub fn without_distance(&self) -> Result<Self, BlendError> {
        let [a, b, _] = self.0;
        let s = a + b;
        if s <= 0.0 {
            return Err(BlendError::InvalidProbabilities(self.0));
        }
        Ok(Self([a / s, b / s, 0.0]))
    }

    fn draw(&self, u: f64) -> Modality {
        let [a, b, _] = self.0;
        let pick = if u < a {
            Modality::Spd
        } else if u < a + b {
            Modality::Edge
        } else {
            Modality::Dist
        };
        if self.0[pick as usize - 1] > 0.0 {
            return pick;
        }
        // a + b can round just below 1 when p_dist == 0
        *Modality::ALL
            .iter()
            .rev()
            .find(|m| self.0[**m as usize - 1] > 0.0)
            .expect("probabilities sum to one")
    }
}

impl Default for BlendProbs {
    fn default() -> Self {
        Self::uniform()
    }
}

impl TryFrom<[f64; 3]> for BlendProbs {
    type Error = BlendError;

    fn try_from(p: [f64; 3]) -> Result<Self, Self::Error> {
        Self::new(p)
    }
}

impl From<BlendProbs> for [f64; 3] {
    fn from(p: BlendProbs) -> Self {
        p.0
    }
}

/// Symmetric per-position source selector. The diagonal is always [`Modality::Spd`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask {
    pub entries: Array2<Modality>,
    pub seed: u64,
    pub probs: BlendProbs,
}

impl BlendMask {
    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn uniform(n: usize, modality: Modality) -> Self {
        let mut entries = Array2::from_elem((n, n), modality);
        for i in 0..n {
            entries[[i, i]] = Modality::Spd;
        }
        let mut p = [0.0; 3];
        p[modality as usize - 1] = 1.0;
        Self {
            entries,
            seed: 0,
            probs: BlendProbs(p),
        }
    }

    pub fn uses(&self, modality: Modality) -> bool {
        self.entries.iter().any(|&m| m == modality)
    }
}

/// Mask for the stream `(seed, word0, word1)`; pairs `i < j` are drawn in row-major order.
pub fn sample_blend_mask_keyed(
    n: usize,
    probs: BlendProbs,
    seed: u64,
    word0: u64,
    word1: u64,
) -> Result<BlendMask, BlendError> {
    if n == 0 {
        return Err(BlendError::Empty);
    }
    let mut rng = KeyedRng::new(seed, Stream::Blend, word0, word1);
    let mut entries = Array2::from_elem((n, n), Modality::Spd);
    for i in 0..n {
        for j in i + 1..n {
            let m = probs.draw(rng.uniform());
            entries[[i, j]] = m;
            entries[[j, i]] = m;
        }
    }
    Ok(BlendMask {
        entries,
        seed,
        probs,
    })
}

/// Deterministic mask for `(n, p, seed)`.
pub fn sample_blend_mask(n: usize, p: [f64; 3], seed: u64) -> Result<BlendMask, BlendError> {
    sample_blend_mask_keyed(n, BlendProbs::new(p)?, seed, 0, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendedRelation<T> {
    pub values: Array2<T>,
    pub mask: BlendMask,
}

/// Entrywise selection of the mask-indicated source encoding.
pub fn blend_relations<T: Scalar>(
    rels: &RelationSet<T>,
    mask: &BlendMask,
) -> Result<BlendedRelation<T>, BlendError> {
    let n = rels.atom_count();
    if mask.size() != n {
        return Err(BlendError::SizeMismatch {
            mask: mask.size(),
            atoms: n,
        });
    }
    let mut values = Array2::zeros((n, n));
    for ((i, j), &m) in mask.entries.indexed_iter() {
        values[[i, j]] = match m {
            Modality::Spd => rels.spd_enc[[i, j]],
            Modality::Edge => rels.edge_enc[[i, j]],
            Modality::Dist => match &rels.dist_enc {
                Some(d) => d[[i, j]],
                None => return Err(BlendError::MissingDistance { i, j }),
            },
        };
    }
    Ok(BlendedRelation {
        values,
        mask: mask.clone(),
    })
}

/// Routes `dL/dPsi_blend` back to the three sources: `(d_spd, d_edge, d_dist)`.
pub fn blend_backward<T: Scalar>(mask: &BlendMask, grad: &Array2<T>) -> [Array2<T>; 3] {
    let n = mask.size();
    let mut out = [
        Array2::zeros((n, n)),
        Array2::zeros((n, n)),
        Array2::zeros((n, n)),
    ];
    for ((i, j), &m) in mask.entries.indexed_iter() {
        out[m as usize - 1][[i, j]] = grad[[i, j]];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_spd_only() {
        let m = sample_blend_mask(7, [1.0, 0.0, 0.0], 3).unwrap();
        assert!(m.entries.iter().all(|&e| e == Modality::Spd));
    }

    #[test]
    fn deterministic_and_symmetric() {
        let a = sample_blend_mask(9, [0.2, 0.5, 0.3], 11).unwrap();
        let b = sample_blend_mask(9, [0.2, 0.5, 0.3], 11).unwrap();
        assert_eq!(a, b);
        let c = sample_blend_mask(9, [0.2, 0.5, 0.3], 12).unwrap();
        assert_ne!(a.entries, c.entries);
        for i in 0..9 {
            assert_eq!(a.entries[[i, i]], Modality::Spd);
            for j in 0..9 {
                assert_eq!(a.entries[[i, j]], a.entries[[j, i]]);
            }
        }
    }

    #[test]
    fn invalid_probabilities_rejected() {
        for p in [
            [0.5, 0.5, 0.5],
            [-0.1, 0.6, 0.5],
            [f64::NAN, 0.5, 0.5],
            [0.3, 0.3, 0.3],
        ] {
            assert!(matches!(
                sample_blend_mask(3, p, 0),
                Err(BlendError::InvalidProbabilities(_))
            ));
        }
        assert!(BlendProbs::new([0.5, 0.5, 1e-13]).is_ok());
    }

    #[test]
    fn zero_distance_probability_never_selects_distance() {
        let p = BlendProbs::new([0.5, 0.5 - 1e-13, 0.0]).unwrap();
        assert_eq!(p.draw(1.0 - 1e-14), Modality::Edge);
        let only_spd = BlendProbs([1.0, 0.0, 0.0]);
        assert_eq!(only_spd.draw(0.999_999_999), Modality::Spd);
    }

    #[test]
    fn without_distance_renormalizes() {
        let p = BlendProbs::new([0.5, 0.3, 0.2])
            .unwrap()
            .without_distance()
            .unwrap();
        assert_eq!(p.get()[2], 0.0);
        assert!((p.get()[0] - 0.625).abs() < 1e-15);
        assert!(BlendProbs::new([0.0, 0.0, 1.0])
            .unwrap()
            .without_distance()
            .is_err());
    }

    #[test]
    fn backward_routes_to_selected_source() {
        let mut mask = BlendMask::uniform(3, Modality::Spd);
        mask.entries[[0, 1]] = Modality::Dist;
        mask.entries[[1, 0]] = Modality::Dist;
        mask.entries[[1, 2]] = Modality::Edge;
        mask.entries[[2, 1]] = Modality::Edge;
        let g = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 + 1.0);
        let [s, e, d] = blend_backward(&mask, &g);
        assert_eq!(d[[0, 1]], 2.0);
        assert_eq!(s[[0, 1]], 0.0);
        assert_eq!(e[[2, 1]], 8.0);
        assert_eq!(s.sum() + e.sum() + d.sum(), g.sum());
    }
}
