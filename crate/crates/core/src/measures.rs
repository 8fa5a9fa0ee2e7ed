//! Marginal spaces and discrete probability measures.
//!
//! Every marginal lives on an axis-aligned box in `R^d`. Measures are finite
//! weighted atom clouds with pairwise-distinct atoms and weights summing to one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance accepted on the weight sum at construction.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("space dimension must be at least 1")]
    ZeroDimension,
    #[error("bounds have length {lower}/{upper}, expected {dim}")]
    BoundsLength { dim: usize, lower: usize, upper: usize },
    #[error("empty box: lower[{axis}] = {lower} is not below upper[{axis}] = {upper}")]
    EmptyBox { axis: usize, lower: f64, upper: f64 },
    #[error("{atoms} atoms but {weights} weights")]
    LengthMismatch { atoms: usize, weights: usize },
    #[error("a measure needs at least one atom")]
    NoAtoms,
    #[error("atom {index} has dimension {got}, expected {expected}")]
    AtomDimension { index: usize, got: usize, expected: usize },
    #[error("atom {index} lies outside the box")]
    OutsideBox { index: usize },
    #[error("atoms {first} and {second} coincide")]
    DuplicateAtoms { first: usize, second: usize },
    #[error("weight {index} is negative or not finite ({value})")]
    BadWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL:e}")]
    WeightSum { sum: f64 },
    #[error("requested zero atoms")]
    ZeroCount,
    #[error("a marginal system needs at least two measures, got {0}")]
    TooFewMarginals(usize),
}

/// Axis-aligned box standing in for a marginal space `M_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Space {
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    label: String,
}

impl Space {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        label: impl Into<String>,
    ) -> Result<Self, MeasureError> {
        let dim = lower.len();
        if dim == 0 {
            return Err(MeasureError::ZeroDimension);
        }
        if upper.len() != dim {
            return Err(MeasureError::BoundsLength { dim, lower: lower.len(), upper: upper.len() });
        }
        for (axis, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(MeasureError::EmptyBox { axis, lower: lo, upper: hi });
            }
        }
        Ok(Self { dim, lower, upper, label: label.into() })
    }

    /// The cube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self, MeasureError> {
        Self::new(vec![lo; dim], vec![hi; dim], format!("cube{dim}"))
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self, MeasureError> {
        Self::new(vec![lo], vec![hi], "interval")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&lo, &hi))| x >= lo && x <= hi)
    }

    /// Clamp a point coordinate-wise into the box.
    pub fn clamp(&self, point: &mut [f64]) {
        for (x, (&lo, &hi)) in point.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *x = x.clamp(lo, hi);
        }
    }

    /// Uniform sample from the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(&lo, &hi)| rng.gen_range(lo..hi)).collect()
    }
}

/// Finite probability measure on a [`Space`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteMeasure {
    space: Space,
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Validate and build a measure. Weights summing to one within
    /// [`WEIGHT_SUM_TOL`] are renormalized exactly; anything else is rejected.
    pub fn new(
        space: Space,
        atoms: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self, MeasureError> {
        if atoms.len() != weights.len() {
            return Err(MeasureError::LengthMismatch { atoms: atoms.len(), weights: weights.len() });
        }
        if atoms.is_empty() {
            return Err(MeasureError::NoAtoms);
        }
        for (index, atom) in atoms.iter().enumerate() {
            if atom.len() != space.dim {
                return Err(MeasureError::AtomDimension {
                    index,
                    got: atom.len(),
                    expected: space.dim,
                });
            }
            if !space.contains(atom) {
                return Err(MeasureError::OutsideBox { index });
            }
        }
        for first in 0..atoms.len() {
            for second in first + 1..atoms.len() {
                if atoms[first] == atoms[second] {
                    return Err(MeasureError::DuplicateAtoms { first, second });
                }
            }
        }
        for (index, &value) in weights.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(MeasureError::BadWeight { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MeasureError::WeightSum { sum });
        }
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self { space, atoms, weights })
    }

    /// Equal weights on the given atoms.
    pub fn uniform(space: Space, atoms: Vec<Vec<f64>>) -> Result<Self, MeasureError> {
        let n = atoms.len();
        if n == 0 {
            return Err(MeasureError::NoAtoms);
        }
        Self::new(space, atoms, vec![1.0 / n as f64; n])
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn atom(&self, index: usize) -> &[f64] {
        &self.atoms[index]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    /// Index of the atom bit-identical to `point`, if any.
    pub fn find_atom(&self, point: &[f64]) -> Option<usize> {
        self.atoms.iter().position(|a| a.as_slice() == point)
    }
}

/// Draw a measure with `n` uniform atoms in the box and positive random
/// weights. A pure function of `(space, n, seed)`.
pub fn random_generic_measure(
    space: &Space,
    n: usize,
    seed: u64,
) -> Result<DiscreteMeasure, MeasureError> {
    if n == 0 {
        return Err(MeasureError::ZeroCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = distinct_atoms(space, n, &mut rng);
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    DiscreteMeasure::new(space.clone(), atoms, raw.into_iter().map(|w| w / total).collect())
}

/// Same atoms as [`random_generic_measure`] would draw, with equal weights.
pub fn random_uniform_measure(
    space: &Space,
    n: usize,
    seed: u64,
) -> Result<DiscreteMeasure, MeasureError> {
    if n == 0 {
        return Err(MeasureError::ZeroCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = distinct_atoms(space, n, &mut rng);
    DiscreteMeasure::uniform(space.clone(), atoms)
}

fn distinct_atoms(space: &Space, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut atoms: Vec<Vec<f64>> = Vec::with_capacity(n);
    while atoms.len() < n {
        let candidate = space.sample(rng);
        if !atoms.contains(&candidate) {
            atoms.push(candidate);
        }
    }
    atoms
}

/// One-dimensional marginals whose cumulative weight breakpoints are nested in
/// those of the first marginal.
///
/// The first marginal gets `counts[0]` random atoms with random positive
/// weights. Every other marginal `i` merges consecutive (in atom order) runs of
/// those weights into `counts[i]` atoms, placed at sorted random positions.
/// Couplings between such marginals can be supported on a graph over the first
/// coordinate, which is the finite stand-in for an atomless first marginal.
pub fn nested_quantile_system(
    space: &Space,
    counts: &[usize],
    seed: u64,
) -> Result<MarginalSystem, MeasureError> {
    if counts.len() < 2 {
        return Err(MeasureError::TooFewMarginals(counts.len()));
    }
    if space.dim != 1 {
        return Err(MeasureError::BoundsLength { dim: 1, lower: space.dim, upper: space.dim });
    }
    let n1 = counts[0];
    if counts.contains(&0) {
        return Err(MeasureError::ZeroCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first_atoms = distinct_atoms(space, n1, &mut rng);
    first_atoms.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let raw: Vec<f64> = (0..n1).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let first_weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let mut measures = Vec::with_capacity(counts.len());
    measures.push(DiscreteMeasure::new(space.clone(), first_atoms, first_weights.clone())?);
    for &n in &counts[1..] {
        let n = n.min(n1);
        // choose n-1 cut positions among the n1-1 gaps
        let mut gaps: Vec<usize> = (1..n1).collect();
        for k in (1..gaps.len()).rev() {
            let j = rng.gen_range(0..=k);
            gaps.swap(k, j);
        }
        let mut cuts: Vec<usize> = gaps.into_iter().take(n - 1).collect();
        cuts.sort_unstable();
        cuts.push(n1);
        let mut weights = Vec::with_capacity(n);
        let mut start = 0;
        for &end in &cuts {
            weights.push(first_weights[start..end].iter().sum::<f64>());
            start = end;
        }
        let mut atoms = distinct_atoms(space, n, &mut rng);
        atoms.sort_by(|a, b| a[0].total_cmp(&b[0]));
        measures.push(DiscreteMeasure::new(space.clone(), atoms, weights)?);
    }
    MarginalSystem::new(measures)
}

/// The ordered marginals `μ_1, …, μ_m` of one transport problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalSystem {
    measures: Vec<DiscreteMeasure>,
}

impl MarginalSystem {
    pub fn new(measures: Vec<DiscreteMeasure>) -> Result<Self, MeasureError> {
        if measures.len() < 2 {
            return Err(MeasureError::TooFewMarginals(measures.len()));
        }
        Ok(Self { measures })
    }

    pub fn measures(&self) -> &[DiscreteMeasure] {
        &self.measures
    }

    pub fn measure(&self, i: usize) -> &DiscreteMeasure {
        &self.measures[i]
    }

    /// Number of marginals `m`.
    pub fn arity(&self) -> usize {
        self.measures.len()
    }

    /// Atom counts `(n_1, …, n_m)`.
    pub fn shape(&self) -> Vec<usize> {
        self.measures.iter().map(DiscreteMeasure::len).collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.measures.iter().map(DiscreteMeasure::dim).collect()
    }

    pub fn spaces(&self) -> Vec<Space> {
        self.measures.iter().map(|m| m.space.clone()).collect()
    }

    /// Coordinates of the atom tuple `index`.
    pub fn point(&self, index: &[usize]) -> Vec<&[f64]> {
        self.measures.iter().zip(index).map(|(m, &a)| m.atom(a)).collect()
    }

    /// Map a coordinate tuple back to atom indices.
    pub fn locate(&self, point: &[Vec<f64>]) -> Option<Vec<usize>> {
        if point.len() != self.arity() {
            return None;
        }
        self.measures.iter().zip(point).map(|(m, p)| m.find_atom(p)).collect()
    }
}

/// JSON description of a marginal: explicit atoms or a seeded random draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureSpec {
    Explicit {
        dim: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
        atoms: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
    Random {
        dim: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
        n: usize,
        seed: u64,
        #[serde(default)]
        uniform: bool,
    },
}

impl MeasureSpec {
    pub fn build(&self) -> Result<DiscreteMeasure, MeasureError> {
        match self {
            MeasureSpec::Explicit { dim, lower, upper, atoms, weights } => {
                let space = checked_space(*dim, lower, upper)?;
                DiscreteMeasure::new(space, atoms.clone(), weights.clone())
            }
            MeasureSpec::Random { dim, lower, upper, n, seed, uniform } => {
                let space = checked_space(*dim, lower, upper)?;
                if *uniform {
                    random_uniform_measure(&space, *n, *seed)
                } else {
                    random_generic_measure(&space, *n, *seed)
                }
            }
        }
    }
}

fn checked_space(dim: usize, lower: &[f64], upper: &[f64]) -> Result<Space, MeasureError> {
    if lower.len() != dim || upper.len() != dim {
        return Err(MeasureError::BoundsLength { dim, lower: lower.len(), upper: upper.len() });
    }
    Space::new(lower.to_vec(), upper.to_vec(), "json")
}

impl From<&DiscreteMeasure> for MeasureSpec {
    fn from(m: &DiscreteMeasure) -> Self {
        MeasureSpec::Explicit {
            dim: m.dim(),
            lower: m.space.lower.clone(),
            upper: m.space.upper.clone(),
            atoms: m.atoms.clone(),
            weights: m.weights.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> Space {
        Space::interval(0.0, 2.0).unwrap()
    }

    #[test]
    fn uniform_two_point_measure() {
        let m = DiscreteMeasure::new(unit(), vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn duplicate_atoms_rejected() {
        let err = DiscreteMeasure::new(unit(), vec![vec![0.0], vec![0.0]], vec![0.5, 0.5]);
        assert_eq!(err, Err(MeasureError::DuplicateAtoms { first: 0, second: 1 }));
    }

    #[test]
    fn bad_weight_sum_rejected() {
        let err = DiscreteMeasure::new(unit(), vec![vec![0.0], vec![1.0]], vec![0.3, 0.3]);
        assert!(matches!(err, Err(MeasureError::WeightSum { sum }) if (sum - 0.6).abs() < 1e-15));
    }

    #[test]
    fn near_one_sum_is_renormalized() {
        let m = DiscreteMeasure::new(unit(), vec![vec![0.0], vec![1.0]], vec![0.5, 0.5 + 5e-10])
            .unwrap();
        let s: f64 = m.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_weight_and_outside_atoms_rejected() {
        assert!(matches!(
            DiscreteMeasure::new(unit(), vec![vec![0.0], vec![1.0]], vec![1.5, -0.5]),
            Err(MeasureError::BadWeight { index: 1, .. })
        ));
        assert_eq!(
            DiscreteMeasure::new(unit(), vec![vec![3.0]], vec![1.0]),
            Err(MeasureError::OutsideBox { index: 0 })
        );
    }

    #[test]
    fn space_invariants() {
        assert_eq!(Space::new(vec![], vec![], "x"), Err(MeasureError::ZeroDimension));
        assert!(matches!(Space::interval(1.0, 1.0), Err(MeasureError::EmptyBox { .. })));
    }

    #[test]
    fn random_measure_is_deterministic() {
        let s = Space::interval(0.0, 1.0).unwrap();
        let a = random_generic_measure(&s, 4, 7).unwrap();
        let b = random_generic_measure(&s, 4, 7).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.weights().iter().zip(b.weights()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn random_measure_in_two_dims() {
        let s = Space::cube(2, 0.0, 1.0).unwrap();
        let m = random_generic_measure(&s, 10, 1).unwrap();
        assert_eq!(m.len(), 10);
        let total: f64 = m.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(m.atom(i), m.atom(j));
            }
        }
    }

    #[test]
    fn random_measure_needs_atoms() {
        let s = Space::interval(0.0, 1.0).unwrap();
        assert_eq!(random_generic_measure(&s, 0, 1), Err(MeasureError::ZeroCount));
    }

    #[test]
    fn nested_system_weights_are_block_sums() {
        let s = Space::interval(0.0, 1.0).unwrap();
        let sys = nested_quantile_system(&s, &[6, 4, 6], 3).unwrap();
        assert_eq!(sys.shape(), vec![6, 4, 6]);
        let cum = |w: &[f64]| -> Vec<f64> {
            w.iter()
                .scan(0.0, |acc, x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect()
        };
        let c1 = cum(sys.measure(0).weights());
        for i in 1..3 {
            for b in cum(sys.measure(i).weights()) {
                assert!(c1.iter().any(|&a| (a - b).abs() < 1e-12));
            }
        }
        // equal counts copy the weights, so the first marginal is non-uniform
        assert!(sys.measure(0).weights().iter().any(|&w| (w - 1.0 / 6.0).abs() > 1e-3));
    }

    #[test]
    fn spec_roundtrip_via_json() {
        let json = r#"{"dim":1,"lower":[0],"upper":[1],"n":5,"seed":9}"#;
        let spec: MeasureSpec = serde_json::from_str(json).unwrap();
        let m = spec.build().unwrap();
        let direct = random_generic_measure(&Space::interval(0.0, 1.0).unwrap(), 5, 9).unwrap();
        assert_eq!((m.atoms(), m.weights()), (direct.atoms(), direct.weights()));
        let explicit = MeasureSpec::from(&m);
        assert_eq!(explicit.build().unwrap().atoms(), m.atoms());
    }

    proptest! {
        #[test]
        fn construction_respects_invariants(
            atoms in proptest::collection::vec(-1.0f64..3.0, 1..8),
            weights in proptest::collection::vec(-0.2f64..1.0, 1..8),
        ) {
            let atoms: Vec<Vec<f64>> = atoms.into_iter().map(|a| vec![a]).collect();
            if let Ok(m) = DiscreteMeasure::new(unit(), atoms, weights) {
                let total: f64 = m.weights().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(m.weights().iter().all(|&w| w >= 0.0));
                for i in 0..m.len() {
                    prop_assert!(m.space().contains(m.atom(i)));
                    for j in i + 1..m.len() {
                        prop_assert!(m.atom(i) != m.atom(j));
                    }
                }
            }
        }

        #[test]
        fn random_measure_pure_in_seed(n in 1usize..12, seed in any::<u64>()) {
            let s = Space::cube(2, -1.0, 1.0).unwrap();
            prop_assert_eq!(random_generic_measure(&s, n, seed), random_generic_measure(&s, n, seed));
        }
    }
}
