//! Costs given as dense tables over atom tuples, and their binary file format.
//!
//! File layout, all little-endian: `m` as u64, then `n_1 … n_m` as u64, then
//! `n_1 · … · n_m` f64 values in row-major tuple order (last index fastest).

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::CostError;
use crate::measures::MarginalSystem;

/// A cost defined only on the atom tuples of a fixed marginal system.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCost {
    atoms: Vec<Vec<Vec<f64>>>,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TabulatedCost {
    pub fn new(atoms: Vec<Vec<Vec<f64>>>, values: Vec<f64>) -> Result<Self, CostError> {
        let shape: Vec<usize> = atoms.iter().map(Vec::len).collect();
        if shape.len() < 2 || shape.contains(&0) {
            return Err(CostError::Parameter("tabulated cost needs ≥ 2 nonempty marginals".into()));
        }
        let size: usize = shape.iter().product();
        if values.len() != size {
            return Err(CostError::Parameter(format!(
                "table has {} values, shape {shape:?} needs {size}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CostError::Parameter("table values must be finite".into()));
        }
        Ok(Self { atoms, shape, values })
    }

    /// Bind a table to the atoms of `system`.
    pub fn from_system(system: &MarginalSystem, values: Vec<f64>) -> Result<Self, CostError> {
        let atoms = system.measures().iter().map(|m| m.atoms().to_vec()).collect();
        Self::new(atoms, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn block_dims(&self) -> Vec<usize> {
        self.atoms.iter().map(|a| a[0].len()).collect()
    }

    pub(crate) fn lookup(&self, x: &[&[f64]]) -> Option<f64> {
        let mut flat = 0;
        for (atoms, (p, &n)) in self.atoms.iter().zip(x.iter().zip(&self.shape)) {
            let k = atoms.iter().position(|a| a.as_slice() == *p)?;
            flat = flat * n + k;
        }
        Some(self.values[flat])
    }
}

fn file_err(e: io::Error) -> CostError {
    CostError::TensorFile(e.to_string())
}

pub fn write_tensor_file(path: &Path, shape: &[usize], values: &[f64]) -> Result<(), CostError> {
    let size: usize = shape.iter().product();
    if values.len() != size {
        return Err(CostError::TensorFile(format!("{} values for shape {shape:?}", values.len())));
    }
    let mut buf = Vec::with_capacity(8 * (1 + shape.len() + size));
    buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &n in shape {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(file_err)?;
    file.write_all(&buf).map_err(file_err)
}

/// Read `(shape, values)` from a tensor file.
pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f64>), CostError> {
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(file_err)?.read_to_end(&mut bytes).map_err(file_err)?;
    let mut words = bytes.chunks_exact(8);
    if !words.remainder().is_empty() {
        return Err(CostError::TensorFile("length is not a multiple of 8 bytes".into()));
    }
    let mut next = || words.next().map(|w| <[u8; 8]>::try_from(w).unwrap());
    let m = next().map(u64::from_le_bytes).ok_or_else(|| CostError::TensorFile("empty file".into()))?;
    if !(2..=64).contains(&m) {
        return Err(CostError::TensorFile(format!("implausible arity {m}")));
    }
    let mut shape = Vec::with_capacity(m as usize);
    for _ in 0..m {
        let n = next().map(u64::from_le_bytes).ok_or_else(|| CostError::TensorFile("truncated header".into()))?;
        shape.push(n as usize);
    }
    let size = shape.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
    let size = size.ok_or_else(|| CostError::TensorFile("shape overflows".into()))?;
    let values: Vec<f64> = std::iter::from_fn(|| next().map(f64::from_le_bytes)).collect();
    if values.len() != size {
        return Err(CostError::TensorFile(format!(
            "expected {size} values for shape {shape:?}, found {}",
            values.len()
        )));
    }
    Ok((shape, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let values = vec![0.1, -2.5, 1e-300, 7.0, 3.25, f64::MIN_POSITIVE];
        write_tensor_file(&path, &[2, 3], &values).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 * (1 + 2 + 6));
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        let (shape, back) = read_tensor_file(&path).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_tensor_file(&path, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_tensor_file(&path), Err(CostError::TensorFile(_))));
    }

    #[test]
    fn lookup_by_atom_coordinates() {
        let atoms = vec![vec![vec![0.0], vec![1.0]], vec![vec![0.5], vec![2.0], vec![3.0]]];
        let t = TabulatedCost::new(atoms, (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.lookup(&[&[1.0], &[2.0]]), Some(4.0));
        assert_eq!(t.lookup(&[&[1.0], &[2.5]]), None);
    }
}
