//! Factor matrices, predictions, item ranking and the binary model format.
//!
//! Matrix `i` is K×S_i and stored column-major, so the feature vector of
//! entity `j` is the contiguous slice `[j*K, (j+1)*K)`. Each matrix has a
//! cached Gram `M Mᵀ` that is kept coherent by every mutating method.

use std::io::{Read, Write};

use crc::{Crc, CRC_64_XZ};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, hadamard_assign};

pub const MAGIC: &[u8; 6] = b"ITALS\x01";

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    k: usize,
    sizes: Vec<usize>,
    roles: Vec<String>,
    matrices: Vec<Vec<f64>>,
    grams: Vec<Vec<f64>>,
}

/// How one dimension is pinned when scoring items.
#[derive(Debug, Clone, Copy)]
pub enum Fixed<'a> {
    /// A single entity.
    Index(usize),
    /// Weighted average of several entities' feature vectors.
    Blend(&'a [(u32, f64)]),
}

/// Default role labels: `user`, `item`, then `context`, `context2`, …
pub fn default_roles(d: usize) -> Vec<String> {
    (0..d)
        .map(|i| match i {
            0 => "user".to_owned(),
            1 => "item".to_owned(),
            2 => "context".to_owned(),
            n => format!("context{}", n - 1),
        })
        .collect()
}

impl FactorModel {
    /// Random model with entries uniform on `[0, 1/√K)`.
    pub fn init(sizes: &[usize], k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("number of factors must be at least 1"));
        }
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "need at least two non-empty dimensions, got {sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (k as f64).sqrt();
        let matrices: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&s| (0..k * s).map(|_| rng.random::<f64>() * scale).collect())
            .collect();
        Self::from_matrices(k, sizes.to_vec(), default_roles(sizes.len()), matrices)
    }

    /// Builds a model from column-major matrices; Grams are computed here.
    pub fn from_matrices(
        k: usize,
        sizes: Vec<usize>,
        roles: Vec<String>,
        matrices: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if k == 0 || sizes.len() < 2 {
            return Err(Error::invalid("need K ≥ 1 and at least two dimensions"));
        }
        if roles.len() != sizes.len() || matrices.len() != sizes.len() {
            return Err(Error::invalid("roles, sizes and matrices disagree on D"));
        }
        for (i, (m, &s)) in matrices.iter().zip(&sizes).enumerate() {
            if m.len() != k * s {
                return Err(Error::invalid(format!(
                    "matrix {i} has {} entries, expected {}",
                    m.len(),
                    k * s
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("matrix {i} has non-finite entries")));
            }
        }
        for r in &roles {
            if r.is_empty() || r.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid role label '{r}'")));
            }
        }
        let grams = matrices.iter().map(|m| linalg::gram(m, k)).collect();
        Ok(FactorModel {
            k,
            sizes,
            roles,
            matrices,
            grams,
        })
    }

    pub fn with_roles(mut self, roles: Vec<String>) -> Result<Self> {
        if roles.len() != self.ndim() {
            return Err(Error::invalid("role count must equal D"));
        }
        self.roles = roles;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ndim(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    pub fn role_index(&self, role: &str) -> Option<usize> {
        self.roles.iter().position(|r| r == role)
    }

    pub fn matrix(&self, dim: usize) -> &[f64] {
        &self.matrices[dim]
    }

    pub fn gram(&self, dim: usize) -> &[f64] {
        &self.grams[dim]
    }

    pub fn column(&self, dim: usize, entity: usize) -> &[f64] {
        &self.matrices[dim][entity * self.k..(entity + 1) * self.k]
    }

    /// Replaces a whole matrix and refreshes its Gram.
    pub fn set_matrix(&mut self, dim: usize, values: Vec<f64>) -> Result<()> {
        if dim >= self.ndim() {
            return Err(Error::invalid(format!("no dimension {dim}")));
        }
        if values.len() != self.k * self.sizes[dim] {
            return Err(Error::invalid("matrix has the wrong number of entries"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        self.grams[dim] = linalg::gram(&values, self.k);
        self.matrices[dim] = values;
        Ok(())
    }

    /// Replaces one column and refreshes that dimension's Gram.
    pub fn set_column(&mut self, dim: usize, entity: usize, values: &[f64]) -> Result<()> {
        self.check_index(dim, entity)?;
        if values.len() != self.k {
            return Err(Error::invalid("column has the wrong length"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("column contains non-finite values"));
        }
        let mut m = std::mem::take(&mut self.matrices[dim]);
        m[entity * self.k..(entity + 1) * self.k].copy_from_slice(values);
        self.restore_matrix(dim, m);
        Ok(())
    }

    /// Detaches matrix `dim` for in-place updates. The Gram is refreshed by
    /// [`FactorModel::restore_matrix`].
    pub(crate) fn take_matrix(&mut self, dim: usize) -> Vec<f64> {
        std::mem::take(&mut self.matrices[dim])
    }

    pub(crate) fn restore_matrix(&mut self, dim: usize, m: Vec<f64>) {
        self.grams[dim] = linalg::gram(&m, self.k);
        self.matrices[dim] = m;
    }

    fn check_index(&self, dim: usize, entity: usize) -> Result<()> {
        match self.sizes.get(dim) {
            Some(&size) if entity < size => Ok(()),
            Some(&size) => Err(Error::IndexOutOfRange {
                dim,
                index: entity,
                size,
            }),
            None => Err(Error::invalid(format!("no dimension {dim}"))),
        }
    }

    /// `Σ_k Π_d M^(d)[k, i_d]`.
    pub fn predict(&self, indices: &[usize]) -> Result<f64> {
        if indices.len() != self.ndim() {
            return Err(Error::invalid(format!(
                "expected {} indices, got {}",
                self.ndim(),
                indices.len()
            )));
        }
        for (dim, &i) in indices.iter().enumerate() {
            self.check_index(dim, i)?;
        }
        let mut acc = self.column(0, indices[0]).to_vec();
        for (dim, &i) in indices.iter().enumerate().skip(1) {
            hadamard_assign(&mut acc, self.column(dim, i));
        }
        Ok(acc.iter().sum())
    }

    /// Scores every entity of `item_dim` with all other dimensions pinned.
    ///
    /// `fixed` has one entry per dimension; the entry at `item_dim` is
    /// ignored and every other entry must be present.
    pub fn score_items(&self, item_dim: usize, fixed: &[Option<Fixed<'_>>]) -> Result<Vec<f64>> {
        if item_dim >= self.ndim() || fixed.len() != self.ndim() {
            return Err(Error::invalid(format!(
                "need {} dimension assignments and item_dim < {}",
                self.ndim(),
                self.ndim()
            )));
        }
        let k = self.k;
        let mut q = vec![1.0; k];
        for (dim, f) in fixed.iter().enumerate() {
            if dim == item_dim {
                continue;
            }
            match f {
                None => {
                    return Err(Error::invalid(format!(
                        "no assignment for dimension {dim} ({})",
                        self.roles[dim]
                    )))
                }
                Some(Fixed::Index(j)) => {
                    self.check_index(dim, *j)?;
                    hadamard_assign(&mut q, self.column(dim, *j));
                }
                Some(Fixed::Blend(states)) => {
                    if states.is_empty() {
                        return Err(Error::invalid("empty blend"));
                    }
                    let mut avg = vec![0.0; k];
                    for &(s, w) in states.iter() {
                        self.check_index(dim, s as usize)?;
                        for (a, &c) in avg.iter_mut().zip(self.column(dim, s as usize)) {
                            *a += w * c;
                        }
                    }
                    hadamard_assign(&mut q, &avg);
                }
            }
        }
        Ok(self.matrices[item_dim]
            .chunks_exact(k)
            .map(|col| linalg::dot(col, &q))
            .collect())
    }

    /// Writes the model in the `ITALS\x01` binary format.
    pub fn save<W: Write>(&self, mut sink: W) -> Result<()> {
        let mut payload = Vec::new();
        let mut header = format!("{} {}", self.ndim(), self.k);
        for s in &self.sizes {
            header.push_str(&format!(" {s}"));
        }
        for r in &self.roles {
            header.push(' ');
            header.push_str(r);
        }
        header.push('\n');
        payload.extend_from_slice(header.as_bytes());
        for m in &self.matrices {
            for v in m {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        sink.write_all(MAGIC)?;
        sink.write_all(&payload)?;
        sink.write_all(&CHECKSUM.checksum(&payload).to_le_bytes())?;
        sink.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.save(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format(
                "bad magic or unsupported version (expected ITALS v1)".into(),
            ));
        }
        let payload_and_crc = &bytes[MAGIC.len()..];
        let newline = payload_and_crc
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header = std::str::from_utf8(&payload_and_crc[..newline])
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let (k, sizes, roles) = parse_header(header)?;

        let n_values: usize = sizes
            .iter()
            .try_fold(0usize, |acc, &s| acc.checked_add(s.checked_mul(k)?))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        let body_start = newline + 1;
        let expected = body_start + n_values * 8 + 8;
        if payload_and_crc.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {expected}",
                payload_and_crc.len()
            )));
        }
        let values: Vec<f64> = payload_and_crc[body_start..body_start + n_values * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value at position {pos}")));
        }
        let payload = &payload_and_crc[..expected - 8];
        let stored = u64::from_le_bytes(payload_and_crc[expected - 8..].try_into().unwrap());
        if CHECKSUM.checksum(payload) != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }

        let mut matrices = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &s in &sizes {
            matrices.push(values[offset..offset + k * s].to_vec());
            offset += k * s;
        }
        Self::from_matrices(k, sizes, roles, matrices)
    }
}

fn parse_header(header: &str) -> Result<(usize, Vec<usize>, Vec<String>)> {
    let bad = || Error::Format(format!("malformed header '{header}'"));
    let tokens: Vec<&str> = header.split(' ').collect();
    if tokens.len() < 2 {
        return Err(bad());
    }
    let d: usize = tokens[0].parse().map_err(|_| bad())?;
    let k: usize = tokens[1].parse().map_err(|_| bad())?;
    if d < 2 || k == 0 || tokens.len() != 2 + 2 * d {
        return Err(bad());
    }
    let sizes = tokens[2..2 + d]
        .iter()
        .map(|t| t.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    let roles = tokens[2 + d..].iter().map(|t| t.to_string()).collect();
    Ok((k, sizes, roles))
}
